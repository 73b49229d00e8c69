#include "af/tap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

namespace af {

namespace {
// Slack for the cumulative-mass comparison: softmax masses only sum to 1 up
// to rounding, and tau = 1 must still prune everything.
constexpr double kMassSlack = 1e-12;
}  // namespace

std::string to_string(PruneStrategy s) {
    switch (s) {
        case PruneStrategy::adaptive: return "adaptive";
        case PruneStrategy::fixed_k: return "fixed_k";
        case PruneStrategy::cls_attention: return "cls_attention";
        case PruneStrategy::penultimate_only: return "penultimate_only";
        case PruneStrategy::none: return "none";
    }
    return "?";
}

PruneStrategy prune_strategy_from_string(const std::string& s) {
    if (s == "adaptive") return PruneStrategy::adaptive;
    if (s == "fixed_k") return PruneStrategy::fixed_k;
    if (s == "cls_attention") return PruneStrategy::cls_attention;
    if (s == "penultimate_only") return PruneStrategy::penultimate_only;
    if (s == "none") return PruneStrategy::none;
    throw std::invalid_argument("unknown prune strategy '" + s + "'");
}

std::string to_string(ViewPolicy v) {
    return v == ViewPolicy::single_view ? "single_view" : "multi_view";
}

ViewPolicy view_policy_from_string(const std::string& s) {
    if (s == "single_view") return ViewPolicy::single_view;
    if (s == "multi_view") return ViewPolicy::multi_view;
    throw std::invalid_argument("unknown view policy '" + s + "'");
}

void PruneConfig::validate(int num_patches) const {
    check(tau >= 0.0 && tau <= 1.0, "PruneConfig: tau must be in [0,1], got " + std::to_string(tau));
    if (strategy == PruneStrategy::fixed_k) {
        check(fixed_k >= 0 && fixed_k < num_patches,
              "PruneConfig: fixed_k " + std::to_string(fixed_k) + " must be < N = " +
                  std::to_string(num_patches));
    }
}

MultiScaleScore fuse_scores(const std::vector<ScoreVector>& scores,
                            const std::vector<int>& source_indices) {
    check(!scores.empty(), "fuse_scores: empty score list");
    const std::size_t len = scores[0].values.size();
    check(len >= 2, "fuse_scores: need CLS plus at least one patch");
    for (const ScoreVector& sv : scores) {
        check(sv.values.size() == len, "fuse_scores: inconsistent score lengths (" +
                                           std::to_string(sv.values.size()) + " vs " +
                                           std::to_string(len) + ")");
    }
    const std::size_t n = len - 1;
    check(source_indices.size() == n, "fuse_scores: source index count mismatch");

    MultiScaleScore out;
    out.source_indices = source_indices;
    out.s_m.assign(n, 0.0);
    const double inv_layers = 1.0 / static_cast<double>(scores.size());
    for (const ScoreVector& sv : scores) {
        // Drop index 0 (CLS), softmax over the remaining N entries.
        double mx = sv.values[1];
        for (std::size_t j = 2; j < len; ++j) {
            mx = std::max(mx, sv.values[j]);
        }
        std::vector<double> soft(n);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            soft[j] = std::exp(sv.values[j + 1] - mx);
            sum += soft[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            soft[j] /= sum;
            out.s_m[j] += soft[j] * inv_layers;
        }
        out.per_layer.push_back(std::move(soft));
    }
    return out;
}

namespace {

std::vector<int> order_by_score(const MultiScaleScore& s) {
    std::vector<int> order(s.s_m.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (s.s_m[a] != s.s_m[b]) {
            return s.s_m[a] < s.s_m[b];
        }
        return s.source_indices[a] < s.source_indices[b];
    });
    return order;
}

PruneOutcome finish(const MultiScaleScore& s, const std::vector<int>& order,
                    std::size_t prune_count, PruneStrategy strategy) {
    PruneOutcome out;
    out.strategy = strategy;
    double mass = 0.0;
    std::vector<char> is_pruned(s.s_m.size(), 0);
    for (std::size_t i = 0; i < prune_count; ++i) {
        out.pruned.push_back(s.source_indices[order[i]]);
        is_pruned[order[i]] = 1;
        mass += s.s_m[order[i]];
    }
    out.pruned_mass = mass;
    for (std::size_t j = 0; j < s.s_m.size(); ++j) {
        if (!is_pruned[j]) {
            out.retained.push_back(s.source_indices[j]);
        }
    }
    return out;
}

}  // namespace

PruneOutcome adaptive_prune(const MultiScaleScore& s, double tau) {
    check(tau >= 0.0 && tau <= 1.0, "adaptive_prune: tau must be in [0,1], got " +
                                        std::to_string(tau));
    const std::vector<int> order = order_by_score(s);
    double cum = 0.0;
    std::size_t t = 0;
    while (t < order.size() && cum + s.s_m[order[t]] <= tau + kMassSlack) {
        cum += s.s_m[order[t]];
        ++t;
    }
    if (t == order.size() && !order.empty()) {
        std::fprintf(stderr,
                     "warning: adaptive_prune: tau=%.6g prunes all %zu patch tokens; "
                     "only CLS remains\n",
                     tau, order.size());
    }
    return finish(s, order, t, PruneStrategy::adaptive);
}

PruneOutcome fixed_k_prune(const MultiScaleScore& s, int k) {
    check(k >= 0 && static_cast<std::size_t>(k) < s.s_m.size(),
          "fixed_k_prune: k = " + std::to_string(k) + " must be in [0, N = " +
              std::to_string(s.s_m.size()) + ")");
    const std::vector<int> order = order_by_score(s);
    return finish(s, order, static_cast<std::size_t>(k), PruneStrategy::fixed_k);
}

MultiScaleScore cls_attention_scores(const std::vector<DenseMatrix>& head_attention,
                                     const std::vector<int>& source_indices) {
    check(!head_attention.empty(), "cls_attention_scores: no attention maps");
    const int s = head_attention[0].rows();
    check(s >= 2 && head_attention[0].cols() == s, "cls_attention_scores: bad attention shape " +
                                                       shape_str(head_attention[0]));
    const std::size_t n = static_cast<std::size_t>(s) - 1;
    check(source_indices.size() == n, "cls_attention_scores: source index count mismatch");

    MultiScaleScore out;
    out.source_indices = source_indices;
    out.s_m.assign(n, 0.0);
    for (const DenseMatrix& a : head_attention) {
        check(a.rows() == s && a.cols() == s, "cls_attention_scores: inconsistent head shapes");
        for (std::size_t j = 0; j < n; ++j) {
            out.s_m[j] += a(0, static_cast<int>(j) + 1);
        }
    }
    double sum = 0.0;
    for (double v : out.s_m) {
        sum += v;
    }
    check_runtime(sum > 0.0, "cls_attention_scores: CLS row carries no patch mass");
    for (double& v : out.s_m) {
        v /= sum;
    }
    out.per_layer.push_back(out.s_m);
    return out;
}

PruneOutcome no_prune(const std::vector<int>& source_indices) {
    PruneOutcome out;
    out.strategy = PruneStrategy::none;
    out.retained = source_indices;
    return out;
}

PruneOutcome decide_prune(const MultiScaleScore& s, const PruneConfig& cfg) {
    switch (cfg.strategy) {
        case PruneStrategy::none:
            return no_prune(s.source_indices);
        case PruneStrategy::fixed_k:
            return fixed_k_prune(s, cfg.fixed_k);
        case PruneStrategy::adaptive:
        case PruneStrategy::cls_attention:
        case PruneStrategy::penultimate_only: {
            // The latter two change which scores were fused, not the rule.
            PruneOutcome o = adaptive_prune(s, cfg.tau);
            o.strategy = cfg.strategy;
            return o;
        }
    }
    throw std::invalid_argument("decide_prune: bad strategy");
}

std::vector<PruneOutcome> apply_view_policy(const std::vector<const MultiScaleScore*>& views,
                                            const PruneConfig& cfg, bool training) {
    std::vector<PruneOutcome> out;
    if (training) {
        check(views.size() == 2, "apply_view_policy: training mode needs exactly two views, got " +
                                     std::to_string(views.size()));
        out.push_back(decide_prune(*views[0], cfg));
        if (cfg.view_policy == ViewPolicy::multi_view) {
            out.push_back(decide_prune(*views[1], cfg));
        } else {
            out.push_back(no_prune(views[1]->source_indices));
        }
    } else {
        check(views.size() == 1, "apply_view_policy: test mode takes a single view");
        out.push_back(decide_prune(*views[0], cfg));
    }
    return out;
}

std::string prune_outcome_json(const PruneOutcome& o, int indent) {
    nlohmann::json j;
    j["retained"] = o.retained;
    j["pruned"] = o.pruned;
    j["pruned_mass"] = o.pruned_mass;
    j["strategy"] = to_string(o.strategy);
    return j.dump(indent);
}

}  // namespace af
