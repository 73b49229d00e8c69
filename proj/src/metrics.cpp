#include "af/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace af {

// ---------------------------------------------------------------------------
// assignment / accuracy
// ---------------------------------------------------------------------------

namespace {

// Classic potentials-based O(n^3) solver for the min-cost assignment;
// 1-based internally.
std::vector<int> min_cost_assignment(const DenseMatrix& cost) {
    const int n = cost.rows();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) {
                    continue;
                }
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= n; ++j) {
        if (p[j] != 0) {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    return row_to_col;
}

}  // namespace

std::vector<int> max_weight_assignment(const DenseMatrix& weight) {
    check(weight.rows() == weight.cols(), "max_weight_assignment: matrix must be square, got " +
                                              shape_str(weight));
    DenseMatrix cost(weight.rows(), weight.cols());
    for (int i = 0; i < weight.rows(); ++i) {
        for (int j = 0; j < weight.cols(); ++j) {
            cost(i, j) = -weight(i, j);
        }
    }
    return min_cost_assignment(cost);
}

AccReport hungarian_accuracy(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                             int num_classes, const std::vector<int>& old_class_ids) {
    check(y_true.size() == y_pred.size(), "hungarian_accuracy: label arrays differ in length");
    check(!y_true.empty(), "hungarian_accuracy: empty label arrays");
    DenseMatrix counts(num_classes, num_classes);  // [pred][true]
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        check(y_true[i] >= 0 && y_true[i] < num_classes,
              "hungarian_accuracy: true label " + std::to_string(y_true[i]) + " out of range");
        check(y_pred[i] >= 0 && y_pred[i] < num_classes,
              "hungarian_accuracy: predicted label " + std::to_string(y_pred[i]) + " out of range");
        counts(y_pred[i], y_true[i]) += 1.0;
    }

    AccReport rep;
    rep.permutation = max_weight_assignment(counts);

    std::vector<char> is_old(num_classes, 0);
    for (int c : old_class_ids) {
        check(c >= 0 && c < num_classes, "hungarian_accuracy: old class id out of range");
        is_old[c] = 1;
    }

    int hit_all = 0, hit_old = 0, hit_new = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const bool hit = rep.permutation[y_pred[i]] == y_true[i];
        ++rep.n_all;
        hit_all += hit;
        if (is_old[y_true[i]]) {
            ++rep.n_old;
            hit_old += hit;
        } else {
            ++rep.n_new;
            hit_new += hit;
        }
    }
    rep.all = static_cast<double>(hit_all) / rep.n_all;
    rep.old_acc = rep.n_old > 0 ? static_cast<double>(hit_old) / rep.n_old : 0.0;
    rep.new_acc = rep.n_new > 0 ? static_cast<double>(hit_new) / rep.n_new : 0.0;
    return rep;
}

std::string acc_csv_header() { return "run_id,all,old,new,seed,strategy,tau"; }

std::string acc_csv_row(const std::string& run_id, const AccReport& r, std::uint64_t seed,
                        const std::string& strategy, double tau) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%llu,%s,%.6g", run_id.c_str(), r.all,
                  r.old_acc, r.new_acc, static_cast<unsigned long long>(seed), strategy.c_str(),
                  tau);
    return buf;
}

// ---------------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------------

MaskGrid attention_mask(const std::vector<double>& cls_attention,
                        const std::vector<int>& original_indices, int grid_h, int grid_w,
                        double threshold) {
    check(threshold > 0.0 && threshold <= 1.0,
          "attention_mask: threshold must be in (0,1], got " + std::to_string(threshold));
    check(cls_attention.size() == original_indices.size(),
          "attention_mask: attention/index count mismatch");
    check(!cls_attention.empty(), "attention_mask: no patches");

    double total = 0.0;
    for (double v : cls_attention) {
        check(v >= 0.0, "attention_mask: negative attention value");
        total += v;
    }
    check_runtime(total > 0.0, "attention_mask: zero total mass");

    std::vector<int> order(cls_attention.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (cls_attention[a] != cls_attention[b]) {
            return cls_attention[a] > cls_attention[b];
        }
        return original_indices[a] < original_indices[b];
    });

    MaskGrid m;
    m.h = grid_h;
    m.w = grid_w;
    m.bits.assign(static_cast<std::size_t>(grid_h) * grid_w, 0);
    m.threshold = threshold;
    double cum = 0.0;
    for (int idx : order) {
        cum += cls_attention[idx] / total;
        m.bits[original_indices[idx]] = 1;
        if (cum >= threshold - 1e-12) {
            break;
        }
    }
    m.retained_mass = cum;
    return m;
}

MaskGrid mask_from_retained(const std::vector<int>& retained, int grid_h, int grid_w) {
    MaskGrid m;
    m.h = grid_h;
    m.w = grid_w;
    m.bits.assign(static_cast<std::size_t>(grid_h) * grid_w, 0);
    m.threshold = 0.0;
    for (int idx : retained) {
        m.bits[idx] = 1;
    }
    m.retained_mass = retained.empty() ? 0.0 : 1.0;
    return m;
}

std::string mask_to_pgm(const MaskGrid& m) {
    std::string out = "P2\n" + std::to_string(m.w) + " " + std::to_string(m.h) + "\n1\n";
    for (int r = 0; r < m.h; ++r) {
        for (int c = 0; c < m.w; ++c) {
            out += m.at(r, c) ? '1' : '0';
            out += (c + 1 < m.w) ? ' ' : '\n';
        }
    }
    return out;
}

void write_pgm(const MaskGrid& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    check_runtime(out.good(), "write_pgm: cannot open '" + path + "'");
    const std::string s = mask_to_pgm(m);
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
    check_runtime(out.good(), "write_pgm: write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// cost model
// ---------------------------------------------------------------------------

double CostModel::estimate_flops(const VitConfig& cfg, int seq_len, bool with_af) const {
    check(seq_len >= 2, "estimate_flops: sequence length must be >= 2");
    const double s = seq_len;
    const double n = seq_len - 1;
    const double d = cfg.embed_dim;
    const double h = cfg.mlp_ratio * d;

    double macs = n * cfg.patch_dim() * d;  // patch embedding
    double per_block = 0.0;
    per_block += 3.0 * s * d * d;  // QKV projections
    per_block += 2.0 * s * s * d;  // attention scores + weighted values
    per_block += s * d * d;        // output projection
    per_block += 2.0 * s * d * h;  // FFN
    macs += cfg.num_blocks * per_block;

    if (with_af) {
        macs += (cfg.num_blocks - 1) * s * d;  // one query scoring per tapped block
    }
    return macs * flops_per_mac;
}

CostModel::ParamCounts CostModel::count_params(const VitConfig& cfg, Mode mode, bool with_af,
                                               int time_hidden_ratio, bool include_head) const {
    ParamCounts pc;
    const std::int64_t d = cfg.embed_dim;
    const std::int64_t h = static_cast<std::int64_t>(cfg.mlp_ratio * d);
    const std::int64_t n = cfg.num_patches();
    const std::int64_t yl = cfg.num_known_classes;

    pc.backbone += cfg.patch_dim() * d + d;  // patch embed + bias
    pc.backbone += n * d;                    // positional embeddings
    pc.backbone += d;                        // CLS
    std::int64_t per_block = 0;
    per_block += d * 3 * d + 3 * d;  // qkv
    per_block += d * d + d;          // proj
    per_block += 4 * d;              // two layernorms
    per_block += d * h + h + h * d + d;
    pc.backbone += cfg.num_blocks * per_block;

    if (with_af) {
        const std::int64_t blocks = cfg.num_blocks - 1;
        if (mode == Mode::test) {
            pc.time = blocks * d;  // only the query survives at test time
        } else {
            const std::int64_t ht = static_cast<std::int64_t>(time_hidden_ratio) * d;
            std::int64_t per_time = d;               // query
            per_time += 2 * d;                       // layernorm
            per_time += d * ht + ht + ht * d + d;    // refine MLP
            per_time += yl * d + yl;                 // auxiliary classifier
            pc.time = blocks * per_time;
        }
    }

    if (include_head) {
        const std::int64_t hh = 2 * d;
        pc.head += d * hh + hh + hh * hh + hh + hh * d + d;       // projection MLP
        pc.head += static_cast<std::int64_t>(cfg.num_total_classes) * d;  // prototypes
    }
    return pc;
}

}  // namespace af
