#include "af/time_module.hpp"

#include <cmath>

namespace af {

TimeModule::TimeModule(int block, int d, int known, int hidden_ratio, ParamStore& store)
    : block_index(block), embed_dim(d), num_known(known) {
    const std::string p = "time." + std::to_string(block) + ".";
    const int h = hidden_ratio * d;
    query = store.add(p + "query", 1, d, ParamStore::Init::trunc_normal, 0.02);
    ln_g = store.add(p + "ln.g", 1, d, ParamStore::Init::ones);
    ln_b = store.add(p + "ln.b", 1, d, ParamStore::Init::zeros);
    fc1_w = store.add(p + "fc1.w", d, h, ParamStore::Init::trunc_normal, 0.02);
    fc1_b = store.add(p + "fc1.b", 1, h, ParamStore::Init::zeros);
    fc2_w = store.add(p + "fc2.w", h, d, ParamStore::Init::trunc_normal, 0.02);
    fc2_b = store.add(p + "fc2.b", 1, d, ParamStore::Init::zeros);
    cls_w = store.add(p + "cls.w", known, d, ParamStore::Init::trunc_normal, 0.02);
    cls_b = store.add(p + "cls.b", 1, known, ParamStore::Init::zeros);
}

Var TimeModule::measure(Graph& g, ParamStore& store, Var tokens) const {
    Var q = use_param(g, store, query);
    const double inv = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    return g.scale(g.matmul(q, g.transpose(tokens)), inv);
}

Var TimeModule::aggregate(Graph& g, Var scores, Var tokens) {
    check(scores.rows() == 1 && scores.cols() == tokens.rows(),
          "aggregate: score length " + shape_str(scores.value()) +
              " does not match token count " + shape_str(tokens.value()));
    return g.matmul(g.softmax_rows(scores), tokens);
}

Var TimeModule::refine(Graph& g, ParamStore& store, Var r) const {
    Var h = g.layernorm(r, use_param(g, store, ln_g), use_param(g, store, ln_b), kLayerNormEps);
    Var f1 = g.gelu(g.add(g.matmul(h, use_param(g, store, fc1_w)), use_param(g, store, fc1_b)));
    Var f2 = g.add(g.matmul(f1, use_param(g, store, fc2_w)), use_param(g, store, fc2_b));
    return g.add(f2, r);
}

Var TimeModule::classifier_logits(Graph& g, ParamStore& store, Var r_prime) const {
    Var w = use_param(g, store, cls_w);
    Var b = use_param(g, store, cls_b);
    return g.add(g.matmul(r_prime, g.transpose(w)), b);
}

Var TimeModule::auxiliary_loss(Graph& g, ParamStore& store, Var r_prime, int label) const {
    check(label >= 0, "auxiliary_loss: unlabeled sample passed (TIME trains on labeled data only)");
    check(label < num_known, "auxiliary_loss: label " + std::to_string(label) +
                                 " outside known classes [0," + std::to_string(num_known) + ")");
    Var logits = classifier_logits(g, store, r_prime);
    // -log p[label] = logsumexp(logits) - logits[label]
    DenseMatrix onehot(1, num_known);
    onehot(0, label) = 1.0;
    Var picked = g.sum_all(g.hadamard(g.constant(std::move(onehot)), logits));
    return g.sub(g.logsumexp_rows(logits), picked);
}

Var TimeModule::distill_loss(Graph& g, ParamStore& store, Var r_prime_student,
                             Var r_prime_teacher) const {
    Var target = g.stop_gradient(g.softmax_rows(classifier_logits(g, store, r_prime_teacher)));
    Var logits = classifier_logits(g, store, r_prime_student);
    Var log_p = g.sub(logits, g.broadcast_col(g.logsumexp_rows(logits), num_known));
    return g.scale(g.sum_all(g.hadamard(target, log_p)), -1.0);
}

std::vector<TimeModule> make_time_modules(const VitConfig& cfg, int hidden_ratio,
                                          ParamStore& store) {
    std::vector<TimeModule> mods;
    mods.reserve(cfg.num_blocks - 1);
    for (int b = 0; b + 1 < cfg.num_blocks; ++b) {
        mods.emplace_back(b, cfg.embed_dim, cfg.num_known_classes, hidden_ratio, store);
    }
    return mods;
}

}  // namespace af
