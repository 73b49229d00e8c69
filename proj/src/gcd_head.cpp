#include "af/gcd_head.hpp"

#include <cmath>
#include <cstdio>

namespace af {

namespace {
constexpr double kNegInf = -1e9;  // additive mask; exp underflows to exactly 0
constexpr double kPi = 3.14159265358979323846;
}  // namespace

void GcdHyper::validate() const {
    check(tau_u > 0.0 && tau_c > 0.0 && tau_s > 0.0 && tau_t_start > 0.0 && tau_t_end > 0.0,
          "GcdHyper: all temperatures must be strictly positive");
    check(lambda_sim >= 0.0 && lambda_sim <= 1.0, "GcdHyper: lambda_sim must be in [0,1]");
    check(tau_t_warmup_epochs >= 0, "GcdHyper: negative warmup");
}

double teacher_temperature(const GcdHyper& h, int epoch) {
    if (h.tau_t_warmup_epochs == 0 || epoch >= h.tau_t_warmup_epochs) {
        return h.tau_t_end;
    }
    const double t = static_cast<double>(epoch) / h.tau_t_warmup_epochs;
    return h.tau_t_end + (h.tau_t_start - h.tau_t_end) * 0.5 * (1.0 + std::cos(kPi * t));
}

GcdHead::GcdHead(int d, int k, ParamStore& store) : num_classes(k), embed_dim(d) {
    const int h = 2 * d;
    // He-style scales keep ||g(h)|| at order one, which the downstream L2
    // normalization needs to stay well-conditioned.
    const double s1 = std::sqrt(2.0 / d);
    const double s2 = std::sqrt(2.0 / h);
    fc1_w = store.add("head.proj.fc1.w", d, h, ParamStore::Init::trunc_normal, s1);
    fc1_b = store.add("head.proj.fc1.b", 1, h, ParamStore::Init::zeros);
    fc2_w = store.add("head.proj.fc2.w", h, h, ParamStore::Init::trunc_normal, s2);
    fc2_b = store.add("head.proj.fc2.b", 1, h, ParamStore::Init::zeros);
    fc3_w = store.add("head.proj.fc3.w", h, d, ParamStore::Init::trunc_normal, s2);
    fc3_b = store.add("head.proj.fc3.b", 1, d, ParamStore::Init::zeros);
    protos = store.add("head.prototypes", k, d, ParamStore::Init::normal_unit_rows);
}

Var normalize_rows_checked(Graph& g, Var m, const char* what) {
    const int cols = m.cols();  // node storage may move once ops are pushed
    {
        const DenseMatrix& v = m.value();
        for (int i = 0; i < v.rows(); ++i) {
            double norm2 = 0.0;
            for (int j = 0; j < cols; ++j) {
                norm2 += v(i, j) * v(i, j);
            }
            check_runtime(norm2 >= 1e-24, std::string(what) + ": degenerate norm in row " +
                                              std::to_string(i) + " (|x| < 1e-12)");
        }
    }
    Var norms = g.sqrt(g.rows_sum(g.hadamard(m, m)));
    return g.hadamard_div(m, g.broadcast_col(norms, cols));
}

Var project_normalize(Graph& g, ParamStore& store, const GcdHead& head, Var h) {
    const int rows = h.rows();
    auto affine = [&](Var x, int w, int b) {
        return g.add(g.matmul(x, use_param(g, store, w)),
                     g.broadcast_row(use_param(g, store, b), rows));
    };
    Var a1 = g.gelu(affine(h, head.fc1_w, head.fc1_b));
    Var a2 = g.gelu(affine(a1, head.fc2_w, head.fc2_b));
    Var out = affine(a2, head.fc3_w, head.fc3_b);
    return normalize_rows_checked(g, out, "project_normalize");
}

Var unsup_contrastive(Graph& g, Var z, Var z_prime, double tau_u) {
    const int b = z.rows();
    check(b >= 2, "unsup_contrastive: batch must be >= 2 (no negatives otherwise)");
    check(z.value().same_shape(z_prime.value()), "unsup_contrastive: view shape mismatch");
    Var sims = g.scale(g.matmul(z, g.transpose(z_prime)), 1.0 / tau_u);
    Var lse = g.logsumexp_rows(sims);
    Var pos = g.diag(sims);
    return g.mean_all(g.sub(lse, pos));
}

Var sup_contrastive(Graph& g, Var z, Var z_prime, const std::vector<int>& labels, double tau_c,
                    int* skipped) {
    const int m = z.rows();
    check(static_cast<int>(labels.size()) == m, "sup_contrastive: label count mismatch");
    if (m == 0) {
        return g.constant(DenseMatrix(1, 1));  // empty labeled set contributes zero
    }

    // Positive-weight matrix: row i spreads 1/|N_i| over same-label q != i.
    DenseMatrix pos_w(m, m);
    DenseMatrix row_w(m, 1);
    int valid = 0;
    int skip_count = 0;
    for (int i = 0; i < m; ++i) {
        int n_i = 0;
        for (int q = 0; q < m; ++q) {
            if (q != i && labels[q] == labels[i]) {
                ++n_i;
            }
        }
        if (n_i == 0) {
            ++skip_count;
            continue;
        }
        ++valid;
        for (int q = 0; q < m; ++q) {
            if (q != i && labels[q] == labels[i]) {
                pos_w(i, q) = 1.0 / n_i;
            }
        }
        row_w(i, 0) = 1.0;
    }
    if (skip_count > 0) {
        if (skipped != nullptr) {
            *skipped += skip_count;
        } else {
            std::fprintf(stderr,
                         "warning: sup_contrastive: %d of %d labeled samples have no same-label "
                         "positive in the batch; skipped\n",
                         skip_count, m);
        }
    }
    if (valid == 0) {
        return g.constant(DenseMatrix(1, 1));
    }
    for (int i = 0; i < m; ++i) {
        row_w(i, 0) /= valid;
    }

    DenseMatrix diag_mask(m, m);
    for (int i = 0; i < m; ++i) {
        diag_mask(i, i) = kNegInf;  // denominator excludes n = i
    }

    Var sims = g.scale(g.matmul(z, g.transpose(z_prime)), 1.0 / tau_c);
    Var lse = g.logsumexp_rows(g.add(sims, g.constant(std::move(diag_mask))));
    Var pos = g.rows_sum(g.hadamard(g.constant(std::move(pos_w)), sims));
    return g.sum_all(g.hadamard(g.sub(lse, pos), g.constant(std::move(row_w))));
}

Var proto_probs(Graph& g, ParamStore& store, const GcdHead& head, Var h, double temperature) {
    check(temperature > 0.0, "proto_probs: temperature must be positive");
    Var hn = normalize_rows_checked(g, h, "proto_probs(features)");
    Var cn = normalize_rows_checked(g, use_param(g, store, head.protos), "proto_probs(prototypes)");
    return g.softmax_rows(g.scale(g.matmul(hn, g.transpose(cn)), 1.0 / temperature));
}

std::vector<int> BatchViews::labeled_indices() const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        if (labeled[i]) {
            idx.push_back(static_cast<int>(i));
        }
    }
    return idx;
}

ClassifierLossParts classifier_loss(Graph& g, ParamStore& store, const GcdHead& head,
                                    const GcdHyper& hyper, const BatchViews& batch, int epoch) {
    const int b = batch.batch_size();
    const int k = head.num_classes;
    const double tau_t = teacher_temperature(hyper, epoch);

    Var p = proto_probs(g, store, head, batch.h1, hyper.tau_s);
    Var p_other = proto_probs(g, store, head, batch.h2, hyper.tau_s);
    Var q_teacher = g.stop_gradient(proto_probs(g, store, head, batch.h2, tau_t));

    Var ce_unsup = g.scale(g.sum_all(g.hadamard(q_teacher, g.log(p))), -1.0 / b);

    Var p_bar = g.scale(g.add(g.cols_sum(p), g.cols_sum(p_other)), 1.0 / (2.0 * b));
    Var entropy = g.scale(g.sum_all(g.hadamard(p_bar, g.log(p_bar))), -1.0);

    const std::vector<int> lab = batch.labeled_indices();
    Var ce_sup = g.constant(DenseMatrix(1, 1));
    if (!lab.empty()) {
        DenseMatrix onehot(static_cast<int>(lab.size()), k);
        for (std::size_t i = 0; i < lab.size(); ++i) {
            const int y = batch.labels[lab[i]];
            check(y >= 0 && y < k, "classifier_loss: labeled sample with bad label");
            onehot(static_cast<int>(i), y) = 1.0;
        }
        Var pl = g.gather_rows(p, lab);
        ce_sup = g.scale(g.sum_all(g.hadamard(g.constant(std::move(onehot)), g.log(pl))),
                         -1.0 / static_cast<double>(lab.size()));
    }

    Var unsup_part = g.sub(ce_unsup, g.scale(entropy, hyper.epsilon));
    Var total = g.add(g.scale(unsup_part, 1.0 - hyper.lambda_sim), g.scale(ce_sup, hyper.lambda_sim));
    return {total, ce_unsup, entropy, ce_sup};
}

TotalLossParts total_loss(Graph& g, ParamStore& store, const GcdHead& head, const GcdHyper& hyper,
                          const BatchViews& batch, int epoch, const std::vector<Var>& time_losses,
                          int* sup_skipped) {
    Var z1 = project_normalize(g, store, head, batch.h1);
    Var z2 = project_normalize(g, store, head, batch.h2);
    Var l_unsup = unsup_contrastive(g, z1, z2, hyper.tau_u);

    const std::vector<int> lab = batch.labeled_indices();
    Var l_sup = g.constant(DenseMatrix(1, 1));
    if (!lab.empty()) {
        std::vector<int> lab_labels;
        for (int i : lab) {
            lab_labels.push_back(batch.labels[i]);
        }
        l_sup = sup_contrastive(g, g.gather_rows(z1, lab), g.gather_rows(z2, lab), lab_labels,
                                hyper.tau_c, sup_skipped);
    }
    Var l_rep = g.add(g.scale(l_unsup, 1.0 - hyper.lambda_sim), g.scale(l_sup, hyper.lambda_sim));

    ClassifierLossParts cls = classifier_loss(g, store, head, hyper, batch, epoch);

    Var aux_sum = g.constant(DenseMatrix(1, 1));
    for (const Var& t : time_losses) {
        aux_sum = g.add(aux_sum, t);
    }
    Var total = g.add(g.add(l_rep, cls.total), g.scale(aux_sum, hyper.lambda_aux));
    return {total, l_rep, cls.total, aux_sum};
}

}  // namespace af
