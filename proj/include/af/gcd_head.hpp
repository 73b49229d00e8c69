#pragma once

#include <cstdint>
#include <vector>

#include "af/graph.hpp"
#include "af/params.hpp"

namespace af {

// Loss weights and temperatures. Defaults are the published training
// configuration; epsilon is the one knob the write-up never pins down.
struct GcdHyper {
    double lambda_sim = 0.35;
    double tau_u = 0.07;
    double tau_c = 1.0;
    double tau_s = 0.1;
    double tau_t_start = 0.07;
    double tau_t_end = 0.04;
    int tau_t_warmup_epochs = 30;
    double epsilon = 1.0;     // mean-entropy regularizer weight
    double lambda_aux = 0.05; // weight on the summed TIME losses

    void validate() const;
};

// Teacher temperature: cosine warm-up from tau_t_start to tau_t_end over the
// first tau_t_warmup_epochs epochs, flat afterwards.
double teacher_temperature(const GcdHyper& h, int epoch);

// Projection MLP (3 layers, hidden 2D) plus K unit-normalized prototypes.
struct GcdHead {
    int num_classes;  // K = |Y_u|, known a priori
    int embed_dim;
    int fc1_w, fc1_b, fc2_w, fc2_b, fc3_w, fc3_b;
    int protos;  // K x D

    GcdHead(int embed_dim, int num_classes, ParamStore& store);
};

// Row-normalizes to unit L2 norm; rows with norm below 1e-12 are a
// degenerate-norm error.
Var normalize_rows_checked(Graph& g, Var m, const char* what);

// z = g(h) / ||g(h)||, rows of h handled independently.
Var project_normalize(Graph& g, ParamStore& store, const GcdHead& head, Var h);

// Cross-view InfoNCE: for each i the positive is z'_i and the denominator
// runs over all z'_n in the batch. Mean over the batch. Batch must be >= 2.
Var unsup_contrastive(Graph& g, Var z, Var z_prime, double tau_u);

// Supervised contrastive over the labeled sub-batch: positives are the
// other labeled samples sharing the label (cross-view), the denominator
// excludes only n = i. Samples whose class has no positive are skipped; the
// skip count lands in *skipped when given, otherwise a warning is printed.
Var sup_contrastive(Graph& g, Var z, Var z_prime, const std::vector<int>& labels, double tau_c,
                    int* skipped = nullptr);

// Temperature-scaled cosine softmax against the prototypes. h may hold one
// row per sample.
Var proto_probs(Graph& g, ParamStore& store, const GcdHead& head, Var h, double temperature);

// One training batch: stacked per-sample features for the two views plus
// the labeled mask. labels[i] is the class id for labeled samples, -1
// otherwise.
struct BatchViews {
    Var h1, h2;  // B x D each
    std::vector<int> labels;
    std::vector<std::uint8_t> labeled;

    int batch_size() const { return h1.rows(); }
    std::vector<int> labeled_indices() const;
};

struct ClassifierLossParts {
    Var total;
    Var ce_unsup;
    Var entropy;  // H(p_bar)
    Var ce_sup;
};

// (1 - lambda_sim) * [ mean CE(q', p) - eps * H(p_bar) ] + lambda_sim * mean CE(y, p).
// q' is the other view's prediction at the (sharper) teacher temperature,
// treated as a constant target; p_bar averages predictions of both views.
ClassifierLossParts classifier_loss(Graph& g, ParamStore& store, const GcdHead& head,
                                    const GcdHyper& hyper, const BatchViews& batch, int epoch);

struct TotalLossParts {
    Var total;
    Var l_rep;
    Var l_cls;
    Var aux_sum;  // sum over blocks of the TIME losses (before lambda)
};

// L = L_rep + L_cls + lambda * sum_l L_ce^l. time_losses holds one scalar
// per TIME block (already averaged over the labeled samples).
TotalLossParts total_loss(Graph& g, ParamStore& store, const GcdHead& head, const GcdHyper& hyper,
                          const BatchViews& batch, int epoch, const std::vector<Var>& time_losses,
                          int* sup_skipped = nullptr);

}  // namespace af
