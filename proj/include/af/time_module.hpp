#pragma once

#include "af/backbone.hpp"
#include "af/graph.hpp"
#include "af/params.hpp"

namespace af {

// Per-block token importance scorer: a learnable query rates every token,
// a softmax-weighted aggregate feeds a small FFN, and an auxiliary
// classifier over the known classes supervises the whole thing on labeled
// data only. At evaluation time only the query is consulted.
//
// Token states must reach these ops through a stop-gradient barrier; the
// pipeline applies it, so none of the auxiliary losses leak gradient into
// the backbone.
struct TimeModule {
    int block_index;  // 0-based block whose output this module scores
    int embed_dim;
    int num_known;
    int query;                          // 1 x D
    int ln_g, ln_b;                     // refine LayerNorm
    int fc1_w, fc1_b, fc2_w, fc2_b;     // refine MLP, hidden = hidden_ratio * D
    int cls_w, cls_b;                   // |Y_l| x D classifier (plus bias row)

    TimeModule(int block_index, int embed_dim, int num_known, int hidden_ratio,
               ParamStore& store);

    // s = Q K^T / sqrt(D), one scalar per token including CLS. 1 x S.
    Var measure(Graph& g, ParamStore& store, Var tokens) const;

    // r = Softmax(s) V over the full sequence. 1 x D.
    static Var aggregate(Graph& g, Var scores, Var tokens);

    // r' = MLP(LayerNorm(r)) + r.
    Var refine(Graph& g, ParamStore& store, Var r) const;

    Var classifier_logits(Graph& g, ParamStore& store, Var r_prime) const;

    // Cross-entropy of the auxiliary classifier against a known-class label.
    // Calling this for an unlabeled sample (label < 0) is a contract error.
    Var auxiliary_loss(Graph& g, ParamStore& store, Var r_prime, int label) const;

    // Self-distillation variant used by the query-training-on-everything
    // ablation: the other view's classifier distribution (held constant)
    // is the target.
    Var distill_loss(Graph& g, ParamStore& store, Var r_prime_student,
                     Var r_prime_teacher) const;
};

std::vector<TimeModule> make_time_modules(const VitConfig& cfg, int hidden_ratio,
                                          ParamStore& store);

}  // namespace af
