#pragma once

#include <vector>

#include "af/backbone.hpp"
#include "af/tap.hpp"
#include "af/time_module.hpp"

namespace af {

// Everything produced by the blocks ahead of the pruning stage. Token
// states are exposed per block so the scorers can tap each one; the stopped
// copies are the ones the TIME branches read (stop-gradient barrier).
struct PrefixTrace {
    std::vector<TokenSequence> states;                 // outputs of blocks 0..L-2
    std::vector<Var> scores;                           // per TIME block, 1 x S
    std::vector<Var> stopped_tokens;                   // inputs to the TIME branches
    std::vector<std::vector<DenseMatrix>> attention;   // per block, per head
};

// Runs patchify plus blocks 0..L-2 on the full sequence, scoring after each
// block when with_time is set. Exactly L-1 TIME modules are required.
PrefixTrace run_prefix(Graph& g, ParamStore& store, const Backbone& bb,
                       const std::vector<TimeModule>& time_modules, const Image& img,
                       bool with_time);

// Builds the fused importance for the pruning rule. adaptive/fixed_k/none
// fuse every block's scores; penultimate_only keeps only the last;
// cls_attention ignores the scores and uses the last block's CLS row.
MultiScaleScore fuse_for_strategy(const PrefixTrace& prefix, PruneStrategy strategy,
                                  const std::vector<int>& source_indices);

struct FinishResult {
    TokenSequence final_seq;                  // output of the last block
    std::vector<DenseMatrix> final_attention; // per head, over the retained sequence
};

// Gathers CLS plus the retained tokens and runs the final block.
FinishResult finish_forward(Graph& g, ParamStore& store, const Backbone& bb,
                            const TokenSequence& last_state, const PruneOutcome& outcome);

struct ForwardTrace {
    PrefixTrace prefix;
    MultiScaleScore fused;      // empty when pruning is off
    PruneOutcome prune;
    TokenSequence final_seq;
    std::vector<DenseMatrix> final_attention;
};

// Single-sequence forward: prefix, one TAP decision (a test view is always
// pruned under its strategy), final block. With af disabled this is a plain
// L-block ViT forward.
ForwardTrace forward_with_taps(Graph& g, ParamStore& store, const Backbone& bb,
                               const std::vector<TimeModule>& time_modules, const Image& img,
                               const PruneConfig& prune, bool af_enabled);

}  // namespace af
