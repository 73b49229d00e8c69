#pragma once

#include <string>
#include <vector>

#include "af/matrix.hpp"

namespace af {

enum class PruneStrategy { adaptive, fixed_k, cls_attention, penultimate_only, none };
enum class ViewPolicy { single_view, multi_view };

std::string to_string(PruneStrategy s);
PruneStrategy prune_strategy_from_string(const std::string& s);
std::string to_string(ViewPolicy v);
ViewPolicy view_policy_from_string(const std::string& s);

// Raw per-block importance scores, CLS at index 0.
struct ScoreVector {
    std::vector<double> values;  // length = current sequence length
    int block_index = 0;
};

// Fused multi-scale importance over the N patch tokens (CLS excluded).
// Sums to 1 up to rounding: it is the mean of L-1 softmaxed layer scores.
struct MultiScaleScore {
    std::vector<double> s_m;
    std::vector<std::vector<double>> per_layer;
    std::vector<int> source_indices;  // original grid position per entry
};

struct PruneOutcome {
    std::vector<int> retained;  // original grid indices, ascending
    std::vector<int> pruned;    // original grid indices, in pruning order
    double pruned_mass = 0.0;
    PruneStrategy strategy = PruneStrategy::none;
};

struct PruneConfig {
    double tau = 0.2;
    PruneStrategy strategy = PruneStrategy::adaptive;
    int fixed_k = 5;
    ViewPolicy view_policy = ViewPolicy::single_view;

    void validate(int num_patches) const;
};

// Drops the CLS entry from each score vector, softmaxes each over the N
// patches, and averages. All vectors must have the same length.
MultiScaleScore fuse_scores(const std::vector<ScoreVector>& scores,
                            const std::vector<int>& source_indices);

// Sorts by ascending importance (ties by ascending original index) and
// prunes the longest prefix whose cumulative mass stays within tau. The
// boundary token that would overshoot is retained. tau = 1 prunes every
// patch token and logs a warning; CLS is never part of either list.
PruneOutcome adaptive_prune(const MultiScaleScore& s, double tau);

// Prunes exactly the k lowest-scoring tokens, same tie-break.
PruneOutcome fixed_k_prune(const MultiScaleScore& s, int k);

// Head-averaged CLS-to-patch attention row, renormalized over the patches;
// pluggable wherever fuse_scores output is used. Attention maps are the
// per-head S x S matrices of the block feeding the pruning stage.
MultiScaleScore cls_attention_scores(const std::vector<DenseMatrix>& head_attention,
                                     const std::vector<int>& source_indices);

PruneOutcome no_prune(const std::vector<int>& source_indices);

// Strategy dispatch for one view's fused scores.
PruneOutcome decide_prune(const MultiScaleScore& s, const PruneConfig& cfg);

// Training mode demands exactly two views: single_view prunes view 0 only,
// multi_view prunes both. Test mode takes the one test view, always pruned.
std::vector<PruneOutcome> apply_view_policy(const std::vector<const MultiScaleScore*>& views,
                                            const PruneConfig& cfg, bool training);

// JSON record used by the CLI's mask renderer.
std::string prune_outcome_json(const PruneOutcome& o, int indent = -1);

}  // namespace af
