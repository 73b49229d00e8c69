#include "af/pipeline.hpp"

#include <algorithm>

namespace af {

PrefixTrace run_prefix(Graph& g, ParamStore& store, const Backbone& bb,
                       const std::vector<TimeModule>& time_modules, const Image& img,
                       bool with_time) {
    if (with_time) {
        check(static_cast<int>(time_modules.size()) == bb.cfg.num_blocks - 1,
              "run_prefix: expected " + std::to_string(bb.cfg.num_blocks - 1) +
                  " TIME modules, got " + std::to_string(time_modules.size()));
    }
    PrefixTrace out;
    TokenSequence seq = bb.patchify(g, store, img);
    for (int b = 0; b + 1 < bb.cfg.num_blocks; ++b) {
        Backbone::BlockResult res = bb.run_block(g, store, seq, b);
        seq = res.seq;
        out.attention.push_back(std::move(res.attention));
        out.states.push_back(seq);
        if (with_time) {
            Var stopped = g.stop_gradient(seq.tokens);
            out.stopped_tokens.push_back(stopped);
            out.scores.push_back(time_modules[b].measure(g, store, stopped));
        }
    }
    return out;
}

MultiScaleScore fuse_for_strategy(const PrefixTrace& prefix, PruneStrategy strategy,
                                  const std::vector<int>& source_indices) {
    if (strategy == PruneStrategy::cls_attention) {
        check(!prefix.attention.empty(), "fuse_for_strategy: no attention maps recorded");
        return cls_attention_scores(prefix.attention.back(), source_indices);
    }
    check(!prefix.scores.empty(), "fuse_for_strategy: no TIME scores recorded");
    std::vector<ScoreVector> rows;
    if (strategy == PruneStrategy::penultimate_only) {
        const Var& s = prefix.scores.back();
        ScoreVector sv;
        sv.block_index = static_cast<int>(prefix.scores.size()) - 1;
        sv.values.assign(s.value().row(0), s.value().row(0) + s.cols());
        rows.push_back(std::move(sv));
    } else {
        for (std::size_t l = 0; l < prefix.scores.size(); ++l) {
            const Var& s = prefix.scores[l];
            ScoreVector sv;
            sv.block_index = static_cast<int>(l);
            sv.values.assign(s.value().row(0), s.value().row(0) + s.cols());
            rows.push_back(std::move(sv));
        }
    }
    return fuse_scores(rows, source_indices);
}

FinishResult finish_forward(Graph& g, ParamStore& store, const Backbone& bb,
                            const TokenSequence& last_state, const PruneOutcome& outcome) {
    // Map retained original indices back to rows of the current sequence.
    std::vector<int> row_of_origin(bb.cfg.num_patches(), -1);
    for (std::size_t j = 0; j < last_state.patch_origin.size(); ++j) {
        row_of_origin[last_state.patch_origin[j]] = static_cast<int>(j) + 1;
    }
    std::vector<int> rows = {0};  // CLS is unconditionally kept
    for (int orig : outcome.retained) {
        check(row_of_origin[orig] > 0,
              "finish_forward: retained index " + std::to_string(orig) + " not in sequence");
        rows.push_back(row_of_origin[orig]);
    }

    TokenSequence pruned = last_state;
    pruned.tokens = g.gather_rows(last_state.tokens, rows);
    pruned.patch_origin = outcome.retained;

    Backbone::BlockResult res = bb.run_block(g, store, pruned, bb.cfg.num_blocks - 1);
    return {res.seq, std::move(res.attention)};
}

ForwardTrace forward_with_taps(Graph& g, ParamStore& store, const Backbone& bb,
                               const std::vector<TimeModule>& time_modules, const Image& img,
                               const PruneConfig& prune, bool af_enabled) {
    ForwardTrace out;
    out.prefix = run_prefix(g, store, bb, time_modules, img, af_enabled);
    const std::vector<int>& src = out.prefix.states.back().patch_origin;
    if (af_enabled && prune.strategy != PruneStrategy::none) {
        out.fused = fuse_for_strategy(out.prefix, prune.strategy, src);
        const MultiScaleScore* views[] = {&out.fused};
        out.prune = apply_view_policy({views, views + 1}, prune, /*training=*/false)[0];
    } else {
        out.prune = no_prune(src);
    }
    FinishResult fin = finish_forward(g, store, bb, out.prefix.states.back(), out.prune);
    out.final_seq = std::move(fin.final_seq);
    out.final_attention = std::move(fin.final_attention);
    return out;
}

}  // namespace af
