#pragma once

#include <optional>
#include <string>
#include <vector>

#include "af/config.hpp"
#include "af/gcd_head.hpp"
#include "af/metrics.hpp"
#include "af/pipeline.hpp"
#include "af/synthdata.hpp"

namespace af {

// A model instance: parameter store plus the layouts over it. Copyable;
// copies share nothing, which the finite-difference harness relies on.
struct Model {
    ExperimentConfig cfg;
    ParamStore store;
    Backbone backbone;
    std::vector<TimeModule> time_modules;
    GcdHead head;

    explicit Model(const ExperimentConfig& cfg);
};

// Forced-routing log for finite-difference probes: a recording pass captures
// every TAP decision in call order, replay passes reuse them so the loss
// stays a smooth function of the parameters (selection is a constant by the
// architecture's own contract).
struct PruneLog {
    std::vector<PruneOutcome> outcomes;
    std::size_t cursor = 0;
    bool replay = false;

    PruneOutcome take(PruneOutcome computed);
};

struct StepLossResult {
    Var total;
    Var l_rep;
    Var l_cls;
    Var aux_sum;                   // sum over blocks before the lambda weight
    std::vector<Var> aux_per_block;
    std::vector<PruneOutcome> view0_outcomes;  // per sample
    int sup_skipped = 0;
};

// Builds the full training loss for one batch on the given graph. Pure
// function of (model, dataset, epoch, batch indices): augmentation draws
// come from streams derived from those, so repeated calls agree bitwise.
StepLossResult build_step_loss(Graph& g, Model& m, const SynthDataset& ds, int epoch,
                               const std::vector<int>& batch_indices, PruneLog* prune_log);

struct EpochLog {
    int epoch = 0;
    double l_rep = 0.0;
    double l_cls = 0.0;
    double l_ce_sum = 0.0;
    double total = 0.0;
    double tau_t = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> epochs;
    bool nan_abort = false;
    std::string ckpt_path;
    std::string log_path;
};

double cosine_lr(double lr0, int epoch, int total_epochs);

// SGD with a per-epoch cosine-decayed learning rate. Writes the JSONL log
// (resolved config first, one line per epoch) and a checkpoint at every
// epoch end; on a non-finite loss it stops immediately, leaving the last
// good checkpoint in place.
TrainResult train_model(Model& m, const SynthDataset& ds);

struct EvalResult {
    AccReport acc;
    double mean_retained = 0.0;   // patch tokens entering the final block
    double mean_precision = 0.0;  // pruning precision vs ground truth masks
    int n_eval = 0;
};

// Prototype-argmax predictions over all unlabeled samples, un-augmented,
// with test-time pruning.
EvalResult evaluate_model(Model& m, const SynthDataset& ds);

struct RunArtifacts {
    TrainResult train;
    EvalResult eval;
};

// generate data -> train -> eval; writes log, checkpoint, resolved config
// and the accuracy CSV under cfg.out_dir.
RunArtifacts run_experiment(const ExperimentConfig& cfg);

struct AblationRow {
    std::string variant;
    std::uint64_t seed = 0;
    EvalResult eval;
};

std::vector<std::string> ablation_axis_variants(const std::string& axis, const ExperimentConfig& base);
ExperimentConfig apply_variant(const ExperimentConfig& base, const std::string& axis,
                               const std::string& variant);

// Runs every variant of the axis over `reps` paired seeds; run r uses
// training seed base.seed + r and dataset seed base.synth.seed + r, shared
// across variants so differences are attributable to the swept axis.
// max_threads > 1 fans runs out across worker threads (each run stays
// single-threaded and deterministic).
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const std::string& axis,
                                      int reps, int max_threads);

}  // namespace af
