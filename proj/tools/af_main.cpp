// af: command-line runner for the attention-focusing experiments.
//
// Subcommands: train, eval, ablate, mask, cost. All outputs are plain files
// (JSONL logs, CSV metrics, PGM masks, binary checkpoints) so external
// tooling can consume them directly. Exit codes: 0 success, 2 config error,
// 3 numerical failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "af/config.hpp"
#include "af/metrics.hpp"
#include "af/pipeline.hpp"
#include "af/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

af::ExperimentConfig load_config_with_env(const std::string& path) {
    af::ExperimentConfig cfg = af::load_config_file(path);
    if (const char* seed_env = std::getenv("AF_SEED")) {
        cfg.seed = std::strtoull(seed_env, nullptr, 10);
    }
    return cfg;
}

int env_threads(int fallback) {
    if (const char* t = std::getenv("AF_THREADS")) {
        const int v = std::atoi(t);
        if (v >= 1) {
            return v;
        }
    }
    return fallback;
}

// The mask subcommand takes only a checkpoint; the resolved config written
// at training time sits next to it.
std::string sibling_config(const std::string& ckpt_path) {
    std::string p = ckpt_path;
    const std::string suffix = ".ckpt";
    if (p.size() > suffix.size() && p.substr(p.size() - suffix.size()) == suffix) {
        p = p.substr(0, p.size() - suffix.size());
    }
    return p + ".config.resolved.json";
}

int cmd_train(const std::string& config_path) {
    const af::ExperimentConfig cfg = load_config_with_env(config_path);
    const af::RunArtifacts art = af::run_experiment(cfg);
    if (art.train.nan_abort) {
        return kExitNumerical;
    }
    std::printf("run %s: acc all=%.4f old=%.4f new=%.4f | retained %.2f/%d | precision %.3f\n",
                cfg.run_id.c_str(), art.eval.acc.all, art.eval.acc.old_acc, art.eval.acc.new_acc,
                art.eval.mean_retained, cfg.backbone.num_patches(), art.eval.mean_precision);
    std::printf("checkpoint: %s\nlog: %s\n", art.train.ckpt_path.c_str(),
                art.train.log_path.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_path) {
    const af::ExperimentConfig cfg = load_config_with_env(config_path);
    af::SynthDataset ds = af::generate(cfg.synth);
    af::Model model(cfg);
    af::load_checkpoint(model.store, ckpt_path);
    const af::EvalResult ev = af::evaluate_model(model, ds);

    std::filesystem::create_directories(cfg.out_dir);
    const std::string csv_path = cfg.out_dir + "/" + cfg.run_id + ".acc.csv";
    std::ofstream csv(csv_path, std::ios::binary);
    csv << af::acc_csv_header() << "\n"
        << af::acc_csv_row(cfg.run_id, ev.acc, cfg.seed,
                           cfg.af_enabled ? af::to_string(cfg.prune.strategy) : "baseline",
                           cfg.prune.tau)
        << "\n";

    std::printf("%s\n", af::acc_csv_header().c_str());
    std::printf("%s\n",
                af::acc_csv_row(cfg.run_id, ev.acc, cfg.seed,
                                cfg.af_enabled ? af::to_string(cfg.prune.strategy) : "baseline",
                                cfg.prune.tau)
                    .c_str());
    std::printf("mean retained tokens: %.3f of %d (mean pruned %.3f)\n", ev.mean_retained,
                cfg.backbone.num_patches(), cfg.backbone.num_patches() - ev.mean_retained);
    std::printf("pruning precision vs ground truth: %.4f over %d samples\n", ev.mean_precision,
                ev.n_eval);
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& axis, int seeds) {
    const af::ExperimentConfig base = load_config_with_env(config_path);
    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    const int threads = env_threads(hw > 0 ? hw : 1);
    const std::vector<af::AblationRow> rows = af::run_ablation(base, axis, seeds, threads);

    std::filesystem::create_directories(base.out_dir);
    const std::string csv_path = base.out_dir + "/ablate_" + axis + ".csv";
    std::ofstream csv(csv_path, std::ios::binary);
    csv << "variant,seed,all,old,new,mean_retained,pruning_precision\n";
    for (const af::AblationRow& r : rows) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%llu,%.6f,%.6f,%.6f,%.4f,%.4f", r.variant.c_str(),
                      static_cast<unsigned long long>(r.seed), r.eval.acc.all, r.eval.acc.old_acc,
                      r.eval.acc.new_acc, r.eval.mean_retained, r.eval.mean_precision);
        csv << buf << "\n";
    }

    // Aggregate table on stdout, mean over seeds per variant.
    std::map<std::string, std::vector<const af::AblationRow*>> by_variant;
    std::vector<std::string> variant_order;
    for (const af::AblationRow& r : rows) {
        if (by_variant.find(r.variant) == by_variant.end()) {
            variant_order.push_back(r.variant);
        }
        by_variant[r.variant].push_back(&r);
    }
    std::printf("%-20s %8s %8s %8s %10s %10s\n", "variant", "all", "old", "new", "retained",
                "precision");
    for (const std::string& v : variant_order) {
        double all = 0, old_acc = 0, nw = 0, ret = 0, prec = 0;
        const auto& vr = by_variant[v];
        for (const af::AblationRow* r : vr) {
            all += r->eval.acc.all;
            old_acc += r->eval.acc.old_acc;
            nw += r->eval.acc.new_acc;
            ret += r->eval.mean_retained;
            prec += r->eval.mean_precision;
        }
        const double n = static_cast<double>(vr.size());
        std::printf("%-20s %8.4f %8.4f %8.4f %10.3f %10.4f\n", v.c_str(), all / n, old_acc / n,
                    nw / n, ret / n, prec / n);
    }
    std::printf("rows written to %s\n", csv_path.c_str());
    return kExitOk;
}

int cmd_mask(const std::string& ckpt_path, const std::string& config_path,
             const std::vector<int>& ids, double threshold, const std::string& out_dir_flag) {
    const std::string cfg_path = config_path.empty() ? sibling_config(ckpt_path) : config_path;
    af::ExperimentConfig cfg = af::load_config_file(cfg_path);
    const std::string out_dir = out_dir_flag.empty() ? cfg.out_dir : out_dir_flag;

    af::SynthDataset ds = af::generate(cfg.synth);
    af::Model model(cfg);
    af::load_checkpoint(model.store, ckpt_path);

    std::filesystem::create_directories(out_dir);
    for (int id : ids) {
        af::check(id >= 0 && id < static_cast<int>(ds.samples.size()),
                  "mask: sample id " + std::to_string(id) + " outside dataset of " +
                      std::to_string(ds.samples.size()));
        const af::SynthSample& sample = ds.samples[id];
        af::Graph g(/*record=*/false);
        af::ForwardTrace trace = af::forward_with_taps(g, model.store, model.backbone,
                                                       model.time_modules, sample.image,
                                                       cfg.prune, cfg.af_enabled);

        // Head-averaged CLS row of the final block, over the retained patches.
        const int s = trace.final_seq.length();
        std::vector<double> cls_row(static_cast<std::size_t>(s) - 1, 0.0);
        for (const af::DenseMatrix& a : trace.final_attention) {
            for (int j = 1; j < s; ++j) {
                cls_row[j - 1] += a(0, j);
            }
        }
        for (double& v : cls_row) {
            v /= static_cast<double>(trace.final_attention.size());
        }

        const int gh = cfg.backbone.grid_side();
        af::MaskGrid attn_mask = af::attention_mask(cls_row, trace.final_seq.patch_origin, gh, gh,
                                                    threshold);
        af::MaskGrid tap_mask = af::mask_from_retained(trace.prune.retained, gh, gh);

        char thr_str[32];
        std::snprintf(thr_str, sizeof(thr_str), "%g", threshold);
        const std::string base =
            out_dir + "/" + cfg.run_id + "_" + std::to_string(id) + "_";
        af::write_pgm(attn_mask, base + thr_str + ".pgm");
        af::write_pgm(tap_mask, base + "tap.pgm");
        std::ofstream pj(base + "prune.json");
        pj << af::prune_outcome_json(trace.prune, 2) << "\n";
        std::printf("sample %d: attention mass %.4f in %zu patches; TAP retained %zu/%d\n", id,
                    attn_mask.retained_mass,
                    static_cast<std::size_t>(std::count(attn_mask.bits.begin(),
                                                        attn_mask.bits.end(), 1)),
                    trace.prune.retained.size(), cfg.backbone.num_patches());
    }
    return kExitOk;
}

int cmd_cost(const std::string& config_path) {
    const af::ExperimentConfig cfg = load_config_with_env(config_path);
    const af::CostModel cost;

    auto row = [&](const char* name, const af::VitConfig& vc, int seq_len, bool with_af) {
        const double fl = cost.estimate_flops(vc, seq_len, with_af);
        std::printf("%-34s %10.3f GFLOPs\n", name, fl / 1e9);
    };
    auto prow = [&](const char* name, const af::VitConfig& vc, af::CostModel::Mode mode,
                    bool with_af, int hidden_ratio) {
        const auto pc = cost.count_params(vc, mode, with_af, hidden_ratio, true);
        std::printf("%-34s backbone %12lld  time %12lld  head %10lld  total %12lld\n", name,
                    static_cast<long long>(pc.backbone), static_cast<long long>(pc.time),
                    static_cast<long long>(pc.head), static_cast<long long>(pc.total()));
    };

    std::printf("== FLOPs (convention: %.0f FLOPs per multiply-add) ==\n", cost.flops_per_mac);
    row("this config, baseline", cfg.backbone, cfg.backbone.seq_len(), false);
    row("this config, with AF", cfg.backbone, cfg.backbone.seq_len(), true);
    const af::VitConfig ref224 = af::vit_b16_config(224);
    const af::VitConfig ref112 = af::vit_b16_config(112);
    row("ViT-B/16 @224 (reference)", ref224, ref224.seq_len(), false);
    row("ViT-B/16 @224 + AF", ref224, ref224.seq_len(), true);
    row("ViT-B/16 @112 (reference)", ref112, ref112.seq_len(), false);

    std::printf("\n== Parameters ==\n");
    prow("this config, train, baseline", cfg.backbone, af::CostModel::Mode::train, false,
         cfg.time_hidden_ratio);
    prow("this config, train, with AF", cfg.backbone, af::CostModel::Mode::train, true,
         cfg.time_hidden_ratio);
    prow("this config, test,  with AF", cfg.backbone, af::CostModel::Mode::test, true,
         cfg.time_hidden_ratio);
    prow("ViT-B/16, train, with AF", ref224, af::CostModel::Mode::train, true, 4);
    prow("ViT-B/16, test,  with AF", ref224, af::CostModel::Mode::test, true, 4);

    const auto base_test = cost.count_params(ref224, af::CostModel::Mode::test, false, 4, false);
    const auto af_test = cost.count_params(ref224, af::CostModel::Mode::test, true, 4, false);
    std::printf("\nAF test-time parameter increment (ViT-B/16): %lld = (L-1) x D = %d x %d\n",
                static_cast<long long>(af_test.total() - base_test.total()),
                ref224.num_blocks - 1, ref224.embed_dim);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attention-focusing experiment runner"};
    app.require_subcommand(1);

    std::string config_path;
    std::string ckpt_path;
    std::string axis = "strategy";
    std::string ids_csv;
    std::string mask_out;
    double threshold = 0.7;
    int seeds = 1;

    CLI::App* train = app.add_subcommand("train", "train a model from a config");
    train->add_option("-c,--config", config_path, "experiment config (JSON)")->required();

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
    eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "sweep one axis with shared seeds");
    ablate->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
    ablate->add_option("--axis", axis,
                       "strategy|tau|k|view_policy|query_training|pooling|multiscale")
        ->required();
    ablate->add_option("--seeds", seeds, "paired seeds per variant (default 1)");

    CLI::App* mask = app.add_subcommand("mask", "render attention + TAP masks as PGM");
    mask->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    mask->add_option("-c,--config", config_path,
                     "config (default: resolved config next to the checkpoint)");
    mask->add_option("--ids", ids_csv, "comma-separated sample ids")->required();
    mask->add_option("--threshold", threshold, "attention mass threshold (default 0.7)");
    mask->add_option("--out", mask_out, "output directory (default: config out_dir)");

    CLI::App* cost = app.add_subcommand("cost", "FLOPs / parameter report");
    cost->add_option("-c,--config", config_path, "experiment config (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train->parsed()) {
            return cmd_train(config_path);
        }
        if (eval->parsed()) {
            return cmd_eval(config_path, ckpt_path);
        }
        if (ablate->parsed()) {
            return cmd_ablate(config_path, axis, seeds);
        }
        if (mask->parsed()) {
            std::vector<int> ids;
            std::string cur;
            for (char ch : ids_csv + ",") {
                if (ch == ',') {
                    if (!cur.empty()) {
                        ids.push_back(std::stoi(cur));
                        cur.clear();
                    }
                } else {
                    cur += ch;
                }
            }
            return cmd_mask(ckpt_path, config_path, ids, threshold, mask_out);
        }
        if (cost->parsed()) {
            return cmd_cost(config_path);
        }
    } catch (const af::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
    return kExitOk;
}
