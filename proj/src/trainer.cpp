#include "af/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

namespace af {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

Model::Model(const ExperimentConfig& config)
    : cfg(config),
      store(derive_seed(config.seed, "params")),
      backbone((config.validate(), config.backbone), store),
      time_modules(make_time_modules(config.backbone, config.time_hidden_ratio, store)),
      head(config.backbone.embed_dim, config.backbone.num_total_classes, store) {
    backbone.apply_freeze_mask(store, cfg.freeze_earlier_blocks);
}

PruneOutcome PruneLog::take(PruneOutcome computed) {
    if (replay) {
        check_runtime(cursor < outcomes.size(), "PruneLog: replay exhausted");
        return outcomes[cursor++];
    }
    outcomes.push_back(computed);
    return computed;
}

StepLossResult build_step_loss(Graph& g, Model& m, const SynthDataset& ds, int epoch,
                               const std::vector<int>& batch_indices, PruneLog* prune_log) {
    const ExperimentConfig& cfg = m.cfg;
    const int batch = static_cast<int>(batch_indices.size());
    check(batch >= 2, "build_step_loss: batch must be >= 2");
    const int num_time = static_cast<int>(m.time_modules.size());

    std::vector<Var> h1_rows, h2_rows;
    std::vector<int> labels(batch, -1);
    std::vector<std::uint8_t> labeled(batch, 0);
    StepLossResult out;

    // Auxiliary loss accumulators per TIME block.
    std::vector<Var> aux_acc(num_time, g.constant(DenseMatrix(1, 1)));
    int aux_contribs = 0;

    for (int bi = 0; bi < batch; ++bi) {
        const int idx = batch_indices[bi];
        const SynthSample& sample = ds.samples[idx];
        labels[bi] = sample.labeled ? sample.label : -1;
        labeled[bi] = sample.labeled ? 1 : 0;

        PrefixTrace prefix[2];
        for (int v = 0; v < 2; ++v) {
            RandomSource rng(derive_seed(cfg.seed, "aug",
                                         (static_cast<std::uint64_t>(epoch) << 32) |
                                             static_cast<std::uint64_t>(idx),
                                         static_cast<std::uint64_t>(v)));
            Image view = augment(sample, v, ds.spec, rng);
            prefix[v] = run_prefix(g, m.store, m.backbone, m.time_modules, view, cfg.af_enabled);
        }

        // TAP decisions for the pair of views.
        std::vector<PruneOutcome> outs;
        const std::vector<int>& src = prefix[0].states.back().patch_origin;
        if (cfg.af_enabled && cfg.prune.strategy != PruneStrategy::none) {
            MultiScaleScore fused0 = fuse_for_strategy(prefix[0], cfg.prune.strategy, src);
            MultiScaleScore fused1 = fuse_for_strategy(prefix[1], cfg.prune.strategy, src);
            const MultiScaleScore* views[] = {&fused0, &fused1};
            outs = apply_view_policy({views, views + 2}, cfg.prune, /*training=*/true);
        } else {
            outs = {no_prune(src), no_prune(src)};
        }
        if (prune_log != nullptr) {
            outs[0] = prune_log->take(outs[0]);
            outs[1] = prune_log->take(outs[1]);
        }
        out.view0_outcomes.push_back(outs[0]);

        for (int v = 0; v < 2; ++v) {
            FinishResult fin =
                finish_forward(g, m.store, m.backbone, prefix[v].states.back(), outs[v]);
            Var h = Backbone::pool_output(g, fin.final_seq, cfg.pooling);
            (v == 0 ? h1_rows : h2_rows).push_back(h);
        }

        // TIME auxiliary branch: labeled samples always; unlabeled only in
        // the query-training-on-everything ablation, via self-distillation.
        if (cfg.af_enabled) {
            const bool use_labels = sample.labeled;
            const bool use_distill = !sample.labeled && cfg.query_training == QueryTraining::all;
            if (use_labels || use_distill) {
                std::vector<Var> refined[2];
                for (int v = 0; v < 2; ++v) {
                    for (int l = 0; l < num_time; ++l) {
                        Var r = TimeModule::aggregate(g, prefix[v].scores[l],
                                                      prefix[v].stopped_tokens[l]);
                        refined[v].push_back(m.time_modules[l].refine(g, m.store, r));
                    }
                }
                for (int l = 0; l < num_time; ++l) {
                    if (use_labels) {
                        Var a = m.time_modules[l].auxiliary_loss(g, m.store, refined[0][l],
                                                                 sample.label);
                        Var b = m.time_modules[l].auxiliary_loss(g, m.store, refined[1][l],
                                                                 sample.label);
                        aux_acc[l] = g.add(aux_acc[l], g.add(a, b));
                    } else {
                        Var a = m.time_modules[l].distill_loss(g, m.store, refined[0][l],
                                                               refined[1][l]);
                        Var b = m.time_modules[l].distill_loss(g, m.store, refined[1][l],
                                                               refined[0][l]);
                        aux_acc[l] = g.add(aux_acc[l], g.add(a, b));
                    }
                }
                aux_contribs += 2;  // both views
            }
        }
    }

    BatchViews views;
    views.h1 = g.concat_rows(h1_rows);
    views.h2 = g.concat_rows(h2_rows);
    views.labels = std::move(labels);
    views.labeled = std::move(labeled);

    std::vector<Var> aux_means;
    if (aux_contribs > 0) {
        for (int l = 0; l < num_time; ++l) {
            aux_means.push_back(g.scale(aux_acc[l], 1.0 / aux_contribs));
        }
    }
    out.aux_per_block = aux_means;

    TotalLossParts parts = total_loss(g, m.store, m.head, cfg.head, views, epoch, aux_means,
                                      &out.sup_skipped);
    out.total = parts.total;
    out.l_rep = parts.l_rep;
    out.l_cls = parts.l_cls;
    out.aux_sum = parts.aux_sum;
    return out;
}

double cosine_lr(double lr0, int epoch, int total_epochs) {
    return lr0 * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(epoch) / total_epochs));
}

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string epoch_log_line(const EpochLog& e) {
    // Hand-formatted so the log is a stable bitwise artifact.
    std::string s = "{\"epoch\":" + std::to_string(e.epoch);
    s += ",\"l_rep\":" + format_double(e.l_rep);
    s += ",\"l_cls\":" + format_double(e.l_cls);
    s += ",\"l_ce_sum\":" + format_double(e.l_ce_sum);
    s += ",\"total\":" + format_double(e.total);
    s += ",\"tau_t\":" + format_double(e.tau_t);
    s += ",\"lr\":" + format_double(e.lr);
    s += "}";
    return s;
}

}  // namespace

TrainResult train_model(Model& m, const SynthDataset& ds) {
    const ExperimentConfig& cfg = m.cfg;
    std::filesystem::create_directories(cfg.out_dir);
    TrainResult res;
    res.log_path = cfg.out_dir + "/" + cfg.run_id + ".log.jsonl";
    res.ckpt_path = cfg.out_dir + "/" + cfg.run_id + ".ckpt";

    std::ofstream log(res.log_path, std::ios::binary);
    check_runtime(log.good(), "train: cannot open log '" + res.log_path + "'");
    log << "{\"config\":" << config_to_json(cfg).dump() << "}\n";

    std::vector<int> order(ds.samples.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
        const double lr = cosine_lr(cfg.optim.lr, epoch, cfg.optim.epochs);
        RandomSource shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch));
        shuffle_rng.shuffle(order);

        EpochLog elog;
        elog.epoch = epoch;
        elog.tau_t = teacher_temperature(cfg.head, epoch);
        elog.lr = lr;
        int steps = 0;
        int skipped_sup = 0;

        for (std::size_t at = 0; at < order.size(); at += cfg.optim.batch) {
            std::vector<int> batch(order.begin() + at,
                                   order.begin() + std::min(order.size(),
                                                            at + cfg.optim.batch));
            if (batch.size() < 2) {
                break;  // a singleton tail has no contrastive negatives
            }
            Graph g;
            double total = 0.0;
            StepLossResult step;
            try {
                step = build_step_loss(g, m, ds, epoch, batch, nullptr);
                total = step.total.scalar();
            } catch (const std::runtime_error& e) {
                // Degenerate norms and friends: numerical failure, same
                // contract as a NaN loss.
                std::fprintf(stderr, "error: %s (epoch %d); aborting, last good checkpoint kept\n",
                             e.what(), epoch);
                res.nan_abort = true;
                return res;
            }
            skipped_sup += step.sup_skipped;
            if (!std::isfinite(total)) {
                std::fprintf(stderr, "error: non-finite loss at epoch %d; aborting "
                                     "(last good checkpoint kept)\n", epoch);
                res.nan_abort = true;
                return res;
            }

            m.store.zero_grads();
            g.backward(step.total);
            for (Tensor& t : m.store.tensors()) {
                if (!t.trainable) {
                    t.grad.zero();  // freeze mask
                }
            }
            if (!m.store.sgd_step(lr)) {
                std::fprintf(stderr, "error: non-finite parameter update at epoch %d; aborting\n",
                             epoch);
                res.nan_abort = true;
                return res;
            }

            elog.l_rep += step.l_rep.scalar();
            elog.l_cls += step.l_cls.scalar();
            elog.l_ce_sum += step.aux_sum.scalar();
            elog.total += total;
            ++steps;
        }

        elog.l_rep /= steps;
        elog.l_cls /= steps;
        elog.l_ce_sum /= steps;
        elog.total /= steps;
        res.epochs.push_back(elog);
        log << epoch_log_line(elog) << "\n";
        if (skipped_sup > 0) {
            std::fprintf(stderr,
                         "warning: epoch %d: %d labeled samples had no same-label positive in "
                         "their batch (skipped in sup_contrastive)\n",
                         epoch, skipped_sup);
        }
        save_checkpoint(m.store, res.ckpt_path);
    }
    return res;
}

EvalResult evaluate_model(Model& m, const SynthDataset& ds) {
    const ExperimentConfig& cfg = m.cfg;
    const std::vector<int> eval_idx = ds.unlabeled_indices();
    EvalResult res;
    res.n_eval = static_cast<int>(eval_idx.size());

    std::vector<int> y_true, y_pred;
    double retained_sum = 0.0;
    double precision_sum = 0.0;

    for (int idx : eval_idx) {
        const SynthSample& sample = ds.samples[idx];
        Graph g(/*record=*/false);
        ForwardTrace trace = forward_with_taps(g, m.store, m.backbone, m.time_modules,
                                               sample.image, cfg.prune, cfg.af_enabled);
        Var h = Backbone::pool_output(g, trace.final_seq, cfg.pooling);
        Var probs = proto_probs(g, m.store, m.head, h, cfg.head.tau_s);
        const DenseMatrix& p = probs.value();
        int best = 0;
        for (int k = 1; k < p.cols(); ++k) {
            if (p(0, k) > p(0, best)) {
                best = k;
            }
        }
        y_pred.push_back(best);
        y_true.push_back(sample.label);
        retained_sum += static_cast<double>(trace.prune.retained.size());
        precision_sum += pruning_precision(trace.prune, sample.object_mask);
    }

    res.acc = hungarian_accuracy(y_true, y_pred, cfg.backbone.num_total_classes,
                                 ds.old_class_ids());
    res.mean_retained = retained_sum / res.n_eval;
    res.mean_precision = precision_sum / res.n_eval;
    return res;
}

RunArtifacts run_experiment(const ExperimentConfig& cfg) {
    SynthDataset ds = generate(cfg.synth);
    Model model(cfg);
    RunArtifacts out;
    out.train = train_model(model, ds);
    if (out.train.nan_abort) {
        return out;
    }
    out.eval = evaluate_model(model, ds);

    std::filesystem::create_directories(cfg.out_dir);
    {
        std::ofstream cfg_out(cfg.out_dir + "/" + cfg.run_id + ".config.resolved.json");
        cfg_out << config_to_json(cfg).dump(2) << "\n";
    }
    {
        std::ofstream csv(cfg.out_dir + "/" + cfg.run_id + ".acc.csv", std::ios::binary);
        csv << acc_csv_header() << "\n"
            << acc_csv_row(cfg.run_id, out.eval.acc, cfg.seed,
                           cfg.af_enabled ? to_string(cfg.prune.strategy) : "baseline",
                           cfg.prune.tau)
            << "\n";
    }
    {
        std::ofstream stats(cfg.out_dir + "/" + cfg.run_id + ".prune_stats.json");
        nlohmann::json j;
        j["mean_retained"] = out.eval.mean_retained;
        j["mean_pruned"] = cfg.backbone.num_patches() - out.eval.mean_retained;
        j["pruning_precision"] = out.eval.mean_precision;
        j["n_eval"] = out.eval.n_eval;
        stats << j.dump(2) << "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// ablation sweeps
// ---------------------------------------------------------------------------

std::vector<std::string> ablation_axis_variants(const std::string& axis,
                                                const ExperimentConfig& base) {
    if (axis == "strategy") {
        return {"adaptive", "fixed_k", "cls_attention", "penultimate_only", "none"};
    }
    if (axis == "tau") {
        return {"0.01", "0.05", "0.1", "0.2"};
    }
    if (axis == "k") {
        // The published sweep {16, 64, 128} at N = 196, rescaled to this
        // config's patch count.
        const double ratio = base.backbone.num_patches() / 196.0;
        std::vector<std::string> out;
        for (int k : {16, 64, 128}) {
            const int scaled = std::max(1, static_cast<int>(std::lround(k * ratio)));
            if (scaled < base.backbone.num_patches()) {
                out.push_back(std::to_string(scaled));
            }
        }
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }
    if (axis == "view_policy") {
        return {"single_view", "multi_view"};
    }
    if (axis == "query_training") {
        return {"labeled_only", "all"};
    }
    if (axis == "pooling") {
        return {"mean", "cls_only"};
    }
    if (axis == "multiscale") {
        return {"multi_scale", "penultimate_only"};
    }
    throw ConfigError("unknown ablation axis '" + axis +
                      "' (expected strategy|tau|k|view_policy|query_training|pooling|multiscale)");
}

ExperimentConfig apply_variant(const ExperimentConfig& base, const std::string& axis,
                               const std::string& variant) {
    ExperimentConfig cfg = base;
    if (axis == "strategy") {
        cfg.prune.strategy = prune_strategy_from_string(variant);
    } else if (axis == "tau") {
        cfg.prune.tau = std::stod(variant);
    } else if (axis == "k") {
        cfg.prune.strategy = PruneStrategy::fixed_k;
        cfg.prune.fixed_k = std::stoi(variant);
    } else if (axis == "view_policy") {
        cfg.prune.view_policy = view_policy_from_string(variant);
    } else if (axis == "query_training") {
        cfg.query_training = query_training_from_string(variant);
    } else if (axis == "pooling") {
        cfg.pooling = pool_mode_from_string(variant);
    } else if (axis == "multiscale") {
        cfg.prune.strategy = variant == "multi_scale" ? PruneStrategy::adaptive
                                                      : PruneStrategy::penultimate_only;
    } else {
        throw ConfigError("unknown ablation axis '" + axis + "'");
    }
    cfg.run_id = base.run_id + "_" + axis + "_" + variant;
    return cfg;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const std::string& axis,
                                      int reps, int max_threads) {
    const std::vector<std::string> variants = ablation_axis_variants(axis, base);
    struct Job {
        std::string variant;
        std::uint64_t seed;
        ExperimentConfig cfg;
    };
    std::vector<Job> jobs;
    for (const std::string& v : variants) {
        for (int r = 0; r < reps; ++r) {
            ExperimentConfig cfg = apply_variant(base, axis, v);
            cfg.seed = base.seed + static_cast<std::uint64_t>(r);
            cfg.synth.seed = base.synth.seed + static_cast<std::uint64_t>(r);
            cfg.run_id += "_s" + std::to_string(r);
            jobs.push_back({v, cfg.seed, std::move(cfg)});
        }
    }

    std::vector<AblationRow> rows(jobs.size());
    std::atomic<std::size_t> next{0};
    const int workers = std::max(1, std::min<int>(max_threads, static_cast<int>(jobs.size())));
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) {
                return;
            }
            RunArtifacts art = run_experiment(jobs[i].cfg);
            rows[i] = {jobs[i].variant, jobs[i].seed, art.eval};
        }
    };
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back(worker);
        }
        for (std::thread& t : pool) {
            t.join();
        }
    }
    return rows;
}

}  // namespace af
