#include "af/config.hpp"

#include <fstream>

namespace af {

std::string to_string(QueryTraining q) {
    return q == QueryTraining::labeled_only ? "labeled_only" : "all";
}

QueryTraining query_training_from_string(const std::string& s) {
    if (s == "labeled_only") return QueryTraining::labeled_only;
    if (s == "all") return QueryTraining::all;
    throw ConfigError("unknown query_training '" + s + "'");
}

std::string to_string(PoolMode m) { return m == PoolMode::mean ? "mean" : "cls_only"; }

PoolMode pool_mode_from_string(const std::string& s) {
    if (s == "mean") return PoolMode::mean;
    if (s == "cls_only") return PoolMode::cls_only;
    throw ConfigError("unknown pooling '" + s + "'");
}

void ExperimentConfig::validate() const {
    backbone.validate();
    head.validate();
    synth.validate();
    prune.validate(backbone.num_patches());
    if (backbone.image_side != synth.image_side() || backbone.patch_side != synth.patch_side ||
        backbone.channels != synth.channels) {
        throw ConfigError("backbone geometry (" + std::to_string(backbone.image_side) + "px/" +
                          std::to_string(backbone.patch_side) + "px patches) does not match the "
                          "synthetic data (" + std::to_string(synth.image_side()) + "px/" +
                          std::to_string(synth.patch_side) + "px patches)");
    }
    if (backbone.num_total_classes != synth.num_classes ||
        backbone.num_known_classes != synth.num_known) {
        throw ConfigError("class counts disagree between backbone and synth sections");
    }
    if (optim.epochs < 1 || optim.batch < 2) {
        throw ConfigError("optim: need epochs >= 1 and batch >= 2");
    }
    if (optim.lr <= 0.0) {
        throw ConfigError("optim: learning rate must be positive");
    }
    if (time_hidden_ratio < 1) {
        throw ConfigError("time_hidden_ratio must be >= 1");
    }
}

namespace {

void parse_backbone(const nlohmann::json& j, const std::string& path, VitConfig& c) {
    StrictJson sj(j, path);
    sj.get("image_side", c.image_side);
    sj.get("patch_side", c.patch_side);
    sj.get("channels", c.channels);
    sj.get("embed_dim", c.embed_dim);
    sj.get("num_blocks", c.num_blocks);
    sj.get("num_heads", c.num_heads);
    sj.get("mlp_ratio", c.mlp_ratio);
    sj.get("num_known_classes", c.num_known_classes);
    sj.get("num_total_classes", c.num_total_classes);
    sj.finish();
}

void parse_prune(const nlohmann::json& j, const std::string& path, PruneConfig& c) {
    StrictJson sj(j, path);
    sj.get("tau", c.tau);
    std::string strategy = to_string(c.strategy);
    sj.get("strategy", strategy);
    c.strategy = prune_strategy_from_string(strategy);
    sj.get("fixed_k", c.fixed_k);
    std::string policy = to_string(c.view_policy);
    sj.get("view_policy", policy);
    c.view_policy = view_policy_from_string(policy);
    sj.finish();
}

void parse_head(const nlohmann::json& j, const std::string& path, GcdHyper& h) {
    StrictJson sj(j, path);
    sj.get("lambda_sim", h.lambda_sim);
    sj.get("tau_u", h.tau_u);
    sj.get("tau_c", h.tau_c);
    sj.get("tau_s", h.tau_s);
    sj.get("tau_t_start", h.tau_t_start);
    sj.get("tau_t_end", h.tau_t_end);
    sj.get("tau_t_warmup_epochs", h.tau_t_warmup_epochs);
    sj.get("epsilon", h.epsilon);
    sj.get("lambda", h.lambda_aux);
    sj.finish();
}

void parse_optim(const nlohmann::json& j, const std::string& path, OptimConfig& o) {
    StrictJson sj(j, path);
    sj.get("epochs", o.epochs);
    sj.get("batch", o.batch);
    sj.get("lr", o.lr);
    sj.finish();
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    StrictJson sj(j, "config");

    sj.get("profile", c.profile);
    if (c.profile == "paper") {
        c.optim.epochs = 200;
        c.optim.batch = 128;
    } else if (c.profile != "desk") {
        throw ConfigError("config.profile: unknown profile '" + c.profile +
                          "' (expected 'desk' or 'paper')");
    }

    if (const nlohmann::json* b = sj.child("backbone")) {
        parse_backbone(*b, sj.path("backbone"), c.backbone);
    }
    if (const nlohmann::json* p = sj.child("prune")) {
        parse_prune(*p, sj.path("prune"), c.prune);
    }
    if (const nlohmann::json* h = sj.child("head")) {
        parse_head(*h, sj.path("head"), c.head);
    }
    if (const nlohmann::json* s = sj.child("synth")) {
        c.synth = synth_spec_from_json(*s, sj.path("synth"));
    }
    if (const nlohmann::json* o = sj.child("optim")) {
        parse_optim(*o, sj.path("optim"), c.optim);
    }
    sj.get("seed", c.seed);
    sj.get("out_dir", c.out_dir);
    sj.get("run_id", c.run_id);
    sj.get("af_enabled", c.af_enabled);
    sj.get("freeze_earlier_blocks", c.freeze_earlier_blocks);
    std::string pooling = to_string(c.pooling);
    sj.get("pooling", pooling);
    c.pooling = pool_mode_from_string(pooling);
    std::string qt = to_string(c.query_training);
    sj.get("query_training", qt);
    c.query_training = query_training_from_string(qt);
    sj.get("time_hidden_ratio", c.time_hidden_ratio);
    sj.finish();

    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) {
        throw ConfigError("cannot open config file '" + path + "'");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return config_from_json(j);
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["profile"] = c.profile;
    j["backbone"] = {
        {"image_side", c.backbone.image_side},
        {"patch_side", c.backbone.patch_side},
        {"channels", c.backbone.channels},
        {"embed_dim", c.backbone.embed_dim},
        {"num_blocks", c.backbone.num_blocks},
        {"num_heads", c.backbone.num_heads},
        {"mlp_ratio", c.backbone.mlp_ratio},
        {"num_known_classes", c.backbone.num_known_classes},
        {"num_total_classes", c.backbone.num_total_classes},
    };
    j["prune"] = {
        {"tau", c.prune.tau},
        {"strategy", to_string(c.prune.strategy)},
        {"fixed_k", c.prune.fixed_k},
        {"view_policy", to_string(c.prune.view_policy)},
    };
    j["head"] = {
        {"lambda_sim", c.head.lambda_sim},
        {"tau_u", c.head.tau_u},
        {"tau_c", c.head.tau_c},
        {"tau_s", c.head.tau_s},
        {"tau_t_start", c.head.tau_t_start},
        {"tau_t_end", c.head.tau_t_end},
        {"tau_t_warmup_epochs", c.head.tau_t_warmup_epochs},
        {"epsilon", c.head.epsilon},
        {"lambda", c.head.lambda_aux},
    };
    j["synth"] = synth_spec_to_json(c.synth);
    j["optim"] = {{"epochs", c.optim.epochs}, {"batch", c.optim.batch}, {"lr", c.optim.lr}};
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["run_id"] = c.run_id;
    j["af_enabled"] = c.af_enabled;
    j["freeze_earlier_blocks"] = c.freeze_earlier_blocks;
    j["pooling"] = to_string(c.pooling);
    j["query_training"] = to_string(c.query_training);
    j["time_hidden_ratio"] = c.time_hidden_ratio;
    return j;
}

}  // namespace af
