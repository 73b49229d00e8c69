#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "af/backbone.hpp"
#include "af/gcd_head.hpp"
#include "af/jsonutil.hpp"
#include "af/synthdata.hpp"
#include "af/tap.hpp"

namespace af {

struct OptimConfig {
    int epochs = 30;
    int batch = 32;
    double lr = 0.1;  // cosine-decayed to zero
};

enum class QueryTraining { labeled_only, all };
std::string to_string(QueryTraining q);
QueryTraining query_training_from_string(const std::string& s);
std::string to_string(PoolMode m);
PoolMode pool_mode_from_string(const std::string& s);

// One experiment, fully resolved. JSON parsing rejects unknown keys; the
// "profile" key switches the schedule defaults ("desk": 30 epochs, batch 32;
// "paper": 200 epochs, batch 128) before the explicit keys apply.
struct ExperimentConfig {
    VitConfig backbone;
    PruneConfig prune;
    GcdHyper head;
    SynthSpec synth;
    OptimConfig optim;
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    std::string run_id = "run";
    bool af_enabled = true;
    bool freeze_earlier_blocks = false;
    PoolMode pooling = PoolMode::mean;
    QueryTraining query_training = QueryTraining::labeled_only;
    int time_hidden_ratio = 4;
    std::string profile = "desk";

    void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config_file(const std::string& path);
// Full resolved config, for provenance lines in logs.
nlohmann::json config_to_json(const ExperimentConfig& c);

}  // namespace af
