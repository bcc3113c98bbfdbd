#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moediff/decoder.hpp"
#include "moediff/metrics.hpp"
#include "moediff/model.hpp"
#include "moediff/planted.hpp"
#include "moediff/strategies.hpp"

namespace moediff {

enum class Engine { vanilla, accel };
const char* engine_name(Engine e);

struct VariantConfig {
    std::string name;
    Engine engine = Engine::vanilla;
    StrategyConfig strategy;
};

enum class ModelKind { toy, planted, scripted };

// Parsed form of the line-oriented experiment config (see
// docs/config_format.md). Parsing is strict: unknown keys and sections fail
// with the offending line number.
struct ExperimentConfig {
    ModelKind model_kind = ModelKind::toy;
    ModelConfig model;
    PlantedConfig planted;
    std::string script_path;  // resolved against the config file directory

    DecodeConfig decode;
    Instrumentation instrumentation;

    std::vector<uint64_t> seeds{1};
    std::vector<VariantConfig> variants;
    std::string out_dir;

    std::optional<double> expert_param_cost;
    std::optional<double> attention_token_cost;
    std::optional<double> shared_cost;

    // [ablate]
    std::vector<std::string> ablate_variants;  // empty = all four cumulative
    StrategyConfig ablate_strategy;            // knobs for the cumulative variants
    bool has_refresh_sweep = false;
    std::vector<std::optional<int>> refresh_intervals;  // nullopt = refresh-free
    bool ablate_seh_in_refresh = false;
    bool ablate_lac_in_refresh = false;

    // [sweep]
    std::vector<std::pair<double, int>> sweep_pairs;  // (tau_hot, l_hot)
    bool sweep_seh = false;

    CostModel cost_model() const;
    void validate() const;  // throws ConfigError
};

ExperimentConfig parse_experiment_config(const std::string& text,
                                         const std::string& base_dir = ".");
ExperimentConfig load_experiment_config(const std::string& path);

}  // namespace moediff
