#pragma once

#include <memory>
#include <string>
#include <vector>

#include "moediff/expconfig.hpp"

namespace moediff {

// Stable exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitStall = 3;
inline constexpr int kExitSchemaMismatch = 4;

struct RunOptions {
    std::string config_path;
    std::string out_override;
    std::vector<uint64_t> seeds_override;
    int parallel = 1;
};

int cmd_run(const RunOptions& opts);
int cmd_ablate(const RunOptions& opts);
int cmd_sweep(const RunOptions& opts);

struct DiffOptions {
    std::string path_a;
    std::string path_b;
    bool full = false;  // default: tokens-only comparison
    int max_report = 20;
};

struct DiffReport {
    bool identical = true;
    std::vector<std::string> differences;
};

DiffReport diff_trace_files(const DiffOptions& opts);
int cmd_diff(const DiffOptions& opts);

// Building blocks, exposed for tests and the python module.
std::shared_ptr<Model> build_model_for_seed(const ExperimentConfig& cfg, uint64_t seed);
DecodeOutcome execute_variant(const Model& model, const ExperimentConfig& cfg,
                              const VariantConfig& variant);
std::string resolve_out_dir(const ExperimentConfig& cfg, const RunOptions& opts);
std::string sanitize_name(const std::string& name);

}  // namespace moediff
