#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moediff/routing.hpp"

namespace moediff {

inline constexpr int kTraceSchemaVersion = 1;

struct AcceptedToken {
    int position = 0;
    int token = 0;
    double confidence = 0.0;
    bool forced = false;      // stall fallback, not a threshold crossing
    bool speculated = false;  // committed through branch verification

    bool operator==(const AcceptedToken&) const = default;
};

struct SpeculationTrace {
    int position = 0;
    int token = 0;
    double candidate_confidence = 0.0;  // confidence that nominated it
    int verify_prediction = -1;
    double verify_confidence = 0.0;
    bool confirmed = false;

    bool operator==(const SpeculationTrace&) const = default;
};

struct BranchTrace {
    int branch_count = 1;  // realizable branches this step
    int confirmed_prefix = 0;
    std::vector<SpeculationTrace> speculations;  // chain order

    bool operator==(const BranchTrace&) const = default;
};

struct LayerTrace {
    int layer = 0;
    // Distinct activated experts (union across branches), sorted.
    std::vector<int> experts;
    // Decoded-first partition: masked covers only experts no decoded token used.
    std::vector<int> experts_decoded;
    std::vector<int> experts_masked;
    // Finer split, present when classification ran.
    std::vector<int> experts_hot;
    std::vector<int> experts_cold;
    std::vector<int> experts_speculated;
    std::optional<std::vector<int>> necessary;  // E_A when limited activation ran
    std::vector<RoutingRecord> routing;         // committed branch, position order

    bool operator==(const LayerTrace&) const = default;
};

// Full instrumentation record of one forward step (or one branch-parallel
// group of forwards, which counts as a single step).
struct StepTrace {
    int block_index = 0;
    int iteration = 0;
    bool commit = false;  // post-completion KV pass, excluded from APF/TPF
    bool refresh = false;
    bool lac_fallback = false;
    int branch_count = 1;
    std::vector<int> active_positions;
    std::vector<int> masked_positions;  // at step start
    bool has_classes = false;
    std::map<int, TokenClass> classes;
    std::map<int, double> confidences;  // committed branch, masked positions
    std::vector<AcceptedToken> accepted;
    std::optional<BranchTrace> branches;
    std::vector<LayerTrace> layers;
    // layer -> position -> hidden vector, when snapshots were requested.
    std::map<int, std::map<int, std::vector<double>>> hidden;

    bool operator==(const StepTrace&) const = default;
};

// Round to 9 significant digits; all serialized floats go through this.
double sig9(double v);

std::string step_to_json(const StepTrace& step);
StepTrace step_from_json(const std::string& line);

// One StepTrace per line.
std::string traces_to_jsonl(const std::vector<StepTrace>& traces);
std::vector<StepTrace> traces_from_jsonl(const std::string& text);
void save_traces(const std::vector<StepTrace>& traces, const std::string& path);
std::vector<StepTrace> load_traces(const std::string& path);

// Thrown on a schema_version the reader does not understand.
struct SchemaMismatchError : std::runtime_error {
    explicit SchemaMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace moediff
