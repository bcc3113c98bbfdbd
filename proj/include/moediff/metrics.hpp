#pragma once

#include <map>
#include <string>
#include <vector>

#include "moediff/model.hpp"
#include "moediff/trace.hpp"

namespace moediff {

// Aggregates of one decoding run. APF averages, per decode forward, the
// layer-mean count of distinct activated experts (branch-parallel passes
// count once with the expert union); TPF is accepted tokens per decode
// forward; APT is their ratio. Commit passes are excluded from these three
// but included in the raw cost tallies.
struct RunSummary {
    double apf = 0.0;
    double tpf = 0.0;
    double apt = 0.0;  // NaN sentinel when no token was accepted
    bool apt_defined = true;
    long total_forwards = 0;  // decode passes only
    long total_tokens = 0;    // accepted tokens
    long total_steps = 0;     // including commit passes
    double expert_activation_sum = 0.0;  // sum over all steps and layers of |experts|
    double active_slot_sum = 0.0;  // sum over all steps of layers*active*branches
    int num_layers = 0;
    std::string config_digest;
    std::string warning;
    // Modeled units under the pricing in effect; filled by the runner.
    double cost_units = 0.0;

    bool operator==(const RunSummary&) const = default;
};

RunSummary summarize(const std::vector<StepTrace>& traces,
                     const std::string& config_digest = "");

// Per-unit coefficients of the memory-traffic cost model.
struct CostModel {
    double expert_param_cost = 1.0;     // units per activated expert per layer
    double attention_token_cost = 1.0;  // units per active position per layer
    double shared_cost = 0.0;           // fixed units per forward

    static CostModel defaults_for(const ModelConfig& cfg);
    void validate() const;  // throws ConfigError
};

double estimate_cost_units(const RunSummary& summary, const CostModel& cost);

struct SpeedupReport {
    double cost_units = 0.0;
    double baseline_cost_units = 0.0;
    double speedup = 1.0;  // baseline / this
};

// Throws ComparisonError when the two summaries carry different model
// fingerprints.
SpeedupReport estimate_cost(const RunSummary& summary, const RunSummary& baseline,
                            const CostModel& cost);

struct TimelinePoint {
    int block_index = 0;
    int iteration = 0;
    int total_experts = 0;
    int decoded_contrib = 0;
    int masked_contrib = 0;
};

// Per-layer expert-count series over decode iterations (commit passes
// excluded). Requires split accounting in the traces.
std::map<int, std::vector<TimelinePoint>> expert_timeline(
    const std::vector<StepTrace>& traces, const std::vector<int>& layers);

struct HistogramSeries {
    std::map<int, long> decoded;  // expert id -> token count
    std::map<int, long> masked;
};

// Token-level activation counts at one step and layer, split by whether the
// routing token was decoded or masked at step start.
HistogramSeries routing_histogram(const StepTrace& step, int layer);

struct HiddenSimilarity {
    // position -> iteration t -> cosine(h_t, h_{t+1}); entries absent where a
    // position was not computed at t or t+1.
    std::map<int, std::map<int, double>> similarity;
    std::map<int, int> accepted_at;  // acceptance annotations
};

// Step-to-step hidden-state similarity for one layer of one block. The
// commit pass participates as the final step so last-iteration acceptances
// have a successor. Throws InstrumentationError when snapshots are missing.
HiddenSimilarity hidden_similarity(const std::vector<StepTrace>& traces, int layer,
                                   int block_index = 0);

// CSV helpers: fixed column orders, floats at 9 significant digits.
std::string csv_real(double v);

// Analysis exports. Column orders are part of the documented interface
// (docs/trace_schema.md).

// layer,block,iteration,total_experts,decoded_contrib,masked_contrib
std::string timeline_csv(const std::vector<StepTrace>& traces,
                         const std::vector<int>& layers);

// block,iteration,layer,expert,decoded_count,masked_count — one row per
// expert activated at each decode step and layer.
std::string histogram_csv(const std::vector<StepTrace>& traces);

// layer,block,position,iteration,similarity,accepted_at — every consecutive
//-step cosine for each snapshotted layer and block.
std::string similarity_csv(const std::vector<StepTrace>& traces,
                           const std::vector<int>& layers);

}  // namespace moediff
