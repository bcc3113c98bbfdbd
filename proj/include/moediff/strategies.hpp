#pragma once

#include <optional>

#include "moediff/decoder.hpp"
#include "moediff/model.hpp"

namespace moediff {

// Toggles and knobs for the three acceleration strategies: delayed caching
// of decoded tokens (dcd), speculative exploration of hot tokens (seh), and
// limited activation for cold tokens (lac). Each is independently switchable
// for ablations; with everything off the accelerated loop reproduces the
// vanilla decoder byte for byte.
struct StrategyConfig {
    bool dcd_enabled = false;
    // nullopt = never refresh the intra-block cache; n >= 2 recomputes the
    // whole block every n iterations; 1 degenerates to vanilla (the cache is
    // never trusted, so it is not used at all).
    std::optional<int> refresh_interval;
    bool seh_enabled = false;
    int num_branches = 4;
    double tau_hot = 0.7;
    int l_hot = 3;
    bool lac_enabled = false;
    // Alternative necessary-set reading: top-k experts by aggregated round-1
    // gate weight instead of the union of per-token top-k sets.
    bool lac_aggregate_necessary = false;

    void validate(double tau) const;  // throws ConfigError
    bool any_enabled() const { return dcd_enabled || seh_enabled || lac_enabled; }
};

// Hot/cold partition of the masked positions. A masked position is hot when
// its last observed confidence exceeds tau_hot or the nearest decoded
// position is closer than l_hot. On a fresh block (nothing decoded, no
// confidences yet) positions 0..l_hot-1 seed the hot set.
std::map<int, TokenClass> classify_masked(const BlockState& state, const StrategyConfig& cfg);

// Adds decoded positions: newly_accepted for exactly the iteration after
// their acceptance, cached afterwards.
void classify_decoded(const BlockState& state, int iteration,
                      std::map<int, TokenClass>& classes);

struct ActiveSelection {
    std::vector<int> positions;
    bool refresh = false;
};

// Delayed-caching active set: masked plus the tokens accepted in the
// immediately preceding iteration; on refresh-due iterations, the whole
// block with the refresh flag set.
ActiveSelection dcd_active_positions(const BlockState& state, int iteration,
                                     const StrategyConfig& cfg);

struct Speculation {
    int position = 0;
    int token = 0;
    double confidence = 0.0;  // confidence that nominated the candidate
};

// Cumulative-prefix branch chain: branch b plants the top-b candidates.
struct BranchSet {
    std::vector<Speculation> candidates;  // confidence descending, ties leftmost
    int num_branches = 1;                 // realizable branches (1 + candidates used)

    // Speculations planted in branch b (the first b candidates).
    std::vector<Speculation> speculations_for(int branch) const;
};

// Candidates are hot masked positions whose previous-pass confidence did not
// cross tau, ordered by that confidence descending (ties leftmost); at most
// num_branches-1 are used.
BranchSet seh_build_branches(const ForwardResult& prev_result,
                             const std::map<int, TokenClass>& classes,
                             const StrategyConfig& cfg, double tau);

struct VerificationOutcome {
    int longest_valid_prefix = 0;  // m
    int committed_branch = 0;      // branch whose result is committed (= m)
    std::vector<Speculation> confirmed;          // confirmed speculations, chain order
    std::vector<SpeculationTrace> details;       // every realized speculation
};

// Speculation i is confirmed iff branch i-1's result still holds position
// p_i active with prediction t_i at confidence above tau, and speculations
// 1..i-1 are confirmed. Throws VerificationInputError unless exactly one
// result per branch is supplied.
VerificationOutcome seh_verify(const std::vector<const ForwardResult*>& results,
                               const BranchSet& branches, double tau);

// Double-round routing for one toy-model layer over explicit hidden vectors;
// thin wrapper over the routing core for direct use and tests.
TwoRoundRouting lac_two_round_route(const ToyModel& model, int layer,
                                    const std::map<int, std::vector<double>>& hiddens,
                                    const std::map<int, TokenClass>& classes,
                                    const StrategyConfig& cfg);

// The accelerated block loop: per iteration, choose active positions (dcd),
// classify masked tokens, build and verify speculative branches (seh), route
// with limited activation (lac), commit the longest valid prefix, and update
// the intra-block cache. With every strategy disabled this is byte-identical
// to decode_block_vanilla.
BlockState decode_block_accel(const Model& model, LayerKVCache& cache,
                              const DecodeConfig& cfg, const StrategyConfig& strat,
                              int block_index, std::vector<StepTrace>& traces,
                              const Instrumentation& instr = {});

DecodeOutcome decode_response_accel(const Model& model, const DecodeConfig& cfg,
                                    const StrategyConfig& strat,
                                    const Instrumentation& instr = {});

}  // namespace moediff
