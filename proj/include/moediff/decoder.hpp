#pragma once

#include <optional>
#include <vector>

#include "moediff/model.hpp"
#include "moediff/trace.hpp"

namespace moediff {

struct DecodeConfig {
    double tau = 0.95;  // acceptance threshold, strict comparison
    int block_size = 32;
    int max_blocks = 4;
    int max_iterations_per_block = 0;  // 0 = 4 * block_size
    bool force_accept_on_stall = true;

    int effective_max_iterations() const {
        return max_iterations_per_block > 0 ? max_iterations_per_block : 4 * block_size;
    }
    void validate() const;  // throws ConfigError
};

struct Instrumentation {
    std::vector<int> hidden_snapshot_layers;
    bool split_accounting = true;
    // Makes the runner export per-run timeline/histogram/similarity CSVs.
    bool analysis_csv = false;
};

struct BlockState {
    std::vector<int> tokens;
    std::vector<char> masked;
    std::vector<int> accepted_at;          // -1 while masked
    std::vector<double> confidence_last;   // last observed confidence, -1 before any pass

    static BlockState fresh(int block_size, int mask_id);

    bool fully_decoded() const;
    std::vector<int> masked_positions() const;
    std::vector<int> decoded_positions() const;
};

enum class Termination { eos, max_blocks, stall };
const char* termination_name(Termination t);

struct DecodeOutcome {
    std::vector<int> response;  // truncated before the first EOS
    std::vector<StepTrace> traces;
    Termination terminated_by = Termination::max_blocks;
    std::vector<BlockState> blocks;  // completed blocks, in order
};

// Threshold acceptance: masked positions whose confidence strictly exceeds
// tau take their predicted token; everything else stays masked. Throws
// CoverageError if the result does not cover every masked position.
std::vector<AcceptedToken> accept_step(const ForwardResult& result, BlockState& state,
                                       double tau, int iteration);

// Vanilla block decoding: every pass computes the full block, nothing is
// cached inside the block, acceptance follows the threshold rule, and a
// zero-acceptance pass either force-accepts the most confident masked token
// (flagged `forced`) or eventually raises StallError.
BlockState decode_block_vanilla(const Model& model, LayerKVCache& cache,
                                const DecodeConfig& cfg, int block_index,
                                std::vector<StepTrace>& traces,
                                const Instrumentation& instr = {});

// Block-by-block response decoding; stops after the block containing the
// first EOS (response truncated before it) or at max_blocks. A stall with
// force_accept_on_stall=false ends the outcome with Termination::stall and
// only the completed blocks.
DecodeOutcome decode_response(const Model& model, const DecodeConfig& cfg,
                              const Instrumentation& instr = {});

namespace detail {

// Everything observed during one decode step; turned into the serialized
// StepTrace by build_step_trace so every decoding loop emits identical
// records for identical behavior.
struct StepObservation {
    int block_index = 0;
    int iteration = 0;
    bool commit = false;
    bool refresh = false;
    int branch_count = 1;
    const ForwardRequest* request = nullptr;        // committed branch request
    const ForwardResult* result = nullptr;          // committed branch result
    std::vector<const ForwardResult*> all_results;  // every branch, index order
    std::vector<int> masked_at_start;
    std::vector<int> masked_in_committed;           // masked_at_start minus committed speculations
    std::vector<AcceptedToken> accepted;
    std::optional<BranchTrace> branches;
    bool has_classes = false;
    std::map<int, TokenClass> attribution;          // one class per position
    const Instrumentation* instr = nullptr;
};

StepTrace build_step_trace(const StepObservation& obs);

// Runs the post-completion pass that produces committed KV, appends its
// trace, and commits the block to the cache. `active` is every position for
// vanilla-style decoding or the final grace set under delayed caching.
void commit_block_kv(const Model& model, LayerKVCache& cache, const BlockState& state,
                     int block_index, int after_iterations, std::vector<int> active,
                     bool use_intra_cache, std::vector<StepTrace>& traces,
                     const Instrumentation& instr);

}  // namespace detail

}  // namespace moediff
