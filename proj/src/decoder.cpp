#include "moediff/decoder.hpp"

#include <algorithm>
#include <set>

#include "moediff/errors.hpp"

namespace moediff {

void DecodeConfig::validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("decode tau must lie in (0,1)");
    if (block_size < 1) throw ConfigError("decode block_size must be positive");
    if (max_blocks < 1) throw ConfigError("decode max_blocks must be positive");
    if (max_iterations_per_block < 0) throw ConfigError("max_iterations_per_block negative");
}

const char* termination_name(Termination t) {
    switch (t) {
        case Termination::eos: return "eos";
        case Termination::max_blocks: return "max_blocks";
        case Termination::stall: return "stall";
    }
    return "?";
}

BlockState BlockState::fresh(int block_size, int mask_id) {
    BlockState s;
    s.tokens.assign(static_cast<size_t>(block_size), mask_id);
    s.masked.assign(static_cast<size_t>(block_size), 1);
    s.accepted_at.assign(static_cast<size_t>(block_size), -1);
    s.confidence_last.assign(static_cast<size_t>(block_size), -1.0);
    return s;
}

bool BlockState::fully_decoded() const {
    return std::none_of(masked.begin(), masked.end(), [](char m) { return m != 0; });
}

std::vector<int> BlockState::masked_positions() const {
    std::vector<int> out;
    for (size_t p = 0; p < masked.size(); ++p) {
        if (masked[p]) out.push_back(static_cast<int>(p));
    }
    return out;
}

std::vector<int> BlockState::decoded_positions() const {
    std::vector<int> out;
    for (size_t p = 0; p < masked.size(); ++p) {
        if (!masked[p]) out.push_back(static_cast<int>(p));
    }
    return out;
}

std::vector<AcceptedToken> accept_step(const ForwardResult& result, BlockState& state,
                                       double tau, int iteration) {
    for (int p : state.masked_positions()) {
        if (result.index_of(p) < 0) {
            throw CoverageError("forward result does not cover masked position " +
                                std::to_string(p));
        }
    }
    std::vector<AcceptedToken> accepted;
    for (int p : state.masked_positions()) {
        const double c = result.confidence_at(p);
        state.confidence_last[p] = c;
        if (c > tau) {  // strict
            const int token = result.prediction_at(p);
            state.tokens[p] = token;
            state.masked[p] = 0;
            state.accepted_at[p] = iteration;
            accepted.push_back(AcceptedToken{p, token, c, false, false});
        }
    }
    return accepted;
}

namespace detail {

namespace {

std::vector<int> sorted_union(const std::set<int>& s) { return {s.begin(), s.end()}; }

}  // namespace

StepTrace build_step_trace(const StepObservation& obs) {
    StepTrace t;
    t.block_index = obs.block_index;
    t.iteration = obs.iteration;
    t.commit = obs.commit;
    t.refresh = obs.refresh;
    t.branch_count = obs.branch_count;
    t.active_positions = obs.request->active_positions;
    t.masked_positions = obs.masked_at_start;
    t.has_classes = obs.has_classes;
    if (obs.has_classes) t.classes = obs.attribution;
    t.accepted = obs.accepted;
    t.branches = obs.branches;
    t.lac_fallback = obs.result->lac_fallback;

    for (int p : obs.masked_in_committed) {
        if (obs.result->index_of(p) >= 0) {
            t.confidences[p] = obs.result->confidence_at(p);
        }
    }

    const int num_layers = static_cast<int>(obs.result->new_kv.size());
    const bool split = obs.instr != nullptr && obs.instr->split_accounting;
    std::set<int> masked_set(obs.masked_at_start.begin(), obs.masked_at_start.end());

    for (int layer = 0; layer < num_layers; ++layer) {
        LayerTrace lt;
        lt.layer = layer;
        std::set<int> total, decoded, masked, hot, cold, spec;
        for (const ForwardResult* r : obs.all_results) {
            for (const RoutingRecord& rec : r->routing) {
                if (rec.layer != layer) continue;
                const int pos = rec.token_position - obs.block_index *
                                static_cast<int>(obs.request->block_tokens.size());
                for (int e : rec.expert_ids) {
                    total.insert(e);
                    if (!split) continue;
                    if (masked_set.count(pos)) {
                        masked.insert(e);
                    } else {
                        decoded.insert(e);
                    }
                    if (obs.has_classes) {
                        auto it = obs.attribution.find(pos);
                        if (it != obs.attribution.end()) {
                            switch (it->second) {
                                case TokenClass::hot: hot.insert(e); break;
                                case TokenClass::cold: cold.insert(e); break;
                                case TokenClass::speculated: spec.insert(e); break;
                                default: break;
                            }
                        }
                    }
                }
            }
        }
        lt.experts = sorted_union(total);
        if (split) {
            lt.experts_decoded = sorted_union(decoded);
            // Decoded-first partition: masked side keeps only experts that no
            // decoded token activated this step.
            for (int e : masked) {
                if (!decoded.count(e)) lt.experts_masked.push_back(e);
            }
            if (obs.has_classes) {
                lt.experts_hot = sorted_union(hot);
                lt.experts_cold = sorted_union(cold);
                lt.experts_speculated = sorted_union(spec);
            }
        }
        auto necessary = obs.result->necessary_experts.find(layer);
        if (necessary != obs.result->necessary_experts.end()) {
            lt.necessary = necessary->second;
        }
        // Trace records are block-relative like every other StepTrace field.
        const int base = obs.block_index * static_cast<int>(obs.request->block_tokens.size());
        for (const RoutingRecord& rec : obs.result->routing) {
            if (rec.layer != layer) continue;
            RoutingRecord rel = rec;
            rel.token_position -= base;
            lt.routing.push_back(std::move(rel));
        }
        t.layers.push_back(std::move(lt));
    }

    t.hidden = obs.result->hidden_snapshots;
    return t;
}

void commit_block_kv(const Model& model, LayerKVCache& cache, const BlockState& state,
                     int block_index, int after_iterations, std::vector<int> active,
                     bool use_intra_cache, std::vector<StepTrace>& traces,
                     const Instrumentation& instr) {
    ForwardRequest req;
    req.block_index = block_index;
    req.iteration = after_iterations;
    req.commit_pass = true;
    req.block_tokens = state.tokens;
    req.active_positions = std::move(active);
    req.hidden_snapshot_layers = instr.hidden_snapshot_layers;
    ForwardResult result = model.forward(cache, req);

    StepObservation obs;
    obs.block_index = block_index;
    obs.iteration = after_iterations;
    obs.commit = true;
    obs.request = &req;
    obs.result = &result;
    obs.all_results = {&result};
    obs.instr = &instr;
    traces.push_back(build_step_trace(obs));

    const int L = static_cast<int>(state.tokens.size());
    std::vector<std::vector<KvEntry>> entries(cache.num_layers());
    for (int layer = 0; layer < cache.num_layers(); ++layer) {
        entries[layer].reserve(static_cast<size_t>(L));
        for (int p = 0; p < L; ++p) {
            auto fresh = result.new_kv[layer].find(p);
            if (fresh != result.new_kv[layer].end()) {
                entries[layer].push_back(fresh->second);
            } else if (use_intra_cache && cache.intra_entry(layer, p) != nullptr) {
                entries[layer].push_back(*cache.intra_entry(layer, p));
            } else {
                throw CacheInconsistencyError("no key/value source for position " +
                                              std::to_string(p) + " at block commit");
            }
        }
    }
    cache.commit_block(entries);
}

}  // namespace detail

BlockState decode_block_vanilla(const Model& model, LayerKVCache& cache,
                                const DecodeConfig& cfg, int block_index,
                                std::vector<StepTrace>& traces,
                                const Instrumentation& instr) {
    cfg.validate();
    const int L = cfg.block_size;
    BlockState state = BlockState::fresh(L, model.config().mask_id);
    std::vector<int> all_positions(static_cast<size_t>(L));
    for (int p = 0; p < L; ++p) all_positions[p] = p;

    int iteration = 0;
    while (!state.fully_decoded()) {
        if (iteration >= cfg.effective_max_iterations()) {
            throw StallError("block " + std::to_string(block_index) + " exceeded " +
                             std::to_string(cfg.effective_max_iterations()) + " iterations");
        }
        const std::vector<int> masked_at_start = state.masked_positions();

        ForwardRequest req;
        req.block_index = block_index;
        req.iteration = iteration;
        req.block_tokens = state.tokens;
        req.active_positions = all_positions;
        req.hidden_snapshot_layers = instr.hidden_snapshot_layers;
        ForwardResult result = model.forward(cache, req);

        std::vector<AcceptedToken> accepted = accept_step(result, state, cfg.tau, iteration);
        if (accepted.empty() && cfg.force_accept_on_stall) {
            // Stall fallback: accept the single most confident masked token.
            int best = -1;
            double best_conf = -1.0;
            for (int p : masked_at_start) {
                const double c = result.confidence_at(p);
                if (c > best_conf) {
                    best_conf = c;
                    best = p;
                }
            }
            const int token = result.prediction_at(best);
            state.tokens[best] = token;
            state.masked[best] = 0;
            state.accepted_at[best] = iteration;
            accepted.push_back(AcceptedToken{best, token, best_conf, true, false});
        }

        detail::StepObservation obs;
        obs.block_index = block_index;
        obs.iteration = iteration;
        obs.request = &req;
        obs.result = &result;
        obs.all_results = {&result};
        obs.masked_at_start = masked_at_start;
        obs.masked_in_committed = masked_at_start;
        obs.accepted = accepted;
        obs.instr = &instr;
        traces.push_back(detail::build_step_trace(obs));
        ++iteration;
    }

    detail::commit_block_kv(model, cache, state, block_index, iteration, all_positions,
                            /*use_intra_cache=*/false, traces, instr);
    return state;
}

DecodeOutcome decode_response(const Model& model, const DecodeConfig& cfg,
                              const Instrumentation& instr) {
    cfg.validate();
    if (cfg.block_size != model.config().block_size) {
        throw ConfigError("decode block_size does not match the model");
    }
    if (cfg.max_blocks > model.config().max_blocks) {
        throw ConfigError("decode max_blocks exceeds the model's positional range");
    }
    DecodeOutcome outcome;
    LayerKVCache cache(model.config().num_layers);
    const int eos = model.config().eos_id;

    for (int block = 0; block < cfg.max_blocks; ++block) {
        BlockState state;
        try {
            state = decode_block_vanilla(model, cache, cfg, block, outcome.traces, instr);
        } catch (const StallError&) {
            outcome.terminated_by = Termination::stall;
            return outcome;
        }
        outcome.blocks.push_back(state);
        bool saw_eos = false;
        for (int t : state.tokens) {
            if (t == eos) {
                saw_eos = true;
                break;
            }
            outcome.response.push_back(t);
        }
        if (saw_eos) {
            outcome.terminated_by = Termination::eos;
            return outcome;
        }
    }
    outcome.terminated_by = Termination::max_blocks;
    return outcome;
}

}  // namespace moediff
