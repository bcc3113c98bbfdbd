#include "moediff/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "moediff/errors.hpp"

namespace moediff {

void StrategyConfig::validate(double tau) const {
    if (num_branches < 1) throw ConfigError("num_branches must be at least 1");
    if (!(tau_hot > 0.0 && tau_hot < tau)) {
        throw ConfigError("tau_hot must lie in (0, tau)");
    }
    if (l_hot < 1) throw ConfigError("l_hot must be at least 1");
    if (refresh_interval && *refresh_interval < 1) {
        throw ConfigError("refresh_interval must be at least 1");
    }
}

std::map<int, TokenClass> classify_masked(const BlockState& state,
                                          const StrategyConfig& cfg) {
    const std::vector<int> decoded = state.decoded_positions();
    const bool fresh = decoded.empty() &&
                       std::all_of(state.confidence_last.begin(), state.confidence_last.end(),
                                   [](double c) { return c < 0.0; });
    std::map<int, TokenClass> classes;
    for (int p : state.masked_positions()) {
        bool hot = false;
        if (fresh) {
            hot = p < cfg.l_hot;
        } else {
            if (state.confidence_last[p] > cfg.tau_hot) hot = true;
            if (!hot) {
                for (int j : decoded) {
                    if (std::abs(p - j) < cfg.l_hot) {
                        hot = true;
                        break;
                    }
                }
            }
        }
        classes[p] = hot ? TokenClass::hot : TokenClass::cold;
    }
    return classes;
}

void classify_decoded(const BlockState& state, int iteration,
                      std::map<int, TokenClass>& classes) {
    for (int p : state.decoded_positions()) {
        classes[p] = state.accepted_at[p] == iteration - 1 ? TokenClass::newly_accepted
                                                           : TokenClass::cached;
    }
}

ActiveSelection dcd_active_positions(const BlockState& state, int iteration,
                                     const StrategyConfig& cfg) {
    ActiveSelection sel;
    if (cfg.refresh_interval && iteration > 0 && iteration % *cfg.refresh_interval == 0) {
        sel.refresh = true;
        sel.positions.resize(state.tokens.size());
        for (size_t p = 0; p < state.tokens.size(); ++p) {
            sel.positions[p] = static_cast<int>(p);
        }
        return sel;
    }
    for (size_t p = 0; p < state.tokens.size(); ++p) {
        if (state.masked[p] || state.accepted_at[p] == iteration - 1) {
            sel.positions.push_back(static_cast<int>(p));
        }
    }
    return sel;
}

std::vector<Speculation> BranchSet::speculations_for(int branch) const {
    if (branch < 0 || branch >= num_branches) {
        throw ArgumentError("branch index out of range");
    }
    return {candidates.begin(), candidates.begin() + branch};
}

BranchSet seh_build_branches(const ForwardResult& prev_result,
                             const std::map<int, TokenClass>& classes,
                             const StrategyConfig& cfg, double tau) {
    std::vector<Speculation> cands;
    for (const auto& [p, cls] : classes) {
        if (cls != TokenClass::hot) continue;
        const int idx = prev_result.index_of(p);
        if (idx < 0) continue;
        const double conf = prev_result.confidences[idx];
        if (conf > tau) continue;
        cands.push_back(Speculation{p, prev_result.predictions[idx], conf});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Speculation& a, const Speculation& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.position < b.position;
    });
    const int usable = std::min<int>(cfg.num_branches - 1, static_cast<int>(cands.size()));
    cands.resize(static_cast<size_t>(usable));

    BranchSet set;
    set.candidates = std::move(cands);
    set.num_branches = usable + 1;
    return set;
}

VerificationOutcome seh_verify(const std::vector<const ForwardResult*>& results,
                               const BranchSet& branches, double tau) {
    if (static_cast<int>(results.size()) != branches.num_branches) {
        throw VerificationInputError("expected one result per branch: got " +
                                     std::to_string(results.size()) + " for " +
                                     std::to_string(branches.num_branches) + " branches");
    }
    for (const ForwardResult* r : results) {
        if (r == nullptr) throw VerificationInputError("missing branch result");
    }

    VerificationOutcome out;
    bool chain_alive = true;
    for (int i = 1; i < branches.num_branches; ++i) {
        const Speculation& sp = branches.candidates[static_cast<size_t>(i - 1)];
        const ForwardResult* verifier = results[static_cast<size_t>(i - 1)];
        SpeculationTrace st;
        st.position = sp.position;
        st.token = sp.token;
        st.candidate_confidence = sp.confidence;
        const int idx = verifier->index_of(sp.position);
        if (idx >= 0) {
            st.verify_prediction = verifier->predictions[static_cast<size_t>(idx)];
            st.verify_confidence = verifier->confidences[static_cast<size_t>(idx)];
        }
        const bool ok = chain_alive && idx >= 0 && st.verify_prediction == sp.token &&
                        st.verify_confidence > tau;
        st.confirmed = ok;
        if (ok) {
            out.longest_valid_prefix = i;
            out.confirmed.push_back(Speculation{sp.position, sp.token, st.verify_confidence});
        } else {
            chain_alive = false;
        }
        out.details.push_back(st);
    }
    out.committed_branch = out.longest_valid_prefix;
    return out;
}

TwoRoundRouting lac_two_round_route(const ToyModel& model, int layer,
                                    const std::map<int, std::vector<double>>& hiddens,
                                    const std::map<int, TokenClass>& classes,
                                    const StrategyConfig& cfg) {
    if (!cfg.lac_enabled) throw ArgumentError("limited activation is disabled");
    std::vector<int> positions;
    for (const auto& [p, h] : hiddens) positions.push_back(p);
    return two_round_route(
        [&](int p) { return model.router_logits(layer, hiddens.at(p)); }, positions,
        classes, model.config().experts_per_token, layer, /*abs_base=*/0,
        cfg.lac_aggregate_necessary);
}

BlockState decode_block_accel(const Model& model, LayerKVCache& cache,
                              const DecodeConfig& cfg, const StrategyConfig& strat,
                              int block_index, std::vector<StepTrace>& traces,
                              const Instrumentation& instr) {
    cfg.validate();
    strat.validate(cfg.tau);
    const int L = cfg.block_size;
    BlockState state = BlockState::fresh(L, model.config().mask_id);
    std::vector<int> all_positions(static_cast<size_t>(L));
    for (int p = 0; p < L; ++p) all_positions[p] = p;

    // refresh_interval == 1 means the cache is never trusted; run without it.
    const bool caching =
        strat.dcd_enabled && !(strat.refresh_interval && *strat.refresh_interval == 1);
    const bool seh_on = strat.seh_enabled && strat.num_branches > 1;
    const bool lac_on = strat.lac_enabled;
    const bool classify = seh_on || lac_on;

    std::optional<ForwardResult> prev_committed;
    std::vector<int> prev_accepted;

    int iteration = 0;
    while (!state.fully_decoded()) {
        if (iteration >= cfg.effective_max_iterations()) {
            throw StallError("block " + std::to_string(block_index) + " exceeded " +
                             std::to_string(cfg.effective_max_iterations()) + " iterations");
        }
        const std::vector<int> masked_at_start = state.masked_positions();
        const std::vector<int> decoded_at_start = state.decoded_positions();

        bool refresh = false;
        std::vector<int> active;
        if (caching) {
            ActiveSelection sel = dcd_active_positions(state, iteration, strat);
            active = std::move(sel.positions);
            refresh = sel.refresh;
        } else {
            active = all_positions;
        }

        std::map<int, TokenClass> classes;
        if (classify) {
            classes = classify_masked(state, strat);
            classify_decoded(state, iteration, classes);
        }

        BranchSet branches;
        if (seh_on && prev_committed.has_value()) {
            branches = seh_build_branches(*prev_committed, classes, strat, cfg.tau);
        }
        const int num_branches = branches.num_branches;

        std::vector<ForwardRequest> requests(static_cast<size_t>(num_branches));
        std::vector<ForwardResult> results(static_cast<size_t>(num_branches));
        for (int b = 0; b < num_branches; ++b) {
            ForwardRequest& req = requests[static_cast<size_t>(b)];
            req.block_index = block_index;
            req.iteration = iteration;
            req.branch_id = b;
            req.block_tokens = state.tokens;
            req.active_positions = active;
            req.lac = lac_on;
            req.lac_aggregate_necessary = strat.lac_aggregate_necessary;
            req.hidden_snapshot_layers = instr.hidden_snapshot_layers;
            if (classify) req.classes = classes;
            for (const Speculation& sp : branches.speculations_for(b)) {
                req.block_tokens[static_cast<size_t>(sp.position)] = sp.token;
                req.classes[sp.position] = TokenClass::speculated;
            }
            results[static_cast<size_t>(b)] = model.forward(cache, req);
        }

        VerificationOutcome verification;
        if (num_branches > 1) {
            std::vector<const ForwardResult*> ptrs;
            for (const auto& r : results) ptrs.push_back(&r);
            verification = seh_verify(ptrs, branches, cfg.tau);
        }
        const int m = verification.longest_valid_prefix;
        ForwardResult& committed = results[static_cast<size_t>(m)];
        ForwardRequest& committed_req = requests[static_cast<size_t>(m)];

        std::vector<AcceptedToken> accepted;
        for (const Speculation& sp : verification.confirmed) {
            state.tokens[static_cast<size_t>(sp.position)] = sp.token;
            state.masked[static_cast<size_t>(sp.position)] = 0;
            state.accepted_at[static_cast<size_t>(sp.position)] = iteration;
            state.confidence_last[static_cast<size_t>(sp.position)] = sp.confidence;
            accepted.push_back(AcceptedToken{sp.position, sp.token, sp.confidence,
                                             /*forced=*/false, /*speculated=*/true});
        }
        std::vector<AcceptedToken> natural = accept_step(committed, state, cfg.tau, iteration);
        accepted.insert(accepted.end(), natural.begin(), natural.end());

        if (accepted.empty() && cfg.force_accept_on_stall) {
            int best = -1;
            double best_conf = -1.0;
            for (int p : masked_at_start) {
                const double c = committed.confidence_at(p);
                if (c > best_conf) {
                    best_conf = c;
                    best = p;
                }
            }
            const int token = committed.prediction_at(best);
            state.tokens[static_cast<size_t>(best)] = token;
            state.masked[static_cast<size_t>(best)] = 0;
            state.accepted_at[static_cast<size_t>(best)] = iteration;
            accepted.push_back(AcceptedToken{best, token, best_conf, true, false});
        }

        if (caching) {
            for (int layer = 0; layer < cache.num_layers(); ++layer) {
                const auto& fresh_kv = committed.new_kv[static_cast<size_t>(layer)];
                if (refresh) {
                    for (int p : decoded_at_start) {
                        cache.intra_insert(layer, p, fresh_kv.at(p), /*grace_pending=*/false);
                    }
                } else {
                    for (int p : prev_accepted) {
                        cache.intra_insert(layer, p, fresh_kv.at(p), /*grace_pending=*/false);
                    }
                }
                for (const AcceptedToken& a : accepted) {
                    cache.intra_insert(layer, a.position, fresh_kv.at(a.position),
                                       /*grace_pending=*/true);
                }
            }
        }

        detail::StepObservation obs;
        obs.block_index = block_index;
        obs.iteration = iteration;
        obs.refresh = refresh;
        obs.branch_count = num_branches;
        obs.request = &committed_req;
        obs.result = &committed;
        for (const auto& r : results) obs.all_results.push_back(&r);
        obs.masked_at_start = masked_at_start;
        obs.masked_in_committed = masked_at_start;
        for (const Speculation& sp : verification.confirmed) {
            obs.masked_in_committed.erase(std::remove(obs.masked_in_committed.begin(),
                                                      obs.masked_in_committed.end(), sp.position),
                                          obs.masked_in_committed.end());
        }
        obs.accepted = accepted;
        if (seh_on) {
            BranchTrace bt;
            bt.branch_count = num_branches;
            bt.confirmed_prefix = m;
            bt.speculations = verification.details;
            obs.branches = std::move(bt);
        }
        obs.has_classes = classify;
        if (classify) {
            obs.attribution = classes;
            // Positions planted anywhere in the realized chain count as
            // speculated for split accounting.
            for (const Speculation& sp : branches.candidates) {
                obs.attribution[sp.position] = TokenClass::speculated;
            }
        }
        obs.instr = &instr;
        traces.push_back(detail::build_step_trace(obs));

        prev_committed = std::move(committed);
        prev_accepted.clear();
        for (const AcceptedToken& a : accepted) prev_accepted.push_back(a.position);
        std::sort(prev_accepted.begin(), prev_accepted.end());
        ++iteration;
    }

    if (caching) {
        detail::commit_block_kv(model, cache, state, block_index, iteration, prev_accepted,
                                /*use_intra_cache=*/true, traces, instr);
    } else {
        detail::commit_block_kv(model, cache, state, block_index, iteration, all_positions,
                                /*use_intra_cache=*/false, traces, instr);
    }
    return state;
}

DecodeOutcome decode_response_accel(const Model& model, const DecodeConfig& cfg,
                                    const StrategyConfig& strat,
                                    const Instrumentation& instr) {
    cfg.validate();
    strat.validate(cfg.tau);
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
            state = decode_block_accel(model, cache, cfg, strat, block, outcome.traces, instr);
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
