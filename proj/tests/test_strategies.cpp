#include <algorithm>
#include <set>

#include <doctest.h>

#include "moediff/errors.hpp"
#include "moediff/metrics.hpp"
#include "moediff/planted.hpp"
#include "moediff/scripted.hpp"
#include "moediff/strategies.hpp"

using namespace moediff;

namespace {

ModelConfig toy_config(uint64_t seed, double clustering = 0.0) {
    ModelConfig mc;
    mc.vocab_size = 32;
    mc.hidden_dim = 16;
    mc.num_layers = 4;
    mc.num_experts = 16;
    mc.experts_per_token = 2;
    mc.block_size = 8;
    mc.max_blocks = 2;
    mc.seed = seed;
    mc.clustering_strength = clustering;
    return mc;
}

DecodeConfig decode_config(int block_size, int max_blocks = 1) {
    DecodeConfig cfg;
    cfg.block_size = block_size;
    cfg.max_blocks = max_blocks;
    return cfg;
}

StrategyConfig all_strategies() {
    StrategyConfig s;
    s.dcd_enabled = true;
    s.seh_enabled = true;
    s.lac_enabled = true;
    return s;
}

BlockState state_with_decoded(int block_size, const std::vector<int>& decoded,
                              const std::vector<double>& confidences) {
    BlockState state = BlockState::fresh(block_size, 0);
    for (int p : decoded) {
        state.tokens[p] = 9;
        state.masked[p] = 0;
        state.accepted_at[p] = 0;
    }
    for (int p = 0; p < block_size; ++p) state.confidence_last[p] = confidences[p];
    return state;
}

}  // namespace

TEST_CASE("classify_masked: nearest-decoded distance rule") {
    // decoded {0,1}; everything else at confidence 0.1; l_hot=3.
    StrategyConfig cfg;
    cfg.tau_hot = 0.7;
    cfg.l_hot = 3;
    BlockState state = state_with_decoded(8, {0, 1}, std::vector<double>(8, 0.1));
    auto classes = classify_masked(state, cfg);
    CHECK(classes.at(2) == TokenClass::hot);   // distance 1
    CHECK(classes.at(3) == TokenClass::hot);   // distance 2
    CHECK(classes.at(4) == TokenClass::cold);  // distance 3, not < 3
    CHECK(classes.at(7) == TokenClass::cold);
    CHECK(classes.count(0) == 0);  // decoded positions are not classified here
}

TEST_CASE("classify_masked: confidence clause alone makes a distant token hot") {
    StrategyConfig cfg;
    cfg.tau_hot = 0.7;
    cfg.l_hot = 3;
    std::vector<double> confs(16, 0.1);
    confs[12] = 0.71;
    BlockState state = state_with_decoded(16, {0}, confs);
    auto classes = classify_masked(state, cfg);
    CHECK(classes.at(12) == TokenClass::hot);  // distance 12, confidence 0.71
    CHECK(classes.at(11) == TokenClass::cold);
}

TEST_CASE("classify_masked: fresh block seeds the first l_hot positions hot") {
    StrategyConfig cfg;
    cfg.tau_hot = 0.7;
    cfg.l_hot = 3;
    BlockState state = BlockState::fresh(8, 0);
    auto classes = classify_masked(state, cfg);
    for (int p = 0; p < 8; ++p) {
        CHECK(classes.at(p) == (p < 3 ? TokenClass::hot : TokenClass::cold));
    }
}

TEST_CASE("hot and cold partition the masked set") {
    StrategyConfig cfg;
    cfg.tau_hot = 0.7;
    cfg.l_hot = 2;
    std::vector<double> confs(8, 0.2);
    confs[6] = 0.9;
    BlockState state = state_with_decoded(8, {2, 3}, confs);
    auto classes = classify_masked(state, cfg);
    const std::vector<int> masked_vec = state.masked_positions();
    std::set<int> masked(masked_vec.begin(), masked_vec.end());
    CHECK(classes.size() == masked.size());
    for (const auto& [p, cls] : classes) {
        CHECK(masked.count(p) == 1);
        CHECK((cls == TokenClass::hot || cls == TokenClass::cold));
    }
}

TEST_CASE("dcd_active_positions: masked plus newly accepted") {
    StrategyConfig cfg;
    cfg.dcd_enabled = true;
    BlockState state = BlockState::fresh(8, 0);
    for (int p : {0, 1}) {  // accepted at iteration 1
        state.tokens[p] = 9;
        state.masked[p] = 0;
        state.accepted_at[p] = 1;
    }
    for (int p : {3, 4}) {  // accepted at iteration 2 (newly accepted at 3)
        state.tokens[p] = 9;
        state.masked[p] = 0;
        state.accepted_at[p] = 2;
    }
    ActiveSelection sel = dcd_active_positions(state, 3, cfg);
    CHECK(sel.positions == std::vector<int>{2, 3, 4, 5, 6, 7});
    CHECK_FALSE(sel.refresh);
}

TEST_CASE("dcd_active_positions: refresh every 4 steps recomputes the block") {
    StrategyConfig cfg;
    cfg.dcd_enabled = true;
    cfg.refresh_interval = 4;
    BlockState state = BlockState::fresh(8, 0);
    state.tokens[0] = 9;
    state.masked[0] = 0;
    state.accepted_at[0] = 0;

    ActiveSelection sel = dcd_active_positions(state, 4, cfg);
    CHECK(sel.refresh);
    CHECK(sel.positions.size() == 8);

    ActiveSelection sel3 = dcd_active_positions(state, 3, cfg);
    CHECK_FALSE(sel3.refresh);
    CHECK(sel3.positions.size() == 7);  // masked only; position 0 is long cached

    ActiveSelection sel0 = dcd_active_positions(state, 0, cfg);
    CHECK_FALSE(sel0.refresh);  // iteration 0 never refreshes
}

TEST_CASE("seh_build_branches: cumulative prefixes over hot candidates") {
    StrategyConfig cfg;
    cfg.seh_enabled = true;
    cfg.num_branches = 4;
    ForwardResult prev;
    prev.active_positions = {2, 3, 4, 5};
    prev.predictions = {12, 13, 14, 15};
    prev.confidences = {0.9, 0.8, 0.72, 0.1};
    std::map<int, TokenClass> classes{{2, TokenClass::hot},
                                      {3, TokenClass::hot},
                                      {4, TokenClass::hot},
                                      {5, TokenClass::cold}};
    BranchSet set = seh_build_branches(prev, classes, cfg, 0.95);
    CHECK(set.num_branches == 4);
    REQUIRE(set.candidates.size() == 3);
    CHECK(set.candidates[0].position == 2);
    CHECK(set.candidates[1].position == 3);
    CHECK(set.candidates[2].position == 4);
    CHECK(set.speculations_for(0).empty());
    CHECK(set.speculations_for(2).size() == 2);

    // Branch b is a strict superset of branch b-1, adding exactly one.
    for (int b = 1; b < set.num_branches; ++b) {
        auto prev_specs = set.speculations_for(b - 1);
        auto specs = set.speculations_for(b);
        CHECK(specs.size() == prev_specs.size() + 1);
        for (size_t i = 0; i < prev_specs.size(); ++i) {
            CHECK(specs[i].position == prev_specs[i].position);
        }
    }
}

TEST_CASE("seh_build_branches degenerate cases") {
    StrategyConfig cfg;
    cfg.seh_enabled = true;
    cfg.num_branches = 4;
    ForwardResult prev;
    prev.active_positions = {0};
    prev.predictions = {3};
    prev.confidences = {0.2};
    std::map<int, TokenClass> cold_only{{0, TokenClass::cold}};
    BranchSet none = seh_build_branches(prev, cold_only, cfg, 0.95);
    CHECK(none.num_branches == 1);
    CHECK(none.candidates.empty());

    cfg.num_branches = 1;
    std::map<int, TokenClass> hot{{0, TokenClass::hot}};
    BranchSet single = seh_build_branches(prev, hot, cfg, 0.95);
    CHECK(single.num_branches == 1);
}

TEST_CASE("seh_verify: longest valid prefix rule") {
    BranchSet set;
    set.candidates = {{2, 12, 0.9}, {3, 13, 0.8}, {4, 14, 0.7}};
    set.num_branches = 4;

    auto make_result = [](std::vector<int> active, std::vector<int> preds,
                          std::vector<double> confs) {
        ForwardResult r;
        r.active_positions = std::move(active);
        r.predictions = std::move(preds);
        r.confidences = std::move(confs);
        return r;
    };
    // Branch 0 confirms p2; branch 1 mispredicts p3; branch 2 irrelevant.
    ForwardResult b0 = make_result({2, 3, 4}, {12, 13, 14}, {0.97, 0.5, 0.1});
    ForwardResult b1 = make_result({2, 3, 4}, {12, 99, 14}, {0.97, 0.99, 0.1});
    ForwardResult b2 = make_result({2, 3, 4}, {12, 13, 14}, {0.97, 0.99, 0.99});
    std::vector<const ForwardResult*> results{&b0, &b1, &b2, &b2};

    VerificationOutcome out = seh_verify(results, set, 0.95);
    CHECK(out.longest_valid_prefix == 1);
    CHECK(out.committed_branch == 1);
    REQUIRE(out.confirmed.size() == 1);
    CHECK(out.confirmed[0].position == 2);
    CHECK(out.details[0].confirmed);
    CHECK_FALSE(out.details[1].confirmed);
    // Speculation 3 would verify in branch 2, but the chain is already broken.
    CHECK_FALSE(out.details[2].confirmed);

    // Confidence above tau is required, not just prediction match.
    ForwardResult weak = make_result({2, 3, 4}, {12, 13, 14}, {0.90, 0.5, 0.1});
    std::vector<const ForwardResult*> weak_results{&weak, &b1, &b2, &b2};
    CHECK(seh_verify(weak_results, set, 0.95).longest_valid_prefix == 0);

    std::vector<const ForwardResult*> missing{&b0, &b1};
    CHECK_THROWS_AS(seh_verify(missing, set, 0.95), VerificationInputError);
}

TEST_CASE("lac_two_round_route: cold tokens confined to the necessary set") {
    auto model = build_toy_model(toy_config(11));
    StrategyConfig cfg;
    cfg.lac_enabled = true;

    std::map<int, std::vector<double>> hiddens;
    std::map<int, TokenClass> classes;
    Rng rng(5);
    for (int p = 0; p < 6; ++p) {
        std::vector<double> h(16);
        for (double& v : h) v = rng.next_range(-1.0, 1.0);
        hiddens[p] = h;
    }
    classes[0] = TokenClass::newly_accepted;
    classes[1] = TokenClass::hot;
    classes[2] = TokenClass::hot;
    classes[3] = TokenClass::cold;
    classes[4] = TokenClass::cold;
    classes[5] = TokenClass::cached;  // not routed by the rounds

    TwoRoundRouting rounds = lac_two_round_route(*model, 1, hiddens, classes, cfg);
    CHECK_FALSE(rounds.fallback);
    std::set<int> necessary(rounds.necessary_experts.begin(), rounds.necessary_experts.end());

    std::set<int> round1_union;
    int cold_records = 0;
    for (const RoutingRecord& rec : rounds.records) {
        const int p = rec.token_position;
        if (classes.at(p) == TokenClass::cold) {
            ++cold_records;
            CHECK(rec.restricted);
            for (int e : rec.expert_ids) CHECK(necessary.count(e) == 1);
        } else {
            CHECK_FALSE(rec.restricted);
            round1_union.insert(rec.expert_ids.begin(), rec.expert_ids.end());
        }
    }
    CHECK(cold_records == 2);
    CHECK(round1_union == necessary);
    CHECK(rounds.records.size() == 5);  // cached position excluded
}

TEST_CASE("lac rounds: all-hot masked set leaves routing unrestricted") {
    auto model = build_toy_model(toy_config(12));
    StrategyConfig cfg;
    cfg.lac_enabled = true;
    std::map<int, std::vector<double>> hiddens;
    std::map<int, TokenClass> classes;
    Rng rng(6);
    for (int p = 0; p < 4; ++p) {
        std::vector<double> h(16);
        for (double& v : h) v = rng.next_range(-1.0, 1.0);
        hiddens[p] = h;
        classes[p] = TokenClass::hot;
    }
    TwoRoundRouting rounds = lac_two_round_route(*model, 0, hiddens, classes, cfg);
    for (const RoutingRecord& rec : rounds.records) {
        CHECK_FALSE(rec.restricted);
        RoutingRecord direct = model->route(0, hiddens.at(rec.token_position), nullptr,
                                            rec.token_position);
        CHECK(rec == direct);
    }
}

TEST_CASE("lac rounds: empty necessary set falls back to unrestricted cold routing") {
    auto model = build_toy_model(toy_config(13));
    StrategyConfig cfg;
    cfg.lac_enabled = true;
    std::map<int, std::vector<double>> hiddens;
    std::map<int, TokenClass> classes;
    std::vector<double> h(16, 0.1);
    hiddens[0] = h;
    hiddens[1] = h;
    classes[0] = TokenClass::cold;
    classes[1] = TokenClass::cold;
    TwoRoundRouting rounds = lac_two_round_route(*model, 0, hiddens, classes, cfg);
    CHECK(rounds.fallback);
    CHECK(rounds.necessary_experts.empty());
    for (const RoutingRecord& rec : rounds.records) CHECK_FALSE(rec.restricted);
}

TEST_CASE("ablation identity: all strategies off reproduces vanilla byte for byte") {
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        auto model = build_toy_model(toy_config(seed));
        DecodeConfig cfg = decode_config(8, 2);
        StrategyConfig off;  // nothing enabled
        DecodeOutcome vanilla = decode_response(*model, cfg);
        DecodeOutcome accel = decode_response_accel(*model, cfg, off);
        CHECK(vanilla.response == accel.response);
        CHECK(traces_to_jsonl(vanilla.traces) == traces_to_jsonl(accel.traces));
    }
}

TEST_CASE("seh with a single branch is exactly vanilla") {
    auto model = build_toy_model(toy_config(4));
    DecodeConfig cfg = decode_config(8, 1);
    StrategyConfig strat;
    strat.seh_enabled = true;
    strat.num_branches = 1;
    DecodeOutcome vanilla = decode_response(*model, cfg);
    DecodeOutcome accel = decode_response_accel(*model, cfg, strat);
    CHECK(traces_to_jsonl(vanilla.traces) == traces_to_jsonl(accel.traces));
}

TEST_CASE("dcd with refresh interval 1 is exactly vanilla") {
    auto model = build_toy_model(toy_config(5));
    DecodeConfig cfg = decode_config(8, 1);
    StrategyConfig strat;
    strat.dcd_enabled = true;
    strat.refresh_interval = 1;
    DecodeOutcome vanilla = decode_response(*model, cfg);
    DecodeOutcome accel = decode_response_accel(*model, cfg, strat);
    CHECK(traces_to_jsonl(vanilla.traces) == traces_to_jsonl(accel.traces));
}

TEST_CASE("dcd: active set shrinks to masked plus newly accepted, grace is one step") {
    auto model = build_toy_model(toy_config(6));
    DecodeConfig cfg = decode_config(8, 1);
    StrategyConfig strat;
    strat.dcd_enabled = true;
    DecodeOutcome outcome = decode_response_accel(*model, cfg, strat);

    std::map<int, int> accepted_at;
    std::map<int, int> active_after_acceptance;
    for (const StepTrace& t : outcome.traces) {
        for (const AcceptedToken& a : t.accepted) accepted_at[a.position] = t.iteration;
        for (int p : t.active_positions) {
            auto it = accepted_at.find(p);
            if (it != accepted_at.end() && t.iteration > it->second) {
                ++active_after_acceptance[p];
            }
        }
    }
    CHECK(accepted_at.size() == 8);
    for (const auto& [p, count] : active_after_acceptance) CHECK(count == 1);
    CHECK(active_after_acceptance.size() == 8);
}

TEST_CASE("dcd refresh steps recompute the whole block and are flagged") {
    ScriptSpec spec;
    spec.block_size = 6;
    spec.num_layers = 2;
    spec.num_experts = 8;
    spec.experts_per_token = 2;
    spec.vocab_size = 16;
    spec.max_blocks = 1;
    // One acceptance per iteration, left to right.
    for (int it = 0; it < 6; ++it) {
        for (int p = 0; p < 6; ++p) spec.set(0, it, p, 10 + p, p == it ? 0.99 : 0.1);
    }
    auto model = build_scripted_model(spec);
    DecodeConfig cfg = decode_config(6, 1);
    StrategyConfig strat;
    strat.dcd_enabled = true;
    strat.refresh_interval = 4;
    std::vector<StepTrace> traces;
    LayerKVCache cache(model->config().num_layers);
    decode_block_accel(*model, cache, cfg, strat, 0, traces, {});

    // One acceptance per pass: active = masked + one newly accepted, except
    // the flagged refresh pass which recomputes the whole block.
    const std::map<int, size_t> expected_active{{0, 6}, {1, 6}, {2, 5}, {3, 4}, {4, 6}, {5, 2}};
    bool saw_refresh = false;
    for (const StepTrace& t : traces) {
        if (t.commit) continue;
        CHECK(t.active_positions.size() == expected_active.at(t.iteration));
        if (t.iteration == 4) {
            CHECK(t.refresh);
            saw_refresh = true;
        } else {
            CHECK_FALSE(t.refresh);
        }
    }
    CHECK(saw_refresh);
}

TEST_CASE("engineered script: two speculations confirm per iteration") {
    ScriptSpec spec;
    spec.block_size = 6;
    spec.num_layers = 2;
    spec.num_experts = 8;
    spec.experts_per_token = 2;
    spec.vocab_size = 32;
    spec.max_blocks = 1;
    // Iteration 0: positions 0..2 accepted outright; 3 and 4 hot candidates.
    spec.set(0, 0, 0, 20, 0.99).set(0, 0, 1, 21, 0.99).set(0, 0, 2, 22, 0.99);
    spec.set(0, 0, 3, 23, 0.80).set(0, 0, 4, 24, 0.75).set(0, 0, 5, 25, 0.10);
    // Iteration 1: candidates verify (same predictions, above tau); the tail
    // position is naturally accepted in the deepest branch.
    spec.set(0, 1, 3, 23, 0.99).set(0, 1, 4, 24, 0.99).set(0, 1, 5, 25, 0.99);

    auto model = build_scripted_model(spec);
    DecodeConfig cfg = decode_config(6, 1);
    StrategyConfig strat;
    strat.seh_enabled = true;
    strat.num_branches = 3;

    std::vector<StepTrace> traces;
    LayerKVCache cache(model->config().num_layers);
    BlockState state = decode_block_accel(*model, cache, cfg, strat, 0, traces, {});
    CHECK(state.fully_decoded());
    CHECK(state.tokens == std::vector<int>{20, 21, 22, 23, 24, 25});

    int decode_steps = 0;
    int speculated_commits = 0;
    for (const StepTrace& t : traces) {
        if (!t.commit) ++decode_steps;
        for (const AcceptedToken& a : t.accepted) {
            if (a.speculated) ++speculated_commits;
        }
    }
    CHECK(decode_steps <= (6 + 2) / 3);  // ceil(L / 3)
    CHECK(speculated_commits == 2);

    // All num_branches-1 speculations confirmed at iteration 1: at least
    // that many tokens accepted there.
    const StepTrace* it1 = nullptr;
    for (const StepTrace& t : traces) {
        if (!t.commit && t.iteration == 1) it1 = &t;
    }
    REQUIRE(it1 != nullptr);
    REQUIRE(it1->branches.has_value());
    CHECK(it1->branches->confirmed_prefix == 2);
    CHECK(it1->accepted.size() >= 2);
}

TEST_CASE("speculation soundness on the planted backend") {
    PlantedConfig pc;
    std::shared_ptr<const Model> inner(build_toy_model(toy_config(17, 2.0)).release());
    auto model = wrap_planted(inner, pc);
    DecodeConfig cfg = decode_config(8, 2);
    DecodeOutcome outcome = decode_response_accel(*model, cfg, all_strategies());

    int speculated = 0;
    for (const StepTrace& t : outcome.traces) {
        if (!t.branches) continue;
        std::set<int> committed;  // positions committed via speculation this step
        for (const AcceptedToken& a : t.accepted) {
            if (a.speculated) committed.insert(a.position);
        }
        speculated += static_cast<int>(committed.size());
        for (const SpeculationTrace& sp : t.branches->speculations) {
            if (committed.count(sp.position)) {
                CHECK(sp.confirmed);
                CHECK(sp.verify_prediction == sp.token);
                CHECK(sp.verify_confidence > cfg.tau);
            }
        }
    }
    CHECK(speculated > 0);  // the planted schedule must actually exercise seh
    CHECK(outcome.blocks.size() + (outcome.terminated_by == Termination::eos ? 1 : 0) >= 1);
}

TEST_CASE("lac containment holds in full accelerated runs") {
    auto model = build_toy_model(toy_config(23, 2.0));
    DecodeConfig cfg = decode_config(8, 1);
    DecodeOutcome outcome = decode_response_accel(*model, cfg, all_strategies());

    int checked = 0;
    for (const StepTrace& t : outcome.traces) {
        if (t.commit || !t.has_classes) continue;
        for (const LayerTrace& lt : t.layers) {
            if (!lt.necessary) continue;
            std::set<int> necessary(lt.necessary->begin(), lt.necessary->end());
            for (const RoutingRecord& rec : lt.routing) {
                auto cls = t.classes.find(rec.token_position);
                if (cls == t.classes.end() || cls->second != TokenClass::cold) continue;
                if (t.lac_fallback) continue;
                CHECK(rec.restricted);
                for (int e : rec.expert_ids) {
                    CHECK(necessary.count(e) == 1);
                    ++checked;
                }
            }
        }
    }
    CHECK(checked > 0);
}

TEST_CASE("lac never increases the per-layer distinct expert count on a scripted step") {
    ScriptSpec spec;
    spec.block_size = 6;
    spec.num_layers = 1;
    spec.num_experts = 8;
    spec.experts_per_token = 2;
    spec.vocab_size = 16;
    spec.max_blocks = 1;
    // Hot tokens at 0..1 route to {1,2}/{2,3}; cold tokens prefer {5,6},{6,7},{4,5}.
    spec.set(0, 0, 0, 10, 0.8).set_route(0, 0, 0, 0, {1, 2});
    spec.set(0, 0, 1, 11, 0.75).set_route(0, 0, 1, 0, {2, 3});
    spec.set(0, 0, 2, 12, 0.1).set_route(0, 0, 2, 0, {5, 6});
    spec.set(0, 0, 3, 13, 0.1).set_route(0, 0, 3, 0, {6, 7});
    spec.set(0, 0, 4, 14, 0.1).set_route(0, 0, 4, 0, {4, 5});
    spec.set(0, 0, 5, 15, 0.1).set_route(0, 0, 5, 0, {4, 7});
    auto model = build_scripted_model(spec);
    LayerKVCache cache(model->config().num_layers);

    ForwardRequest req;
    req.block_tokens.assign(6, 0);
    for (int p = 0; p < 6; ++p) req.active_positions.push_back(p);
    std::map<int, TokenClass> classes{{0, TokenClass::hot}, {1, TokenClass::hot},
                                      {2, TokenClass::cold}, {3, TokenClass::cold},
                                      {4, TokenClass::cold}, {5, TokenClass::cold}};
    req.classes = classes;

    ForwardRequest unrestricted = req;
    ForwardResult without = model->forward(cache, unrestricted);
    req.lac = true;
    ForwardResult with = model->forward(cache, req);

    auto distinct = [](const ForwardResult& r) {
        std::set<int> s;
        for (const RoutingRecord& rec : r.routing) {
            s.insert(rec.expert_ids.begin(), rec.expert_ids.end());
        }
        return s;
    };
    CHECK(distinct(with).size() <= distinct(without).size());
    CHECK(distinct(with) == std::set<int>{1, 2, 3});  // cold confined to round 1's union
    CHECK(distinct(without) == std::set<int>{1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("lac fallback in a full decode coincides with an empty round-1 set") {
    // force_accept_on_stall off + nothing ever above tau_hot + l_hot=1 (the
    // distance clause is vacuous) leaves no hot and no newly accepted
    // tokens after the first pass: round 1 is empty and cold routing falls
    // back, flagged on the step.
    ScriptSpec spec;
    spec.block_size = 4;
    spec.num_layers = 2;
    spec.num_experts = 8;
    spec.experts_per_token = 2;
    spec.vocab_size = 16;
    spec.max_blocks = 1;
    for (int it = 0; it < 3; ++it) {
        for (int p = 0; p < 4; ++p) spec.set(0, it, p, 10, 0.2);
    }
    auto model = build_scripted_model(spec);
    DecodeConfig cfg = decode_config(4, 1);
    cfg.force_accept_on_stall = false;
    cfg.max_iterations_per_block = 3;
    StrategyConfig strat;
    strat.lac_enabled = true;
    strat.l_hot = 1;
    strat.tau_hot = 0.7;

    std::vector<StepTrace> traces;
    LayerKVCache cache(model->config().num_layers);
    CHECK_THROWS_AS(decode_block_accel(*model, cache, cfg, strat, 0, traces, {}), StallError);
    REQUIRE(traces.size() == 3);
    CHECK_FALSE(traces[0].lac_fallback);  // fresh block seeds a hot token
    for (size_t i = 1; i < traces.size(); ++i) {
        CHECK(traces[i].lac_fallback);
        for (const auto& [p, cls] : traces[i].classes) CHECK(cls == TokenClass::cold);
        for (const LayerTrace& lt : traces[i].layers) {
            for (const RoutingRecord& rec : lt.routing) CHECK_FALSE(rec.restricted);
        }
    }
}

TEST_CASE("default-scale pipeline: block size 32 runs every engine") {
    ModelConfig mc;  // spec-default dimensions
    mc.seed = 2;
    mc.max_blocks = 2;
    mc.clustering_strength = 2.0;
    DecodeConfig cfg;
    cfg.block_size = mc.block_size;
    cfg.max_blocks = 2;

    // Identity still holds at full width.
    auto toy = build_toy_model(mc);
    DecodeOutcome vanilla = decode_response(*toy, cfg);
    DecodeOutcome alloff = decode_response_accel(*toy, cfg, StrategyConfig{});
    CHECK(traces_to_jsonl(vanilla.traces) == traces_to_jsonl(alloff.traces));

    // Full strategies on the planted load: decodes everything, fewer passes.
    std::shared_ptr<const Model> inner(build_toy_model(mc).release());
    auto planted = wrap_planted(inner, PlantedConfig{});
    DecodeOutcome base = decode_response(*planted, cfg);
    DecodeOutcome fast = decode_response_accel(*planted, cfg, all_strategies());
    CHECK(fast.response == base.response);  // planted tokens are context-free
    RunSummary sb = summarize(base.traces, mc.digest());
    RunSummary sf = summarize(fast.traces, mc.digest());
    CHECK(sf.total_tokens == sb.total_tokens);
    CHECK(sf.total_forwards < sb.total_forwards);
    CHECK(sf.apf < sb.apf);
    for (const BlockState& block : fast.blocks) CHECK(block.fully_decoded());
}

TEST_CASE("strategy config validation") {
    StrategyConfig s;
    s.num_branches = 0;
    CHECK_THROWS_AS(s.validate(0.95), ConfigError);
    s = StrategyConfig{};
    s.tau_hot = 0.95;
    CHECK_THROWS_AS(s.validate(0.95), ConfigError);
    s = StrategyConfig{};
    s.l_hot = 0;
    CHECK_THROWS_AS(s.validate(0.95), ConfigError);
    s = StrategyConfig{};
    s.refresh_interval = 0;
    CHECK_THROWS_AS(s.validate(0.95), ConfigError);
}
