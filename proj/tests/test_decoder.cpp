#include <set>

#include <doctest.h>

#include "moediff/decoder.hpp"
#include "moediff/errors.hpp"
#include "moediff/metrics.hpp"
#include "moediff/scripted.hpp"

using namespace moediff;

namespace {

ScriptSpec base_spec(int block_size = 4) {
    ScriptSpec spec;
    spec.block_size = block_size;
    spec.num_layers = 2;
    spec.num_experts = 8;
    spec.experts_per_token = 2;
    spec.vocab_size = 16;
    spec.max_blocks = 2;
    return spec;
}

DecodeConfig decode_config(int block_size, int max_blocks = 1) {
    DecodeConfig cfg;
    cfg.block_size = block_size;
    cfg.max_blocks = max_blocks;
    return cfg;
}

ModelConfig toy_config(uint64_t seed) {
    ModelConfig mc;
    mc.vocab_size = 32;
    mc.hidden_dim = 16;
    mc.num_layers = 2;
    mc.num_experts = 8;
    mc.experts_per_token = 2;
    mc.block_size = 8;
    mc.max_blocks = 2;
    mc.seed = seed;
    return mc;
}

ForwardResult result_with(const std::vector<int>& active, const std::vector<int>& preds,
                          const std::vector<double>& confs) {
    ForwardResult r;
    r.active_positions = active;
    r.predictions = preds;
    r.confidences = confs;
    return r;
}

}  // namespace

TEST_CASE("accept_step applies the strict threshold") {
    BlockState state = BlockState::fresh(3, 0);
    ForwardResult res = result_with({0, 1, 2}, {10, 11, 12}, {0.99, 0.50, 0.96});
    auto accepted = accept_step(res, state, 0.95, 0);
    REQUIRE(accepted.size() == 2);
    CHECK(accepted[0].position == 0);
    CHECK(accepted[1].position == 2);
    CHECK(state.tokens == std::vector<int>{10, 0, 12});
    CHECK(state.accepted_at[0] == 0);
    CHECK(state.accepted_at[1] == -1);
    CHECK(state.confidence_last[1] == doctest::Approx(0.50));
}

TEST_CASE("accept_step with nothing above tau only updates confidences") {
    BlockState state = BlockState::fresh(3, 0);
    ForwardResult res = result_with({0, 1, 2}, {10, 11, 12}, {0.3, 0.2, 0.1});
    auto accepted = accept_step(res, state, 0.95, 0);
    CHECK(accepted.empty());
    CHECK(state.masked_positions().size() == 3);
    CHECK(state.confidence_last[0] == doctest::Approx(0.3));
}

TEST_CASE("accept_step: confidence exactly tau is not accepted") {
    BlockState state = BlockState::fresh(1, 0);
    ForwardResult res = result_with({0}, {7}, {0.95});
    auto accepted = accept_step(res, state, 0.95, 0);
    CHECK(accepted.empty());
    CHECK(state.masked[0] == 1);
}

TEST_CASE("accept_step demands coverage of every masked position") {
    BlockState state = BlockState::fresh(3, 0);
    ForwardResult res = result_with({0, 1}, {10, 11}, {0.99, 0.99});
    CHECK_THROWS_AS(accept_step(res, state, 0.95, 0), CoverageError);
}

TEST_CASE("vanilla decode: everything above tau finishes in one iteration with TPF = L") {
    ScriptSpec spec = base_spec(4);
    for (int p = 0; p < 4; ++p) spec.set(0, 0, p, 10 + p, 0.99);
    auto model = build_scripted_model(spec);

    std::vector<StepTrace> traces;
    LayerKVCache cache(model->config().num_layers);
    BlockState state = decode_block_vanilla(*model, cache, decode_config(4), 0, traces);
    CHECK(state.fully_decoded());
    CHECK(state.tokens == std::vector<int>{10, 11, 12, 13});

    int decode_steps = 0;
    for (const auto& t : traces) {
        if (!t.commit) ++decode_steps;
    }
    CHECK(decode_steps == 1);
    RunSummary summary = summarize(traces);
    CHECK(summary.tpf == doctest::Approx(4.0));
}

TEST_CASE("vanilla decode: strict left-to-right script accepts in position order") {
    ScriptSpec spec = base_spec(4);
    for (int it = 0; it < 4; ++it) {
        for (int p = 0; p < 4; ++p) {
            spec.set(0, it, p, 10 + p, p == it ? 0.99 : 0.10);
        }
    }
    auto model = build_scripted_model(spec);
    std::vector<StepTrace> traces;
    LayerKVCache cache(model->config().num_layers);
    BlockState state = decode_block_vanilla(*model, cache, decode_config(4), 0, traces);

    CHECK(state.fully_decoded());
    std::vector<std::pair<int, int>> acceptance_order;  // (iteration, position)
    for (const auto& t : traces) {
        for (const auto& a : t.accepted) acceptance_order.emplace_back(t.iteration, a.position);
    }
    REQUIRE(acceptance_order.size() == 4);
    for (int i = 0; i < 4; ++i) {
        CHECK(acceptance_order[i].first == i);
        CHECK(acceptance_order[i].second == i);
    }
    for (int p = 0; p < 4; ++p) CHECK(state.accepted_at[p] == p);
}

TEST_CASE("vanilla decode never touches the intra-block cache") {
    ScriptSpec spec = base_spec(4);
    for (int it = 0; it < 4; ++it) {
        for (int p = 0; p < 4; ++p) spec.set(0, it, p, 10 + p, p == it ? 0.99 : 0.10);
    }
    auto model = build_scripted_model(spec);
    std::vector<StepTrace> traces;
    LayerKVCache cache(model->config().num_layers);
    decode_block_vanilla(*model, cache, decode_config(4), 0, traces);
    for (const auto& t : traces) {
        CHECK(static_cast<int>(t.active_positions.size()) == 4);  // full block every pass
    }
}

TEST_CASE("toy decode is deterministic, trace and all") {
    auto model_a = build_toy_model(toy_config(7));
    auto model_b = build_toy_model(toy_config(7));
    DecodeConfig cfg = decode_config(8, 1);
    DecodeOutcome a = decode_response(*model_a, cfg);
    DecodeOutcome b = decode_response(*model_b, cfg);
    CHECK(a.response == b.response);
    CHECK(traces_to_jsonl(a.traces) == traces_to_jsonl(b.traces));
    for (int t : a.response) CHECK(t != model_a->config().mask_id);
}

TEST_CASE("trace bookkeeping: per-layer expert set equals the union over records") {
    auto model = build_toy_model(toy_config(3));
    DecodeOutcome outcome = decode_response(*model, decode_config(8, 1));
    for (const StepTrace& step : outcome.traces) {
        for (const LayerTrace& lt : step.layers) {
            std::set<int> from_records;
            for (const RoutingRecord& rec : lt.routing) {
                from_records.insert(rec.expert_ids.begin(), rec.expert_ids.end());
            }
            CHECK(std::vector<int>(from_records.begin(), from_records.end()) == lt.experts);
        }
    }
}

TEST_CASE("decode_response stops at EOS and truncates") {
    ScriptSpec spec = base_spec(4);
    spec.set(0, 0, 0, 10, 0.99);
    spec.set(0, 0, 1, 11, 0.99);
    spec.set(0, 0, 2, 12, 0.99);
    spec.set(0, 0, 3, spec.eos_id, 0.99);
    auto model = build_scripted_model(spec);
    DecodeOutcome outcome = decode_response(*model, decode_config(4, 2));
    CHECK(outcome.terminated_by == Termination::eos);
    CHECK(outcome.response == std::vector<int>{10, 11, 12});
}

TEST_CASE("decode_response without EOS runs to max_blocks") {
    ScriptSpec spec = base_spec(4);
    for (int block = 0; block < 2; ++block) {
        for (int p = 0; p < 4; ++p) spec.set(block, 0, p, 10 + p, 0.99);
    }
    auto model = build_scripted_model(spec);
    DecodeOutcome outcome = decode_response(*model, decode_config(4, 2));
    CHECK(outcome.terminated_by == Termination::max_blocks);
    CHECK(outcome.response.size() == 8);
}

TEST_CASE("instrumentation is passive: identical response with and without snapshots") {
    auto model = build_toy_model(toy_config(21));
    DecodeConfig cfg = decode_config(8, 1);
    Instrumentation bare;
    bare.split_accounting = false;
    Instrumentation full;
    full.hidden_snapshot_layers = {0, 1};
    DecodeOutcome a = decode_response(*model, cfg, bare);
    DecodeOutcome b = decode_response(*model, cfg, full);
    CHECK(a.response == b.response);
    CHECK(a.terminated_by == b.terminated_by);
    CHECK(b.traces.front().hidden.count(0) == 1);
    CHECK(a.traces.front().hidden.empty());
}

TEST_CASE("stall without forced acceptance raises, and the outcome reports it") {
    ScriptSpec spec = base_spec(4);
    for (int it = 0; it < 16; ++it) {
        for (int p = 0; p < 4; ++p) spec.set(0, it, p, 10, 0.1);
    }
    auto model = build_scripted_model(spec);
    DecodeConfig cfg = decode_config(4, 1);
    cfg.force_accept_on_stall = false;
    cfg.max_iterations_per_block = 8;

    std::vector<StepTrace> traces;
    LayerKVCache cache(model->config().num_layers);
    CHECK_THROWS_AS(decode_block_vanilla(*model, cache, cfg, 0, traces), StallError);

    DecodeOutcome outcome = decode_response(*model, cfg);
    CHECK(outcome.terminated_by == Termination::stall);
    CHECK(outcome.response.empty());
}

TEST_CASE("forced acceptance keeps stalled decodes moving and is flagged") {
    ScriptSpec spec = base_spec(4);
    for (int it = 0; it < 4; ++it) {
        for (int p = 0; p < 4; ++p) {
            spec.set(0, it, p, 10 + p, p == (3 - it) ? 0.5 : 0.1);  // nothing above tau
        }
    }
    auto model = build_scripted_model(spec);
    std::vector<StepTrace> traces;
    LayerKVCache cache(model->config().num_layers);
    BlockState state = decode_block_vanilla(*model, cache, decode_config(4), 0, traces);
    CHECK(state.fully_decoded());
    int forced = 0;
    for (const auto& t : traces) {
        for (const auto& a : t.accepted) {
            if (a.forced) ++forced;
        }
    }
    CHECK(forced == 4);  // every acceptance was the stall fallback
}

TEST_CASE("acceptance is threshold-consistent except flagged forced tokens") {
    auto model = build_toy_model(toy_config(13));
    DecodeConfig cfg = decode_config(8, 2);
    DecodeOutcome outcome = decode_response(*model, cfg);
    int checked = 0;
    for (const StepTrace& t : outcome.traces) {
        for (const AcceptedToken& a : t.accepted) {
            ++checked;
            if (!a.forced) CHECK(a.confidence > cfg.tau);
            // The recorded confidence is the one observed at acceptance.
            CHECK(a.confidence == t.confidences.at(a.position));
        }
    }
    CHECK(checked == 16);
}

TEST_CASE("EOS accepted mid-block: the block still completes, then truncation applies") {
    ScriptSpec spec = base_spec(4);
    // Position 1 becomes EOS at iteration 0; 0, 2, 3 decode over later passes.
    spec.set(0, 0, 0, 10, 0.99);
    spec.set(0, 0, 1, spec.eos_id, 0.99);
    spec.set(0, 0, 2, 12, 0.10);
    spec.set(0, 0, 3, 13, 0.10);
    spec.set(0, 1, 2, 12, 0.99);
    spec.set(0, 1, 3, 13, 0.10);
    spec.set(0, 2, 3, 13, 0.99);
    auto model = build_scripted_model(spec);
    DecodeOutcome outcome = decode_response(*model, decode_config(4, 2));

    CHECK(outcome.terminated_by == Termination::eos);
    CHECK(outcome.response == std::vector<int>{10});  // truncated before EOS
    REQUIRE(outcome.blocks.size() == 1);
    CHECK(outcome.blocks[0].fully_decoded());  // positions after EOS still decoded
    CHECK(outcome.blocks[0].tokens == std::vector<int>{10, 1, 12, 13});
    int decode_steps = 0;
    for (const auto& t : outcome.traces) {
        if (!t.commit) ++decode_steps;
    }
    CHECK(decode_steps == 3);
}

TEST_CASE("monotone unmasking: decoded set only grows") {
    auto model = build_toy_model(toy_config(31));
    DecodeOutcome outcome = decode_response(*model, decode_config(8, 1));
    std::set<int> decoded;
    for (const StepTrace& t : outcome.traces) {
        if (t.commit) continue;
        // masked at step start must be the complement of decoded so far
        for (int p : t.masked_positions) CHECK(decoded.count(p) == 0);
        for (const AcceptedToken& a : t.accepted) {
            CHECK(decoded.insert(a.position).second);  // never re-accepted
        }
    }
    CHECK(decoded.size() == 8);
}

TEST_CASE("cross-block causality: block 1 content never alters block 0 traces") {
    ScriptSpec spec_a = base_spec(4);
    ScriptSpec spec_b = base_spec(4);
    for (int p = 0; p < 4; ++p) {
        spec_a.set(0, 0, p, 10 + p, 0.99);
        spec_b.set(0, 0, p, 10 + p, 0.99);
        spec_a.set(1, 0, p, 5 + p, 0.99);
        spec_b.set(1, 0, p, 9 - p, 0.99);  // block 1 differs
    }
    auto model_a = build_scripted_model(spec_a);
    auto model_b = build_scripted_model(spec_b);
    DecodeOutcome a = decode_response(*model_a, decode_config(4, 2));
    DecodeOutcome b = decode_response(*model_b, decode_config(4, 2));

    auto block0 = [](const DecodeOutcome& o) {
        std::vector<StepTrace> out;
        for (const auto& t : o.traces) {
            if (t.block_index == 0) out.push_back(t);
        }
        return traces_to_jsonl(out);
    };
    CHECK(block0(a) == block0(b));
    CHECK(a.response != b.response);
}
