#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "moediff/model.hpp"

namespace moediff {

// One scripted (block, iteration, position) entry. Router behavior is
// scripted as raw logits so restricted routing stays well defined; the
// expert-list shorthand expands to logits that pin the listed experts.
struct ScriptStep {
    int prediction = 0;
    double confidence = 0.0;
    // layer -> router logits (num_experts entries). Missing layers fall back
    // to all-zero logits (ties resolve to the smallest expert ids).
    std::map<int, std::vector<double>> route_logits;
};

struct ScriptSpec {
    int block_size = 8;
    int num_layers = 2;
    int num_experts = 8;
    int experts_per_token = 2;
    int vocab_size = 16;
    int hidden_dim = 4;
    int max_blocks = 0;  // 0 = highest scripted block + 1
    int filler_token = 2;
    int mask_id = 0;
    int eos_id = 1;

    // block -> iteration -> position -> step.
    std::map<int, std::map<int, std::map<int, ScriptStep>>> steps;

    // Builder conveniences used heavily by tests.
    ScriptSpec& set(int block, int iteration, int position, int prediction,
                    double confidence);
    ScriptSpec& set_route(int block, int iteration, int position, int layer,
                          std::vector<int> expert_ids);
    ScriptSpec& set_route_logits(int block, int iteration, int position, int layer,
                                 std::vector<double> logits);

    int scripted_iterations(int block) const;
    void validate() const;  // throws ConfigError
    ModelConfig model_config() const;

    // Logits that make `expert_ids` the routing choice in listed order.
    std::vector<double> expert_list_logits(const std::vector<int>& expert_ids) const;
};

// Deterministic replay backend. Forward echoes the scripted predictions and
// confidences for covered active positions; uncovered positions get the
// filler token at confidence 0. Key/values and hidden snapshots are pure
// functions of (layer, position, token), so cache splits are exactly
// transparent on this backend.
class ScriptedModel : public Model {
  public:
    explicit ScriptedModel(ScriptSpec spec);

    const ModelConfig& config() const override { return cfg_; }
    const ScriptSpec& spec() const { return spec_; }
    ForwardResult forward(const LayerKVCache& ctx, const ForwardRequest& req) const override;

  private:
    ScriptSpec spec_;
    ModelConfig cfg_;
};

std::unique_ptr<ScriptedModel> build_scripted_model(ScriptSpec spec);

// Structured text form (documented in docs/config_format.md).
ScriptSpec parse_script(const std::string& text);
ScriptSpec load_script(const std::string& path);

}  // namespace moediff
