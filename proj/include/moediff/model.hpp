#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "moediff/kv_cache.hpp"
#include "moediff/matrix.hpp"
#include "moediff/routing.hpp"

namespace moediff {

struct ModelConfig {
    int vocab_size = 64;  // includes the reserved MASK and EOS ids
    int hidden_dim = 32;
    int num_layers = 4;
    int num_experts = 16;
    int experts_per_token = 2;
    int block_size = 32;
    int max_blocks = 4;
    uint64_t seed = 0;
    // Boosts a contiguous band of experts for mask-like hidden states so the
    // routing of masked tokens concentrates spatially. 0 = unbiased.
    double clustering_strength = 0.0;
    int mask_id = 0;
    int eos_id = 1;

    int ff_dim() const { return 4 * hidden_dim; }
    int max_positions() const { return max_blocks * block_size; }
    void validate() const;      // throws ConfigError
    std::string digest() const; // architecture fingerprint for comparisons
};

struct MoELayerWeights {
    Matrix wq, wk, wv, wo;  // hidden_dim x hidden_dim each
    Matrix router;          // hidden_dim x num_experts
    // Per expert: up (hidden_dim x ff_dim), down (ff_dim x hidden_dim).
    std::vector<std::pair<Matrix, Matrix>> experts;
};

// One forward pass over the block currently being decoded.
struct ForwardRequest {
    int block_index = 0;
    int iteration = 0;
    // Post-completion pass that produces committed KV; replay backends must
    // not treat it as a scripted decode iteration.
    bool commit_pass = false;
    std::vector<int> block_tokens;      // block_size ids, mask where undecoded
    std::vector<int> active_positions;  // sorted, unique, block-relative
    int branch_id = 0;
    // Per-position classes for this iteration; consumed by limited
    // activation and recorded by the caller for accounting.
    std::map<int, TokenClass> classes;
    bool lac = false;  // run double-round routing per layer
    bool lac_aggregate_necessary = false;
    // Explicit allowed-expert sets; applies only to cold-flagged positions.
    std::map<int, std::vector<int>> expert_restriction;
    std::vector<int> hidden_snapshot_layers;
};

struct ForwardResult {
    std::vector<int> active_positions;
    Matrix logits;  // one row per active position, vocab_size columns
    std::vector<double> confidences;
    std::vector<int> predictions;
    std::vector<RoutingRecord> routing;  // all layers, round order within layer
    // layer -> block-relative position -> hidden vector (post-layer).
    std::map<int, std::map<int, std::vector<double>>> hidden_snapshots;
    std::vector<std::map<int, KvEntry>> new_kv;  // [layer][position]
    std::map<int, std::vector<int>> necessary_experts;  // layer -> E_A (lac)
    bool lac_fallback = false;

    int index_of(int pos) const;
    double confidence_at(int pos) const;
    int prediction_at(int pos) const;
};

class Model {
  public:
    virtual ~Model() = default;
    virtual const ModelConfig& config() const = 0;
    // Pure with respect to the model: distinct requests may run concurrently
    // against the same weights and a read-only cache view.
    virtual ForwardResult forward(const LayerKVCache& ctx, const ForwardRequest& req) const = 0;
};

// Deterministic toy MoE transformer: learned absolute position embeddings,
// one-head bidirectional attention within the block, causal attention onto
// committed blocks, and a top-k routed expert FFN per layer.
class ToyModel : public Model {
  public:
    explicit ToyModel(const ModelConfig& cfg);

    const ModelConfig& config() const override { return cfg_; }
    ForwardResult forward(const LayerKVCache& ctx, const ForwardRequest& req) const override;

    // Gate decision for one hidden vector at one layer. Unrestricted: softmax
    // over all experts, keep top-k, renormalize. Restricted: softmax over the
    // allowed set, keep top-min(k,|set|), renormalize.
    RoutingRecord route(int layer, std::span<const double> hidden,
                        const std::vector<int>* restriction, int token_position = 0) const;

    std::vector<double> router_logits(int layer, std::span<const double> hidden) const;
    std::vector<double> embed(int token, int absolute_position) const;

    int clustering_band_size() const { return band_size_; }

    const Matrix& token_embedding() const { return token_embedding_; }
    const Matrix& position_embedding() const { return position_embedding_; }
    const Matrix& unembedding() const { return unembedding_; }
    const std::vector<MoELayerWeights>& layers() const { return layers_; }

    bool weights_equal(const ToyModel& other) const;

  private:
    friend void save_model(const ToyModel& model, const std::string& path);
    friend std::unique_ptr<ToyModel> load_model(const std::string& path);

    // Matrices in container declaration order.
    std::vector<Matrix*> matrix_slots();
    std::vector<const Matrix*> matrix_slots() const;
    void refresh_derived();

    ModelConfig cfg_;
    Matrix token_embedding_;     // vocab x hidden
    Matrix position_embedding_;  // max_positions x hidden
    Matrix unembedding_;         // hidden x vocab
    std::vector<MoELayerWeights> layers_;
    std::vector<double> mask_direction_;  // normalized mask embedding
    int band_size_ = 0;
};

std::unique_ptr<ToyModel> build_toy_model(const ModelConfig& cfg);

namespace detail {

// Shared request validation and per-layer routing used by every backend.
void validate_request(const ModelConfig& cfg, const LayerKVCache& ctx,
                      const ForwardRequest& req);

struct LayerRouting {
    std::map<int, RoutingRecord> by_pos;
    std::vector<int> necessary;
    bool rounds_ran = false;
    bool fallback = false;
};

// Routes every active position at one layer: explicit restrictions first,
// then the double rounds when limited activation is on, plain top-k for the
// rest. `logits_for` yields the router logits of a block-relative position.
LayerRouting route_active_layer(const std::function<std::vector<double>(int)>& logits_for,
                                const ForwardRequest& req, int experts_per_token,
                                int layer, int abs_base);

}  // namespace detail

// Little-endian binary container: magic, format version, config header, then
// raw 64-bit floats per matrix in declaration order.
void save_model(const ToyModel& model, const std::string& path);
std::unique_ptr<ToyModel> load_model(const std::string& path);

}  // namespace moediff
