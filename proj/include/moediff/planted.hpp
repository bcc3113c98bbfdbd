#pragma once

#include <memory>

#include "moediff/model.hpp"

namespace moediff {

// Controls the planted near-autoregressive acceptance schedule. Confidences
// depend on a masked position's rank behind the leftmost masked position:
// rank 0 sits above the acceptance threshold, rank 1 in the hot band, and
// deeper ranks decay toward zero.
struct PlantedConfig {
    double frontier_confidence = 0.97;  // rank 0
    double hot_confidence = 0.80;       // rank 1
    double decay = 0.45;                // multiplicative per extra rank
    double jitter = 0.015;              // deterministic +/- perturbation
    uint64_t salt = 0;
};

// Wraps a real backend (normally the toy model) and overrides predictions and
// confidences of masked positions with a schedule that makes acceptance march
// near-autoregressively. Hidden states, routing, and key/values still come
// from the inner model, so expert-activation behavior is untouched. Both the
// schedule and the planted tokens are pure functions of (seed, block,
// position, rank): branch forwards stay order-independent.
class PlantedModel : public Model {
  public:
    PlantedModel(std::shared_ptr<const Model> inner, PlantedConfig planted);

    const ModelConfig& config() const override { return inner_->config(); }
    ForwardResult forward(const LayerKVCache& ctx, const ForwardRequest& req) const override;

    double scheduled_confidence(int block_index, int position, int rank) const;
    int planted_token(int block_index, int position) const;

  private:
    std::shared_ptr<const Model> inner_;
    PlantedConfig planted_;
};

std::unique_ptr<PlantedModel> wrap_planted(std::shared_ptr<const Model> inner,
                                           PlantedConfig planted = {});

}  // namespace moediff
