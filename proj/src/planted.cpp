#include "moediff/planted.hpp"

#include <algorithm>
#include <cmath>

#include "moediff/errors.hpp"
#include "moediff/rng.hpp"

namespace moediff {

PlantedModel::PlantedModel(std::shared_ptr<const Model> inner, PlantedConfig planted)
    : inner_(std::move(inner)), planted_(planted) {
    if (!inner_) throw ArgumentError("planted wrapper needs an inner model");
    if (planted_.jitter < 0.0) throw ArgumentError("planted jitter must be nonnegative");
}

double PlantedModel::scheduled_confidence(int block_index, int position, int rank) const {
    double base;
    if (rank == 0) {
        base = planted_.frontier_confidence;
    } else if (rank == 1) {
        base = planted_.hot_confidence;
    } else {
        base = planted_.hot_confidence * std::pow(planted_.decay, rank - 1);
    }
    const double u = mix_unit(config().seed ^ planted_.salt, 0xC0F1,
                              static_cast<uint64_t>(block_index),
                              (static_cast<uint64_t>(position) << 8) |
                                  static_cast<uint64_t>(std::min(rank, 255)));
    const double c = base + planted_.jitter * (2.0 * u - 1.0);
    return std::clamp(c, 1e-6, 1.0 - 1e-6);
}

int PlantedModel::planted_token(int block_index, int position) const {
    const ModelConfig& cfg = config();
    // Any non-mask id, eos included, so responses can terminate naturally.
    const uint64_t h = mix64(cfg.seed ^ planted_.salt, 0x70CE,
                             static_cast<uint64_t>(block_index),
                             static_cast<uint64_t>(position));
    int token = static_cast<int>(h % static_cast<uint64_t>(cfg.vocab_size - 1));
    if (token >= cfg.mask_id) ++token;
    return token;
}

ForwardResult PlantedModel::forward(const LayerKVCache& ctx, const ForwardRequest& req) const {
    ForwardResult res = inner_->forward(ctx, req);
    if (req.commit_pass) return res;
    const ModelConfig& cfg = config();

    int rank = 0;
    std::vector<int> rank_of(req.block_tokens.size(), -1);
    for (size_t p = 0; p < req.block_tokens.size(); ++p) {
        if (req.block_tokens[p] == cfg.mask_id) rank_of[p] = rank++;
    }

    for (size_t i = 0; i < res.active_positions.size(); ++i) {
        const int p = res.active_positions[i];
        if (rank_of[p] < 0) continue;  // decoded or speculated input: leave as computed
        const double conf = scheduled_confidence(req.block_index, p, rank_of[p]);
        const int pred = planted_token(req.block_index, p);
        res.predictions[i] = pred;
        res.confidences[i] = conf;
        auto row = res.logits.row(static_cast<int>(i));
        std::fill(row.begin(), row.end(), 0.0);
        row[pred] = std::log(conf * (cfg.vocab_size - 1) / (1.0 - conf));
    }
    return res;
}

std::unique_ptr<PlantedModel> wrap_planted(std::shared_ptr<const Model> inner,
                                           PlantedConfig planted) {
    return std::make_unique<PlantedModel>(std::move(inner), planted);
}

}  // namespace moediff
