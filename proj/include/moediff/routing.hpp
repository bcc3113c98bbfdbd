#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace moediff {

// Per-position decoding class for one iteration. Masked positions are hot or
// cold; decoded positions are newly_accepted for exactly the iteration after
// their acceptance, then cached. Speculated positions are hot candidates a
// branch has planted as inputs.
enum class TokenClass { hot, cold, newly_accepted, cached, speculated };

const char* token_class_name(TokenClass c);

// One token's gate decision at one layer; the unit of all activation
// accounting downstream.
struct RoutingRecord {
    int layer = 0;
    int token_position = 0;  // absolute index across blocks
    std::vector<int> expert_ids;
    std::vector<double> gate_weights;  // nonnegative, sum to 1
    bool restricted = false;           // produced by the second routing round

    bool operator==(const RoutingRecord&) const = default;
};

// Gate decision from raw router logits.
//
// Unrestricted: softmax over all logits, keep the top-k probabilities,
// renormalize the kept weights to sum 1. Restricted: logits outside the
// allowed set are masked out, softmax over the rest, keep
// top-min(k, |allowed|), renormalize, and mark the record restricted.
// Ties always break toward the smaller expert index.
RoutingRecord route_from_logits(std::span<const double> logits, int k,
                                const std::vector<int>* restriction,
                                int layer = 0, int token_position = 0);

struct TwoRoundRouting {
    // Round-1 records (position order) followed by round-2 records.
    std::vector<RoutingRecord> records;
    std::vector<int> necessary_experts;  // sorted, deduplicated
    bool fallback = false;               // round 1 was empty; cold routed unrestricted
};

// Double-round routing for one layer. Round 1 routes the newly accepted,
// hot, and speculated positions unrestricted; the union of their selected
// experts is the necessary set. Round 2 routes cold positions restricted to
// that set. Positions of any other class are not touched here.
//
// `router_logits` maps a block-relative position to its router logits.
// With `aggregate_necessary`, the necessary set is instead the top
// `experts_per_token` experts by total round-1 gate weight (comparison mode).
TwoRoundRouting two_round_route(
    const std::function<std::vector<double>(int)>& router_logits,
    std::span<const int> positions,
    const std::map<int, TokenClass>& classes,
    int experts_per_token, int layer, int abs_base,
    bool aggregate_necessary = false);

}  // namespace moediff
