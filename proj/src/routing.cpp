#include "moediff/routing.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "moediff/errors.hpp"
#include "moediff/matrix.hpp"

namespace moediff {

const char* token_class_name(TokenClass c) {
    switch (c) {
        case TokenClass::hot: return "hot";
        case TokenClass::cold: return "cold";
        case TokenClass::newly_accepted: return "newly_accepted";
        case TokenClass::cached: return "cached";
        case TokenClass::speculated: return "speculated";
    }
    return "?";
}

RoutingRecord route_from_logits(std::span<const double> logits, int k,
                                const std::vector<int>* restriction,
                                int layer, int token_position) {
    const int num_experts = static_cast<int>(logits.size());
    if (num_experts == 0) {
        throw ArgumentError("route_from_logits: empty logits");
    }
    std::vector<int> allowed;
    if (restriction != nullptr) {
        if (restriction->empty()) {
            throw ArgumentError("route_from_logits: empty expert restriction");
        }
        allowed = *restriction;
        std::sort(allowed.begin(), allowed.end());
        allowed.erase(std::unique(allowed.begin(), allowed.end()), allowed.end());
        for (int e : allowed) {
            if (e < 0 || e >= num_experts) {
                throw ArgumentError("route_from_logits: restriction id " + std::to_string(e) +
                                    " out of range");
            }
        }
    } else {
        allowed.resize(num_experts);
        for (int e = 0; e < num_experts; ++e) allowed[e] = e;
    }

    // Softmax over the allowed logits only (max-subtracted).
    double mx = logits[allowed[0]];
    for (int e : allowed) mx = std::max(mx, logits[e]);
    std::vector<double> probs(allowed.size());
    double sum = 0.0;
    for (size_t i = 0; i < allowed.size(); ++i) {
        probs[i] = std::exp(logits[allowed[i]] - mx);
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;

    const int keep = std::min<int>(k, static_cast<int>(allowed.size()));
    std::vector<int> picked = top_k(probs, keep);
    std::sort(picked.begin(), picked.end(), [&](int a, int b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return allowed[a] < allowed[b];
    });

    RoutingRecord rec;
    rec.layer = layer;
    rec.token_position = token_position;
    rec.restricted = restriction != nullptr;
    double kept = 0.0;
    for (int i : picked) kept += probs[i];
    for (int i : picked) {
        rec.expert_ids.push_back(allowed[i]);
        rec.gate_weights.push_back(probs[i] / kept);
    }
    return rec;
}

TwoRoundRouting two_round_route(
    const std::function<std::vector<double>(int)>& router_logits,
    std::span<const int> positions,
    const std::map<int, TokenClass>& classes,
    int experts_per_token, int layer, int abs_base,
    bool aggregate_necessary) {
    std::vector<int> round1;
    std::vector<int> cold;
    for (int p : positions) {
        auto it = classes.find(p);
        if (it == classes.end()) continue;
        switch (it->second) {
            case TokenClass::newly_accepted:
            case TokenClass::hot:
            case TokenClass::speculated:
                round1.push_back(p);
                break;
            case TokenClass::cold:
                cold.push_back(p);
                break;
            case TokenClass::cached:
                break;
        }
    }

    TwoRoundRouting out;
    std::map<int, double> expert_mass;
    for (int p : round1) {
        auto logits = router_logits(p);
        RoutingRecord rec = route_from_logits(logits, experts_per_token, nullptr,
                                              layer, abs_base + p);
        for (size_t i = 0; i < rec.expert_ids.size(); ++i) {
            expert_mass[rec.expert_ids[i]] += rec.gate_weights[i];
        }
        out.records.push_back(std::move(rec));
    }

    if (aggregate_necessary && !expert_mass.empty()) {
        std::vector<int> ids;
        std::vector<double> mass;
        for (const auto& [e, m] : expert_mass) {
            ids.push_back(e);
            mass.push_back(m);
        }
        for (int i : top_k(mass, std::min<int>(experts_per_token,
                                               static_cast<int>(mass.size())))) {
            out.necessary_experts.push_back(ids[i]);
        }
        std::sort(out.necessary_experts.begin(), out.necessary_experts.end());
    } else {
        for (const auto& [e, m] : expert_mass) out.necessary_experts.push_back(e);
    }

    if (out.necessary_experts.empty()) {
        out.fallback = true;
        for (int p : cold) {
            out.records.push_back(route_from_logits(router_logits(p), experts_per_token,
                                                    nullptr, layer, abs_base + p));
        }
        return out;
    }

    for (int p : cold) {
        out.records.push_back(route_from_logits(router_logits(p), experts_per_token,
                                                &out.necessary_experts, layer,
                                                abs_base + p));
    }
    return out;
}

}  // namespace moediff
