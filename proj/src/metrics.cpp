#include "moediff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

#include "moediff/errors.hpp"

namespace moediff {

RunSummary summarize(const std::vector<StepTrace>& traces,
                     const std::string& config_digest) {
    if (traces.empty()) throw ArgumentError("summarize needs at least one trace step");
    RunSummary s;
    s.config_digest = config_digest;
    s.num_layers = static_cast<int>(traces.front().layers.size());

    double layer_mean_sum = 0.0;
    for (const StepTrace& step : traces) {
        double experts_this_step = 0.0;
        for (const LayerTrace& lt : step.layers) {
            experts_this_step += static_cast<double>(lt.experts.size());
        }
        s.expert_activation_sum += experts_this_step;
        s.active_slot_sum += static_cast<double>(step.layers.size()) *
                             static_cast<double>(step.active_positions.size()) *
                             static_cast<double>(step.branch_count);
        ++s.total_steps;
        if (step.commit) continue;
        ++s.total_forwards;
        s.total_tokens += static_cast<long>(step.accepted.size());
        if (!step.layers.empty()) {
            layer_mean_sum += experts_this_step / static_cast<double>(step.layers.size());
        }
    }
    if (s.total_forwards == 0) {
        throw ArgumentError("summarize needs at least one decode (non-commit) step");
    }
    s.apf = layer_mean_sum / static_cast<double>(s.total_forwards);
    s.tpf = static_cast<double>(s.total_tokens) / static_cast<double>(s.total_forwards);
    if (s.total_tokens == 0) {
        s.apt = std::numeric_limits<double>::quiet_NaN();
        s.apt_defined = false;
        s.warning = "no tokens accepted: APT undefined, reported as nan";
    } else {
        s.apt = s.apf / s.tpf;
    }
    return s;
}

CostModel CostModel::defaults_for(const ModelConfig& cfg) {
    CostModel c;
    // Parameter traffic per activated expert; per-token attention compute;
    // embedding/unembedding traffic shared by every pass.
    c.expert_param_cost = 2.0 * cfg.hidden_dim * cfg.ff_dim();
    c.attention_token_cost = 4.0 * cfg.hidden_dim * cfg.hidden_dim;
    c.shared_cost = 2.0 * cfg.vocab_size * cfg.hidden_dim;
    return c;
}

void CostModel::validate() const {
    if (expert_param_cost < 0.0 || attention_token_cost < 0.0 || shared_cost < 0.0) {
        throw ConfigError("cost model coefficients must be nonnegative");
    }
}

double estimate_cost_units(const RunSummary& summary, const CostModel& cost) {
    cost.validate();
    return cost.shared_cost * static_cast<double>(summary.total_steps) +
           cost.expert_param_cost * summary.expert_activation_sum +
           cost.attention_token_cost * summary.active_slot_sum;
}

SpeedupReport estimate_cost(const RunSummary& summary, const RunSummary& baseline,
                            const CostModel& cost) {
    if (!summary.config_digest.empty() && !baseline.config_digest.empty() &&
        summary.config_digest != baseline.config_digest) {
        throw ComparisonError("cost comparison across different model configs: " +
                              summary.config_digest + " vs " + baseline.config_digest);
    }
    SpeedupReport r;
    r.cost_units = estimate_cost_units(summary, cost);
    r.baseline_cost_units = estimate_cost_units(baseline, cost);
    r.speedup = r.baseline_cost_units / r.cost_units;
    return r;
}

std::map<int, std::vector<TimelinePoint>> expert_timeline(
    const std::vector<StepTrace>& traces, const std::vector<int>& layers) {
    std::map<int, std::vector<TimelinePoint>> out;
    for (int layer : layers) out[layer] = {};
    for (const StepTrace& step : traces) {
        if (step.commit) continue;
        for (int layer : layers) {
            const LayerTrace* lt = nullptr;
            for (const LayerTrace& candidate : step.layers) {
                if (candidate.layer == layer) {
                    lt = &candidate;
                    break;
                }
            }
            if (lt == nullptr) {
                throw ArgumentError("layer " + std::to_string(layer) + " absent from trace");
            }
            if (!lt->experts.empty() && lt->experts_decoded.empty() &&
                lt->experts_masked.empty()) {
                throw InstrumentationError(
                    "trace lacks split accounting; rerun with split_accounting on");
            }
            TimelinePoint pt;
            pt.block_index = step.block_index;
            pt.iteration = step.iteration;
            pt.total_experts = static_cast<int>(lt->experts.size());
            pt.decoded_contrib = static_cast<int>(lt->experts_decoded.size());
            pt.masked_contrib = static_cast<int>(lt->experts_masked.size());
            out[layer].push_back(pt);
        }
    }
    return out;
}

HistogramSeries routing_histogram(const StepTrace& step, int layer) {
    const LayerTrace* lt = nullptr;
    for (const LayerTrace& candidate : step.layers) {
        if (candidate.layer == layer) {
            lt = &candidate;
            break;
        }
    }
    if (lt == nullptr) {
        throw ArgumentError("layer " + std::to_string(layer) + " absent from step trace");
    }
    std::set<int> masked(step.masked_positions.begin(), step.masked_positions.end());
    HistogramSeries series;
    for (const RoutingRecord& rec : lt->routing) {
        auto& counts = masked.count(rec.token_position) ? series.masked : series.decoded;
        for (int e : rec.expert_ids) ++counts[e];
    }
    return series;
}

HiddenSimilarity hidden_similarity(const std::vector<StepTrace>& traces, int layer,
                                   int block_index) {
    HiddenSimilarity out;
    // Steps of the block in iteration order (commit pass included as final).
    std::vector<const StepTrace*> steps;
    for (const StepTrace& s : traces) {
        if (s.block_index == block_index) steps.push_back(&s);
    }
    if (steps.empty()) throw ArgumentError("no trace steps for block " +
                                           std::to_string(block_index));
    std::sort(steps.begin(), steps.end(), [](const StepTrace* a, const StepTrace* b) {
        if (a->iteration != b->iteration) return a->iteration < b->iteration;
        return a->commit < b->commit;
    });
    bool any_snapshot = false;
    for (const StepTrace* s : steps) {
        if (s->hidden.count(layer)) any_snapshot = true;
        for (const AcceptedToken& a : s->accepted) out.accepted_at[a.position] = s->iteration;
    }
    if (!any_snapshot) {
        throw InstrumentationError("no hidden snapshots recorded for layer " +
                                   std::to_string(layer));
    }
    for (size_t i = 0; i + 1 < steps.size(); ++i) {
        auto cur = steps[i]->hidden.find(layer);
        auto next = steps[i + 1]->hidden.find(layer);
        if (cur == steps[i]->hidden.end() || next == steps[i + 1]->hidden.end()) continue;
        for (const auto& [pos, vec] : cur->second) {
            auto jt = next->second.find(pos);
            if (jt == next->second.end()) continue;
            out.similarity[pos][steps[i]->iteration] = cosine_similarity(vec, jt->second);
        }
    }
    return out;
}

std::string csv_real(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::string timeline_csv(const std::vector<StepTrace>& traces,
                         const std::vector<int>& layers) {
    auto timeline = expert_timeline(traces, layers);
    std::string out = "layer,block,iteration,total_experts,decoded_contrib,masked_contrib\n";
    for (const auto& [layer, series] : timeline) {
        for (const TimelinePoint& pt : series) {
            out += std::to_string(layer) + "," + std::to_string(pt.block_index) + "," +
                   std::to_string(pt.iteration) + "," + std::to_string(pt.total_experts) + "," +
                   std::to_string(pt.decoded_contrib) + "," +
                   std::to_string(pt.masked_contrib) + "\n";
        }
    }
    return out;
}

std::string histogram_csv(const std::vector<StepTrace>& traces) {
    std::string out = "block,iteration,layer,expert,decoded_count,masked_count\n";
    for (const StepTrace& step : traces) {
        if (step.commit) continue;
        for (const LayerTrace& lt : step.layers) {
            HistogramSeries series = routing_histogram(step, lt.layer);
            std::set<int> experts;
            for (const auto& [e, c] : series.decoded) experts.insert(e);
            for (const auto& [e, c] : series.masked) experts.insert(e);
            for (int e : experts) {
                const long decoded = series.decoded.count(e) ? series.decoded.at(e) : 0;
                const long masked = series.masked.count(e) ? series.masked.at(e) : 0;
                out += std::to_string(step.block_index) + "," + std::to_string(step.iteration) +
                       "," + std::to_string(lt.layer) + "," + std::to_string(e) + "," +
                       std::to_string(decoded) + "," + std::to_string(masked) + "\n";
            }
        }
    }
    return out;
}

std::string similarity_csv(const std::vector<StepTrace>& traces,
                           const std::vector<int>& layers) {
    std::set<int> blocks;
    for (const StepTrace& s : traces) blocks.insert(s.block_index);
    std::string out = "layer,block,position,iteration,similarity,accepted_at\n";
    for (int layer : layers) {
        for (int block : blocks) {
            HiddenSimilarity sim = hidden_similarity(traces, layer, block);
            for (const auto& [pos, series] : sim.similarity) {
                const int accepted =
                    sim.accepted_at.count(pos) ? sim.accepted_at.at(pos) : -1;
                for (const auto& [iteration, value] : series) {
                    out += std::to_string(layer) + "," + std::to_string(block) + "," +
                           std::to_string(pos) + "," + std::to_string(iteration) + "," +
                           csv_real(value) + "," + std::to_string(accepted) + "\n";
                }
            }
        }
    }
    return out;
}

}  // namespace moediff
