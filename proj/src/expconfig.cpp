#include "moediff/expconfig.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "moediff/errors.hpp"
#include "moediff/scripted.hpp"

namespace moediff {

const char* engine_name(Engine e) {
    return e == Engine::vanilla ? "vanilla" : "accel";
}

CostModel ExperimentConfig::cost_model() const {
    CostModel c = CostModel::defaults_for(model);
    if (expert_param_cost) c.expert_param_cost = *expert_param_cost;
    if (attention_token_cost) c.attention_token_cost = *attention_token_cost;
    if (shared_cost) c.shared_cost = *shared_cost;
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    model.validate();
    decode.validate();
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (variants.empty()) throw ConfigError("at least one variant is required");
    for (const auto& v : variants) {
        if (v.engine == Engine::accel) v.strategy.validate(decode.tau);
    }
    for (int layer : instrumentation.hidden_snapshot_layers) {
        if (layer < 0 || layer >= model.num_layers) {
            throw ConfigError("hidden_snapshot_layers entry out of range");
        }
    }
    if (model_kind == ModelKind::scripted && script_path.empty()) {
        throw ConfigError("scripted model requires script = <path>");
    }
    cost_model();
}

namespace {

[[noreturn]] void fail(int line_no, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line_no) + ": " + msg);
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    std::string last = trim(cur);
    if (!last.empty() || !out.empty()) out.push_back(last);
    while (!out.empty() && out.back().empty()) out.pop_back();
    return out;
}

int to_int(const std::string& v, int line_no) {
    try {
        size_t used = 0;
        int x = std::stoi(v, &used);
        if (used != v.size()) fail(line_no, "trailing characters after integer '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        fail(line_no, "expected integer, got '" + v + "'");
    }
}

uint64_t to_u64(const std::string& v, int line_no) {
    try {
        size_t used = 0;
        unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) fail(line_no, "trailing characters after integer '" + v + "'");
        return static_cast<uint64_t>(x);
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        fail(line_no, "expected unsigned integer, got '" + v + "'");
    }
}

double to_real(const std::string& v, int line_no) {
    try {
        size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) fail(line_no, "trailing characters after number '" + v + "'");
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        fail(line_no, "expected number, got '" + v + "'");
    }
}

bool to_bool(const std::string& v, int line_no) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(line_no, "expected boolean (true/false), got '" + v + "'");
}

std::optional<int> to_interval(const std::string& v, int line_no) {
    if (v == "none" || v == "free") return std::nullopt;
    return to_int(v, line_no);
}

bool apply_strategy_key(StrategyConfig& s, const std::string& key, const std::string& value,
                        int line_no) {
    if (key == "dcd_enabled") {
        s.dcd_enabled = to_bool(value, line_no);
    } else if (key == "refresh_interval") {
        s.refresh_interval = to_interval(value, line_no);
    } else if (key == "seh_enabled") {
        s.seh_enabled = to_bool(value, line_no);
    } else if (key == "num_branches") {
        s.num_branches = to_int(value, line_no);
    } else if (key == "tau_hot") {
        s.tau_hot = to_real(value, line_no);
    } else if (key == "l_hot") {
        s.l_hot = to_int(value, line_no);
    } else if (key == "lac_enabled") {
        s.lac_enabled = to_bool(value, line_no);
    } else if (key == "lac_aggregate_necessary") {
        s.lac_aggregate_necessary = to_bool(value, line_no);
    } else {
        return false;
    }
    return true;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text,
                                         const std::string& base_dir) {
    ExperimentConfig cfg;
    cfg.decode.block_size = 0;  // 0 = inherit from model
    cfg.decode.max_blocks = 0;

    std::istringstream is(text);
    std::string raw;
    int line_no = 0;
    std::string section;
    std::string section_arg;
    VariantConfig* variant = nullptr;
    std::vector<std::string> variant_order;

    auto find_variant = [&](const std::string& name) -> VariantConfig* {
        for (auto& v : cfg.variants) {
            if (v.name == name) return &v;
        }
        return nullptr;
    };

    while (std::getline(is, raw)) {
        ++line_no;
        std::string line = raw;
        if (auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') fail(line_no, "unterminated section header");
            std::string inner = trim(line.substr(1, line.size() - 2));
            auto space = inner.find(' ');
            section = space == std::string::npos ? inner : trim(inner.substr(0, space));
            section_arg = space == std::string::npos ? "" : trim(inner.substr(space + 1));
            variant = nullptr;
            if (section == "variant") {
                if (section_arg.empty()) fail(line_no, "[variant] needs a name");
                if (find_variant(section_arg) != nullptr) {
                    fail(line_no, "duplicate variant '" + section_arg + "'");
                }
                VariantConfig v;
                v.name = section_arg;
                cfg.variants.push_back(v);
                variant = &cfg.variants.back();
            } else if (section != "model" && section != "decode" &&
                       section != "instrumentation" && section != "run" &&
                       section != "cost" && section != "ablate" && section != "sweep") {
                fail(line_no, "unknown section '" + section + "'");
            }
            continue;
        }

        auto eq = line.find('=');
        if (eq == std::string::npos) fail(line_no, "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail(line_no, "empty key");

        if (section.empty()) {
            if (key == "version") {
                if (to_int(value, line_no) != 1) fail(line_no, "unsupported config version");
            } else {
                fail(line_no, "unknown top-level key '" + key + "'");
            }
        } else if (section == "model") {
            if (key == "kind") {
                if (value == "toy") {
                    cfg.model_kind = ModelKind::toy;
                } else if (value == "planted") {
                    cfg.model_kind = ModelKind::planted;
                } else if (value == "scripted") {
                    cfg.model_kind = ModelKind::scripted;
                } else {
                    fail(line_no, "unknown model kind '" + value + "'");
                }
            } else if (key == "vocab_size") {
                cfg.model.vocab_size = to_int(value, line_no);
            } else if (key == "hidden_dim") {
                cfg.model.hidden_dim = to_int(value, line_no);
            } else if (key == "num_layers") {
                cfg.model.num_layers = to_int(value, line_no);
            } else if (key == "num_experts") {
                cfg.model.num_experts = to_int(value, line_no);
            } else if (key == "experts_per_token") {
                cfg.model.experts_per_token = to_int(value, line_no);
            } else if (key == "block_size") {
                cfg.model.block_size = to_int(value, line_no);
            } else if (key == "max_blocks") {
                cfg.model.max_blocks = to_int(value, line_no);
            } else if (key == "seed") {
                cfg.model.seed = to_u64(value, line_no);
            } else if (key == "clustering_strength") {
                cfg.model.clustering_strength = to_real(value, line_no);
            } else if (key == "mask_id") {
                cfg.model.mask_id = to_int(value, line_no);
            } else if (key == "eos_id") {
                cfg.model.eos_id = to_int(value, line_no);
            } else if (key == "script") {
                cfg.script_path = (std::filesystem::path(base_dir) / value).string();
            } else if (key == "frontier_confidence") {
                cfg.planted.frontier_confidence = to_real(value, line_no);
            } else if (key == "hot_confidence") {
                cfg.planted.hot_confidence = to_real(value, line_no);
            } else if (key == "decay") {
                cfg.planted.decay = to_real(value, line_no);
            } else if (key == "jitter") {
                cfg.planted.jitter = to_real(value, line_no);
            } else if (key == "salt") {
                cfg.planted.salt = to_u64(value, line_no);
            } else {
                fail(line_no, "unknown [model] key '" + key + "'");
            }
        } else if (section == "decode") {
            if (key == "tau") {
                cfg.decode.tau = to_real(value, line_no);
            } else if (key == "block_size") {
                cfg.decode.block_size = to_int(value, line_no);
            } else if (key == "max_blocks") {
                cfg.decode.max_blocks = to_int(value, line_no);
            } else if (key == "max_iterations_per_block") {
                cfg.decode.max_iterations_per_block = to_int(value, line_no);
            } else if (key == "force_accept_on_stall") {
                cfg.decode.force_accept_on_stall = to_bool(value, line_no);
            } else {
                fail(line_no, "unknown [decode] key '" + key + "'");
            }
        } else if (section == "instrumentation") {
            if (key == "hidden_snapshot_layers") {
                cfg.instrumentation.hidden_snapshot_layers.clear();
                for (const std::string& v : split_list(value)) {
                    cfg.instrumentation.hidden_snapshot_layers.push_back(to_int(v, line_no));
                }
            } else if (key == "split_accounting") {
                cfg.instrumentation.split_accounting = to_bool(value, line_no);
            } else if (key == "analysis_csv") {
                cfg.instrumentation.analysis_csv = to_bool(value, line_no);
            } else {
                fail(line_no, "unknown [instrumentation] key '" + key + "'");
            }
        } else if (section == "run") {
            if (key == "seeds") {
                cfg.seeds.clear();
                for (const std::string& v : split_list(value)) {
                    cfg.seeds.push_back(to_u64(v, line_no));
                }
            } else if (key == "variants") {
                // Execution order; the [variant <name>] sections define content.
                variant_order = split_list(value);
            } else if (key == "out") {
                cfg.out_dir = value;
            } else {
                fail(line_no, "unknown [run] key '" + key + "'");
            }
        } else if (section == "cost") {
            if (key == "expert_param_cost") {
                cfg.expert_param_cost = to_real(value, line_no);
            } else if (key == "attention_token_cost") {
                cfg.attention_token_cost = to_real(value, line_no);
            } else if (key == "shared_cost") {
                cfg.shared_cost = to_real(value, line_no);
            } else {
                fail(line_no, "unknown [cost] key '" + key + "'");
            }
        } else if (section == "variant") {
            if (variant == nullptr) variant = find_variant(section_arg);
            if (variant == nullptr) fail(line_no, "variant section lost its target");
            if (key == "engine") {
                if (value == "vanilla") {
                    variant->engine = Engine::vanilla;
                } else if (value == "accel") {
                    variant->engine = Engine::accel;
                } else {
                    fail(line_no, "unknown engine '" + value + "' (vanilla or accel)");
                }
            } else if (apply_strategy_key(variant->strategy, key, value, line_no)) {
                if (variant->strategy.any_enabled() || key == "num_branches") {
                    variant->engine = Engine::accel;
                }
            } else {
                fail(line_no, "unknown [variant] key '" + key + "'");
            }
        } else if (section == "ablate") {
            if (key == "variants") {
                cfg.ablate_variants = split_list(value);
            } else if (key == "refresh_intervals") {
                cfg.has_refresh_sweep = true;
                cfg.refresh_intervals.clear();
                for (const std::string& v : split_list(value)) {
                    cfg.refresh_intervals.push_back(to_interval(v, line_no));
                }
            } else if (key == "refresh_seh_enabled") {
                cfg.ablate_seh_in_refresh = to_bool(value, line_no);
            } else if (key == "refresh_lac_enabled") {
                cfg.ablate_lac_in_refresh = to_bool(value, line_no);
            } else if (apply_strategy_key(cfg.ablate_strategy, key, value, line_no)) {
                // knobs for the cumulative variants
            } else {
                fail(line_no, "unknown [ablate] key '" + key + "'");
            }
        } else if (section == "sweep") {
            if (key == "pairs") {
                cfg.sweep_pairs.clear();
                for (const std::string& pair : split_list(value)) {
                    auto colon = pair.find(':');
                    if (colon == std::string::npos) {
                        fail(line_no, "sweep pair '" + pair + "' must be tau_hot:l_hot");
                    }
                    cfg.sweep_pairs.emplace_back(to_real(trim(pair.substr(0, colon)), line_no),
                                                 to_int(trim(pair.substr(colon + 1)), line_no));
                }
            } else if (key == "seh_enabled") {
                cfg.sweep_seh = to_bool(value, line_no);
            } else {
                fail(line_no, "unknown [sweep] key '" + key + "'");
            }
        }
    }
    if (cfg.model_kind == ModelKind::scripted && !cfg.script_path.empty()) {
        // The script is authoritative for the model shape.
        cfg.model = load_script(cfg.script_path).model_config();
    }
    if (cfg.decode.block_size == 0) cfg.decode.block_size = cfg.model.block_size;
    if (cfg.decode.max_blocks == 0) cfg.decode.max_blocks = cfg.model.max_blocks;
    if (!variant_order.empty()) {
        std::vector<VariantConfig> ordered;
        for (const std::string& name : variant_order) {
            VariantConfig* v = find_variant(name);
            if (v != nullptr) {
                ordered.push_back(*v);
            } else {
                VariantConfig fresh;  // undeclared names run as plain vanilla
                fresh.name = name;
                ordered.push_back(fresh);
            }
        }
        cfg.variants = std::move(ordered);
    }
    if (cfg.variants.empty()) {
        VariantConfig v;
        v.name = "vanilla";
        cfg.variants.push_back(v);
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_experiment_config(buf.str(),
                                   std::filesystem::path(path).parent_path().string());
}

}  // namespace moediff
