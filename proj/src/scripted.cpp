#include "moediff/scripted.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "moediff/errors.hpp"
#include "moediff/rng.hpp"

namespace moediff {

ScriptSpec& ScriptSpec::set(int block, int iteration, int position, int prediction,
                            double confidence) {
    ScriptStep& s = steps[block][iteration][position];
    s.prediction = prediction;
    s.confidence = confidence;
    return *this;
}

ScriptSpec& ScriptSpec::set_route(int block, int iteration, int position, int layer,
                                  std::vector<int> expert_ids) {
    steps[block][iteration][position].route_logits[layer] = expert_list_logits(expert_ids);
    return *this;
}

ScriptSpec& ScriptSpec::set_route_logits(int block, int iteration, int position, int layer,
                                         std::vector<double> logits) {
    steps[block][iteration][position].route_logits[layer] = std::move(logits);
    return *this;
}

std::vector<double> ScriptSpec::expert_list_logits(const std::vector<int>& expert_ids) const {
    std::vector<double> logits(static_cast<size_t>(num_experts), -8.0);
    double level = 8.0;
    for (int e : expert_ids) {
        if (e < 0 || e >= num_experts) {
            throw ConfigError("scripted expert id " + std::to_string(e) + " out of range");
        }
        logits[e] = level;
        level -= 1.0;
    }
    return logits;
}

int ScriptSpec::scripted_iterations(int block) const {
    auto it = steps.find(block);
    if (it == steps.end() || it->second.empty()) return 0;
    return it->second.rbegin()->first + 1;
}

ModelConfig ScriptSpec::model_config() const {
    ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.hidden_dim = hidden_dim;
    cfg.num_layers = num_layers;
    cfg.num_experts = num_experts;
    cfg.experts_per_token = experts_per_token;
    cfg.block_size = block_size;
    cfg.max_blocks = max_blocks > 0 ? max_blocks
                     : steps.empty() ? 1
                                     : steps.rbegin()->first + 1;
    cfg.mask_id = mask_id;
    cfg.eos_id = eos_id;
    return cfg;
}

void ScriptSpec::validate() const {
    model_config().validate();
    if (filler_token < 0 || filler_token >= vocab_size) {
        throw ConfigError("script filler_token out of vocabulary range");
    }
    if (filler_token == mask_id) {
        throw ConfigError("script filler_token may not be the mask id");
    }
    for (const auto& [block, iters] : steps) {
        if (block < 0) throw ConfigError("script block index negative");
        for (const auto& [iter, positions] : iters) {
            if (iter < 0) throw ConfigError("script iteration negative");
            for (const auto& [pos, step] : positions) {
                if (pos < 0 || pos >= block_size) {
                    throw ConfigError("script position " + std::to_string(pos) +
                                      " outside block");
                }
                if (step.prediction < 0 || step.prediction >= vocab_size) {
                    throw ConfigError("script prediction out of vocabulary range");
                }
                if (step.prediction == mask_id) {
                    throw ConfigError("script prediction may not be the mask id");
                }
                if (step.confidence < 0.0 || step.confidence > 1.0) {
                    throw ConfigError("script confidence outside [0,1]");
                }
                for (const auto& [layer, logits] : step.route_logits) {
                    if (layer < 0 || layer >= num_layers) {
                        throw ConfigError("script route layer out of range");
                    }
                    if (static_cast<int>(logits.size()) != num_experts) {
                        throw ConfigError("script route logits must list every expert");
                    }
                }
            }
        }
    }
}

ScriptedModel::ScriptedModel(ScriptSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    cfg_ = spec_.model_config();
}

namespace {

// Synthetic hidden vector, constant across iterations for a given position.
std::vector<double> scripted_hidden(int hidden_dim, int position) {
    std::vector<double> h(static_cast<size_t>(hidden_dim));
    for (int i = 0; i < hidden_dim; ++i) {
        h[i] = 0.25 + mix_unit(0x5C21, static_cast<uint64_t>(position), static_cast<uint64_t>(i));
    }
    return h;
}

KvEntry scripted_kv(int hidden_dim, int layer, int abs_position, int token) {
    KvEntry e;
    e.key.resize(static_cast<size_t>(hidden_dim));
    e.value.resize(static_cast<size_t>(hidden_dim));
    const auto pos_token = static_cast<uint64_t>(abs_position) * 4096u +
                           static_cast<uint64_t>(token);
    for (int i = 0; i < hidden_dim; ++i) {
        e.key[i] = mix_unit(0xA11C, static_cast<uint64_t>(layer), pos_token,
                            static_cast<uint64_t>(i));
        e.value[i] = mix_unit(0xB22D, static_cast<uint64_t>(layer), pos_token,
                              static_cast<uint64_t>(i));
    }
    return e;
}

}  // namespace

ForwardResult ScriptedModel::forward(const LayerKVCache& ctx, const ForwardRequest& req) const {
    detail::validate_request(cfg_, ctx, req);
    const int L = cfg_.block_size;
    const int base = req.block_index * L;
    const auto& active = req.active_positions;

    ForwardResult res;
    res.active_positions = active;
    res.new_kv.resize(cfg_.num_layers);
    res.logits = Matrix(static_cast<int>(active.size()), cfg_.vocab_size);
    if (active.empty()) return res;

    const std::map<int, ScriptStep>* scripted = nullptr;
    if (!req.commit_pass) {
        auto bit = spec_.steps.find(req.block_index);
        const int declared = spec_.scripted_iterations(req.block_index);
        if (req.iteration >= declared) {
            throw ScriptUnderrunError("script exhausted: block " +
                                      std::to_string(req.block_index) + " declares " +
                                      std::to_string(declared) + " iterations, iteration " +
                                      std::to_string(req.iteration) + " requested");
        }
        auto iit = bit->second.find(req.iteration);
        if (iit != bit->second.end()) scripted = &iit->second;
    }

    for (size_t i = 0; i < active.size(); ++i) {
        const int p = active[i];
        const ScriptStep* step = nullptr;
        if (scripted != nullptr) {
            auto it = scripted->find(p);
            if (it != scripted->end()) step = &it->second;
        }
        const int pred = step ? step->prediction : spec_.filler_token;
        const double conf = step ? step->confidence : 0.0;
        res.predictions.push_back(pred);
        res.confidences.push_back(conf);
        // Logits row shaped so the scripted prediction is the argmax with
        // roughly the scripted probability; uncovered rows stay uniform.
        if (conf > 0.0) {
            const double c = std::min(conf, 1.0 - 1e-12);
            res.logits.at(static_cast<int>(i), pred) =
                std::log(c * (cfg_.vocab_size - 1) / (1.0 - c));
        }
    }

    for (int layer = 0; layer < cfg_.num_layers; ++layer) {
        auto logits_for = [&](int pos) -> std::vector<double> {
            if (scripted != nullptr) {
                auto it = scripted->find(pos);
                if (it != scripted->end()) {
                    auto lit = it->second.route_logits.find(layer);
                    if (lit != it->second.route_logits.end()) return lit->second;
                }
            }
            return std::vector<double>(static_cast<size_t>(cfg_.num_experts), 0.0);
        };
        detail::LayerRouting routed = detail::route_active_layer(
            logits_for, req, cfg_.experts_per_token, layer, base);
        if (routed.rounds_ran) {
            res.necessary_experts[layer] = routed.necessary;
            if (routed.fallback) res.lac_fallback = true;
        }
        for (const auto& [p, rec] : routed.by_pos) res.routing.push_back(rec);
        for (int p : active) {
            res.new_kv[layer][p] =
                scripted_kv(cfg_.hidden_dim, layer, base + p, req.block_tokens[p]);
        }
    }

    for (int layer : req.hidden_snapshot_layers) {
        for (int p : active) {
            res.hidden_snapshots[layer][p] = scripted_hidden(cfg_.hidden_dim, p);
        }
    }
    return res;
}

std::unique_ptr<ScriptedModel> build_scripted_model(ScriptSpec spec) {
    return std::make_unique<ScriptedModel>(std::move(spec));
}

namespace {

[[noreturn]] void parse_fail(int line_no, const std::string& msg) {
    throw ConfigError("script line " + std::to_string(line_no) + ": " + msg);
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

int parse_int(const std::string& s, int line_no) {
    try {
        size_t used = 0;
        int v = std::stoi(s, &used);
        if (used != s.size()) parse_fail(line_no, "trailing characters after integer '" + s + "'");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        parse_fail(line_no, "expected integer, got '" + s + "'");
    }
}

double parse_real(const std::string& s, int line_no) {
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) parse_fail(line_no, "trailing characters after number '" + s + "'");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        parse_fail(line_no, "expected number, got '" + s + "'");
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

}  // namespace

ScriptSpec parse_script(const std::string& text) {
    ScriptSpec spec;
    std::istringstream is(text);
    std::string raw;
    int line_no = 0;
    int block = -1;
    int iteration = -1;
    bool in_body = false;

    while (std::getline(is, raw)) {
        ++line_no;
        std::string line = raw;
        if (auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') parse_fail(line_no, "unterminated section header");
            auto inner = split(trim(line.substr(1, line.size() - 2)), ' ');
            inner.erase(std::remove(inner.begin(), inner.end(), std::string()), inner.end());
            if (inner.size() != 2) parse_fail(line_no, "expected [block N] or [iteration N]");
            if (inner[0] == "block") {
                block = parse_int(inner[1], line_no);
                iteration = -1;
                in_body = true;
            } else if (inner[0] == "iteration") {
                if (block < 0) parse_fail(line_no, "[iteration] before any [block]");
                iteration = parse_int(inner[1], line_no);
            } else {
                parse_fail(line_no, "unknown section '" + inner[0] + "'");
            }
            continue;
        }

        auto eq = line.find('=');
        if (eq == std::string::npos) parse_fail(line_no, "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));

        if (!in_body) {
            if (key == "version") {
                if (parse_int(value, line_no) != 1) parse_fail(line_no, "unsupported script version");
            } else if (key == "block_size") {
                spec.block_size = parse_int(value, line_no);
            } else if (key == "num_layers") {
                spec.num_layers = parse_int(value, line_no);
            } else if (key == "num_experts") {
                spec.num_experts = parse_int(value, line_no);
            } else if (key == "experts_per_token") {
                spec.experts_per_token = parse_int(value, line_no);
            } else if (key == "vocab_size") {
                spec.vocab_size = parse_int(value, line_no);
            } else if (key == "hidden_dim") {
                spec.hidden_dim = parse_int(value, line_no);
            } else if (key == "max_blocks") {
                spec.max_blocks = parse_int(value, line_no);
            } else if (key == "filler_token") {
                spec.filler_token = parse_int(value, line_no);
            } else if (key == "mask_id") {
                spec.mask_id = parse_int(value, line_no);
            } else if (key == "eos_id") {
                spec.eos_id = parse_int(value, line_no);
            } else {
                parse_fail(line_no, "unknown script header key '" + key + "'");
            }
            continue;
        }

        // Body line: pos K = pred=... conf=... [route[@L]=ids | route_logits[@L]=vals]
        auto head = split(key, ' ');
        head.erase(std::remove(head.begin(), head.end(), std::string()), head.end());
        if (head.size() != 2 || head[0] != "pos") {
            parse_fail(line_no, "expected 'pos <index> = ...'");
        }
        if (iteration < 0) parse_fail(line_no, "position entry before any [iteration]");
        const int pos = parse_int(head[1], line_no);

        ScriptStep step;
        bool has_pred = false;
        for (const std::string& attr : split(value, ' ')) {
            if (attr.empty()) continue;
            auto aeq = attr.find('=');
            if (aeq == std::string::npos) parse_fail(line_no, "attribute '" + attr + "' missing '='");
            std::string akey = attr.substr(0, aeq);
            const std::string aval = attr.substr(aeq + 1);
            std::optional<int> layer;
            if (auto at = akey.find('@'); at != std::string::npos) {
                layer = parse_int(akey.substr(at + 1), line_no);
                akey = akey.substr(0, at);
            }
            if (akey == "pred") {
                step.prediction = parse_int(aval, line_no);
                has_pred = true;
            } else if (akey == "conf") {
                step.confidence = parse_real(aval, line_no);
            } else if (akey == "route") {
                std::vector<int> ids;
                for (const std::string& t : split(aval, ',')) ids.push_back(parse_int(t, line_no));
                const auto logits = spec.expert_list_logits(ids);
                if (layer) {
                    step.route_logits[*layer] = logits;
                } else {
                    for (int l = 0; l < spec.num_layers; ++l) step.route_logits[l] = logits;
                }
            } else if (akey == "route_logits") {
                std::vector<double> logits;
                for (const std::string& t : split(aval, ',')) logits.push_back(parse_real(t, line_no));
                if (layer) {
                    step.route_logits[*layer] = logits;
                } else {
                    for (int l = 0; l < spec.num_layers; ++l) step.route_logits[l] = logits;
                }
            } else {
                parse_fail(line_no, "unknown attribute '" + akey + "'");
            }
        }
        if (!has_pred) parse_fail(line_no, "position entry needs pred=");
        spec.steps[block][iteration][pos] = std::move(step);
    }

    spec.validate();
    return spec;
}

ScriptSpec load_script(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open script file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_script(buf.str());
}

}  // namespace moediff

