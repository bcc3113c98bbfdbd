#include "moediff/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "moediff/errors.hpp"

namespace moediff {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab_size < 3) fail("vocab_size must be at least 3 (mask, eos, one payload id)");
    if (hidden_dim < 1) fail("hidden_dim must be positive");
    if (num_layers < 1) fail("num_layers must be positive");
    if (num_experts < 1) fail("num_experts must be positive");
    if (experts_per_token < 1) fail("experts_per_token must be positive");
    if (experts_per_token > num_experts) fail("experts_per_token exceeds num_experts");
    if (block_size < 1) fail("block_size must be positive");
    if (max_blocks < 1) fail("max_blocks must be positive");
    if (mask_id == eos_id) fail("mask and eos ids must be distinct");
    if (mask_id < 0 || mask_id >= vocab_size) fail("mask_id out of vocabulary range");
    if (eos_id < 0 || eos_id >= vocab_size) fail("eos_id out of vocabulary range");
}

std::string ModelConfig::digest() const {
    std::ostringstream os;
    os << "v" << vocab_size << ".h" << hidden_dim << ".l" << num_layers << ".e"
       << num_experts << ".k" << experts_per_token << ".L" << block_size << ".B"
       << max_blocks << ".c" << clustering_strength;
    return os.str();
}

int ForwardResult::index_of(int pos) const {
    auto it = std::lower_bound(active_positions.begin(), active_positions.end(), pos);
    if (it == active_positions.end() || *it != pos) return -1;
    return static_cast<int>(it - active_positions.begin());
}

double ForwardResult::confidence_at(int pos) const {
    const int i = index_of(pos);
    if (i < 0) throw CoverageError("position " + std::to_string(pos) + " not in result");
    return confidences[i];
}

int ForwardResult::prediction_at(int pos) const {
    const int i = index_of(pos);
    if (i < 0) throw CoverageError("position " + std::to_string(pos) + " not in result");
    return predictions[i];
}

namespace {

std::vector<double> matvec(std::span<const double> v, const Matrix& m) {
    if (static_cast<int>(v.size()) != m.rows) {
        throw ShapeError("matvec dimension mismatch");
    }
    std::vector<double> out(m.cols, 0.0);
    for (int r = 0; r < m.rows; ++r) {
        const double x = v[r];
        if (x == 0.0) continue;
        const double* row = m.data.data() + static_cast<size_t>(r) * m.cols;
        for (int c = 0; c < m.cols; ++c) out[c] += x * row[c];
    }
    return out;
}

void add_into(std::vector<double>& dst, std::span<const double> src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

namespace detail {

void validate_request(const ModelConfig& cfg, const LayerKVCache& ctx,
                      const ForwardRequest& req) {
    if (static_cast<int>(req.block_tokens.size()) != cfg.block_size) {
        throw ArgumentError("block_tokens must hold exactly block_size ids");
    }
    for (int t : req.block_tokens) {
        if (t < 0 || t >= cfg.vocab_size) throw ArgumentError("token id out of range");
    }
    if (req.block_index < 0 || req.block_index >= cfg.max_blocks) {
        throw ArgumentError("block_index out of range");
    }
    if (ctx.num_layers() != cfg.num_layers) {
        throw CacheInconsistencyError("cache layer count does not match model");
    }
    if (ctx.committed_blocks() != req.block_index) {
        throw CacheInconsistencyError("cache holds " + std::to_string(ctx.committed_blocks()) +
                                      " committed blocks but request targets block " +
                                      std::to_string(req.block_index));
    }
    int prev = -1;
    for (int p : req.active_positions) {
        if (p < 0 || p >= cfg.block_size) throw ArgumentError("active position out of range");
        if (p <= prev) throw ArgumentError("active_positions must be sorted and unique");
        prev = p;
    }
    for (const auto& [p, allowed] : req.expert_restriction) {
        if (allowed.empty()) throw ArgumentError("empty expert restriction for position " +
                                                 std::to_string(p));
        auto it = req.classes.find(p);
        if (it == req.classes.end() || it->second != TokenClass::cold) {
            throw ArgumentError("expert_restriction applies only to cold-flagged positions");
        }
    }
    for (int l : req.hidden_snapshot_layers) {
        if (l < 0 || l >= cfg.num_layers) throw ArgumentError("snapshot layer out of range");
    }
}

LayerRouting route_active_layer(const std::function<std::vector<double>(int)>& logits_for,
                                const ForwardRequest& req, int experts_per_token,
                                int layer, int abs_base) {
    LayerRouting out;
    std::vector<int> plain;  // routed unrestricted outside the two rounds
    std::vector<int> round_positions;
    for (int p : req.active_positions) {
        if (req.expert_restriction.count(p)) {
            out.by_pos[p] = route_from_logits(logits_for(p), experts_per_token,
                                              &req.expert_restriction.at(p), layer,
                                              abs_base + p);
        } else if (req.lac && req.classes.count(p) &&
                   req.classes.at(p) != TokenClass::cached) {
            round_positions.push_back(p);
        } else {
            plain.push_back(p);
        }
    }
    if (req.lac && !round_positions.empty()) {
        TwoRoundRouting rounds =
            two_round_route(logits_for, round_positions, req.classes, experts_per_token,
                            layer, abs_base, req.lac_aggregate_necessary);
        out.rounds_ran = true;
        out.fallback = rounds.fallback;
        out.necessary = std::move(rounds.necessary_experts);
        for (auto& rec : rounds.records) {
            out.by_pos[rec.token_position - abs_base] = std::move(rec);
        }
    }
    for (int p : plain) {
        out.by_pos[p] = route_from_logits(logits_for(p), experts_per_token, nullptr,
                                          layer, abs_base + p);
    }
    return out;
}

}  // namespace detail

ToyModel::ToyModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const int h = cfg_.hidden_dim;
    const int ff = cfg_.ff_dim();
    const double sh = 1.0 / std::sqrt(static_cast<double>(h));
    const double sff = 1.0 / std::sqrt(static_cast<double>(ff));

    token_embedding_ = Matrix(cfg_.vocab_size, h);
    fill_uniform(token_embedding_, rng, sh);
    position_embedding_ = Matrix(cfg_.max_positions(), h);
    fill_uniform(position_embedding_, rng, sh);

    layers_.resize(cfg_.num_layers);
    for (auto& w : layers_) {
        w.wq = Matrix(h, h);
        w.wk = Matrix(h, h);
        w.wv = Matrix(h, h);
        w.wo = Matrix(h, h);
        fill_uniform(w.wq, rng, sh);
        fill_uniform(w.wk, rng, sh);
        fill_uniform(w.wv, rng, sh);
        fill_uniform(w.wo, rng, sh);
        w.router = Matrix(h, cfg_.num_experts);
        fill_uniform(w.router, rng, sh);
        w.experts.resize(cfg_.num_experts);
        for (auto& [up, down] : w.experts) {
            up = Matrix(h, ff);
            down = Matrix(ff, h);
            fill_uniform(up, rng, sh);
            fill_uniform(down, rng, sff);
        }
    }
    unembedding_ = Matrix(h, cfg_.vocab_size);
    fill_uniform(unembedding_, rng, sh);

    refresh_derived();
}

void ToyModel::refresh_derived() {
    band_size_ = std::max(cfg_.experts_per_token, cfg_.num_experts / 4);
    auto mask_row = token_embedding_.row(cfg_.mask_id);
    mask_direction_.assign(mask_row.begin(), mask_row.end());
    double norm = std::sqrt(dot(mask_direction_, mask_direction_));
    if (norm < 1e-12) {
        mask_direction_.assign(static_cast<size_t>(cfg_.hidden_dim), 0.0);
        mask_direction_[0] = 1.0;
    } else {
        for (double& v : mask_direction_) v /= norm;
    }
}

std::vector<Matrix*> ToyModel::matrix_slots() {
    std::vector<Matrix*> slots{&token_embedding_, &position_embedding_};
    for (auto& w : layers_) {
        slots.insert(slots.end(), {&w.wq, &w.wk, &w.wv, &w.wo, &w.router});
        for (auto& [up, down] : w.experts) {
            slots.push_back(&up);
            slots.push_back(&down);
        }
    }
    slots.push_back(&unembedding_);
    return slots;
}

std::vector<const Matrix*> ToyModel::matrix_slots() const {
    auto mutable_slots = const_cast<ToyModel*>(this)->matrix_slots();
    return {mutable_slots.begin(), mutable_slots.end()};
}

std::vector<double> ToyModel::embed(int token, int absolute_position) const {
    if (token < 0 || token >= cfg_.vocab_size) throw ArgumentError("token id out of range");
    if (absolute_position < 0 || absolute_position >= cfg_.max_positions()) {
        throw ArgumentError("absolute position out of range");
    }
    std::vector<double> h(token_embedding_.row(token).begin(),
                          token_embedding_.row(token).end());
    add_into(h, position_embedding_.row(absolute_position));
    return h;
}

std::vector<double> ToyModel::router_logits(int layer, std::span<const double> hidden) const {
    if (layer < 0 || layer >= cfg_.num_layers) throw ArgumentError("layer out of range");
    std::vector<double> logits = matvec(hidden, layers_[layer].router);
    if (cfg_.clustering_strength != 0.0) {
        const double affinity = std::max(0.0, dot(hidden, mask_direction_));
        const double boost = cfg_.clustering_strength * affinity;
        for (int e = 0; e < band_size_; ++e) logits[e] += boost;
    }
    return logits;
}

RoutingRecord ToyModel::route(int layer, std::span<const double> hidden,
                              const std::vector<int>* restriction,
                              int token_position) const {
    if (static_cast<int>(hidden.size()) != cfg_.hidden_dim) {
        throw ArgumentError("hidden vector has wrong dimension");
    }
    return route_from_logits(router_logits(layer, hidden), cfg_.experts_per_token,
                             restriction, layer, token_position);
}

ForwardResult ToyModel::forward(const LayerKVCache& ctx, const ForwardRequest& req) const {
    detail::validate_request(cfg_, ctx, req);
    const int L = cfg_.block_size;
    const int base = req.block_index * L;
    const auto& active = req.active_positions;

    ForwardResult res;
    res.active_positions = active;
    res.new_kv.resize(cfg_.num_layers);
    res.logits = Matrix(static_cast<int>(active.size()), cfg_.vocab_size);
    if (active.empty()) return res;

    std::vector<char> is_active(static_cast<size_t>(L), 0);
    for (int p : active) is_active[p] = 1;

    std::map<int, std::vector<double>> h;
    for (int p : active) h[p] = embed(req.block_tokens[p], base + p);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));

    for (int layer = 0; layer < cfg_.num_layers; ++layer) {
        const auto& w = layers_[layer];

        std::map<int, std::vector<double>> q;
        for (int p : active) {
            q[p] = matvec(h[p], w.wq);
            res.new_kv[layer][p] = KvEntry{matvec(h[p], w.wk), matvec(h[p], w.wv)};
        }

        // Attention context: committed prior blocks (causal), then every
        // position of the current block (bidirectional) — fresh for active
        // positions, cached otherwise.
        std::vector<const KvEntry*> context;
        context.reserve(ctx.committed(layer).size() + static_cast<size_t>(L));
        for (const auto& e : ctx.committed(layer)) context.push_back(&e);
        for (int p = 0; p < L; ++p) {
            if (is_active[p]) {
                context.push_back(&res.new_kv[layer].at(p));
            } else {
                auto cached = ctx.intra(layer).find(p);
                if (cached == ctx.intra(layer).end()) {
                    throw CacheInconsistencyError(
                        "inactive position " + std::to_string(p) + " has no cached entry at layer " +
                        std::to_string(layer));
                }
                if (cached->second.grace_pending) {
                    throw CacheInconsistencyError(
                        "inactive position " + std::to_string(p) +
                        " still awaits its post-acceptance recompute at layer " +
                        std::to_string(layer));
                }
                context.push_back(&cached->second.kv);
            }
        }

        std::vector<double> scores(context.size());
        for (int p : active) {
            double mx = -1e300;
            for (size_t i = 0; i < context.size(); ++i) {
                scores[i] = dot(q[p], context[i]->key) * inv_sqrt_d;
                mx = std::max(mx, scores[i]);
            }
            double sum = 0.0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                sum += s;
            }
            std::vector<double> attn(cfg_.hidden_dim, 0.0);
            for (size_t i = 0; i < context.size(); ++i) {
                const double wgt = scores[i] / sum;
                const auto& val = context[i]->value;
                for (int d = 0; d < cfg_.hidden_dim; ++d) attn[d] += wgt * val[d];
            }
            add_into(h[p], matvec(attn, w.wo));
        }

        detail::LayerRouting routed = detail::route_active_layer(
            [&](int pos) { return router_logits(layer, h.at(pos)); }, req,
            cfg_.experts_per_token, layer, base);
        if (routed.rounds_ran) {
            res.necessary_experts[layer] = routed.necessary;
            if (routed.fallback) res.lac_fallback = true;
        }

        for (int p : active) {
            const RoutingRecord& rec = routed.by_pos.at(p);
            std::vector<double> ffn(cfg_.hidden_dim, 0.0);
            for (size_t i = 0; i < rec.expert_ids.size(); ++i) {
                const auto& [up, down] = w.experts[rec.expert_ids[i]];
                std::vector<double> mid = matvec(h[p], up);
                for (double& v : mid) v = std::max(0.0, v);
                std::vector<double> out = matvec(mid, down);
                const double g = rec.gate_weights[i];
                for (int d = 0; d < cfg_.hidden_dim; ++d) ffn[d] += g * out[d];
            }
            add_into(h[p], ffn);
        }
        for (const auto& [p, rec] : routed.by_pos) res.routing.push_back(rec);

        if (std::find(req.hidden_snapshot_layers.begin(), req.hidden_snapshot_layers.end(),
                      layer) != req.hidden_snapshot_layers.end()) {
            for (int p : active) res.hidden_snapshots[layer][p] = h[p];
        }
    }

    for (size_t i = 0; i < active.size(); ++i) {
        std::vector<double> row = matvec(h[active[i]], unembedding_);
        // The mask id is never a legal prediction.
        row[static_cast<size_t>(cfg_.mask_id)] = -1e30;
        std::copy(row.begin(), row.end(), res.logits.row(static_cast<int>(i)).begin());
    }
    Matrix probs = softmax_rows(res.logits);
    auto arg = row_argmax(probs);
    res.predictions.reserve(active.size());
    res.confidences.reserve(active.size());
    for (size_t i = 0; i < active.size(); ++i) {
        res.predictions.push_back(arg[i].first);
        res.confidences.push_back(arg[i].second);
    }
    return res;
}

bool ToyModel::weights_equal(const ToyModel& other) const {
    if (!(token_embedding_ == other.token_embedding_) ||
        !(position_embedding_ == other.position_embedding_) ||
        !(unembedding_ == other.unembedding_) || layers_.size() != other.layers_.size()) {
        return false;
    }
    for (size_t l = 0; l < layers_.size(); ++l) {
        const auto& a = layers_[l];
        const auto& b = other.layers_[l];
        if (!(a.wq == b.wq && a.wk == b.wk && a.wv == b.wv && a.wo == b.wo &&
              a.router == b.router)) {
            return false;
        }
        if (a.experts.size() != b.experts.size()) return false;
        for (size_t e = 0; e < a.experts.size(); ++e) {
            if (!(a.experts[e].first == b.experts[e].first &&
                  a.experts[e].second == b.experts[e].second)) {
                return false;
            }
        }
    }
    return true;
}

std::unique_ptr<ToyModel> build_toy_model(const ModelConfig& cfg) {
    return std::make_unique<ToyModel>(cfg);
}

namespace {

constexpr char kMagic[4] = {'M', 'D', 'F', 'W'};
constexpr uint32_t kFormatVersion = 1;

void put_bytes(std::ostream& os, const void* data, size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(buf, buf + sizeof(T));
    }
    put_bytes(os, buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("unexpected end of model file");
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(buf, buf + sizeof(T));
    }
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

void put_matrix(std::ostream& os, const Matrix& m) {
    for (double v : m.data) put_le<double>(os, v);
}

void get_matrix(std::istream& is, Matrix& m) {
    for (double& v : m.data) v = get_le<double>(is);
}

}  // namespace

void save_model(const ToyModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    const ModelConfig& c = model.config();
    put_bytes(os, kMagic, 4);
    put_le<uint32_t>(os, kFormatVersion);
    put_le<int32_t>(os, c.vocab_size);
    put_le<int32_t>(os, c.hidden_dim);
    put_le<int32_t>(os, c.num_layers);
    put_le<int32_t>(os, c.num_experts);
    put_le<int32_t>(os, c.experts_per_token);
    put_le<int32_t>(os, c.block_size);
    put_le<int32_t>(os, c.max_blocks);
    put_le<int32_t>(os, c.mask_id);
    put_le<int32_t>(os, c.eos_id);
    put_le<uint64_t>(os, c.seed);
    put_le<double>(os, c.clustering_strength);
    for (const Matrix* m : model.matrix_slots()) put_matrix(os, *m);
    if (!os) throw IoError("write failed for " + path);
}

std::unique_ptr<ToyModel> load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("not a model container: bad magic in " + path);
    }
    const uint32_t version = get_le<uint32_t>(is);
    if (version != kFormatVersion) {
        throw IoError("unsupported model container version " + std::to_string(version));
    }
    ModelConfig c;
    c.vocab_size = get_le<int32_t>(is);
    c.hidden_dim = get_le<int32_t>(is);
    c.num_layers = get_le<int32_t>(is);
    c.num_experts = get_le<int32_t>(is);
    c.experts_per_token = get_le<int32_t>(is);
    c.block_size = get_le<int32_t>(is);
    c.max_blocks = get_le<int32_t>(is);
    c.mask_id = get_le<int32_t>(is);
    c.eos_id = get_le<int32_t>(is);
    c.seed = get_le<uint64_t>(is);
    c.clustering_strength = get_le<double>(is);
    auto model = std::make_unique<ToyModel>(c);
    for (Matrix* m : model->matrix_slots()) get_matrix(is, *m);
    model->refresh_derived();
    return model;
}

}  // namespace moediff
