#pragma once

#include <map>
#include <vector>

namespace moediff {

struct KvEntry {
    std::vector<double> key;
    std::vector<double> value;

    bool operator==(const KvEntry&) const = default;
};

struct CachedKv {
    KvEntry kv;
    // Set while the entry holds provisional key/values from the accepting
    // pass; cleared once the token's post-acceptance recompute lands.
    bool grace_pending = true;
};

// Per-layer key/value storage: committed entries for fully decoded prior
// blocks (append-only, indexed by absolute position) plus intra-block entries
// for the block currently being decoded.
class LayerKVCache {
  public:
    LayerKVCache() = default;
    explicit LayerKVCache(int num_layers) : committed_(num_layers), intra_(num_layers) {}

    int num_layers() const { return static_cast<int>(committed_.size()); }
    int committed_positions() const {
        return committed_.empty() ? 0 : static_cast<int>(committed_[0].size());
    }
    int committed_blocks() const { return committed_blocks_; }

    const std::vector<KvEntry>& committed(int layer) const { return committed_[layer]; }

    // Intra-block view for the current block.
    const std::map<int, CachedKv>& intra(int layer) const { return intra_[layer]; }
    bool has_intra(int layer, int pos) const { return intra_[layer].count(pos) > 0; }
    const KvEntry* intra_entry(int layer, int pos) const {
        auto it = intra_[layer].find(pos);
        return it == intra_[layer].end() ? nullptr : &it->second.kv;
    }

    void intra_insert(int layer, int pos, KvEntry kv, bool grace_pending) {
        intra_[layer][pos] = CachedKv{std::move(kv), grace_pending};
    }

    void clear_intra() {
        for (auto& m : intra_) m.clear();
    }

    // Freeze one completed block: per layer, block_size entries appended to
    // the committed store in position order. Committed entries are never
    // touched again.
    void commit_block(const std::vector<std::vector<KvEntry>>& per_layer_entries) {
        for (int l = 0; l < num_layers(); ++l) {
            for (const auto& e : per_layer_entries[l]) {
                committed_[l].push_back(e);
            }
        }
        ++committed_blocks_;
        clear_intra();
    }

  private:
    std::vector<std::vector<KvEntry>> committed_;   // [layer][absolute position]
    std::vector<std::map<int, CachedKv>> intra_;    // [layer][position in block]
    int committed_blocks_ = 0;
};

}  // namespace moediff
