#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "expost/types.hpp"

namespace expost {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Keys and values produced by one forward call, ready to be appended.
/// Keys are post-rotation under the rotary scheme and raw otherwise.
template <typename T>
struct CacheDelta {
    std::vector<Matrix<T>> keys;   // per layer, [new tokens x (n_heads * head_dim)]
    std::vector<Matrix<T>> values; // same shape as keys
    std::vector<PositionId> positions;
    std::vector<Tag> tags;

    int size() const { return static_cast<int>(positions.size()); }
};

/// Opaque handle returned by KvCache::snapshot().
struct CacheMark {
    std::uint64_t cache_id = 0;
    int length = 0;
    std::size_t truncations_seen = 0;
};

/// Per-layer key/value storage annotated with the position id and tag each
/// entry was encoded with. All layers always hold the same entries.
template <typename T>
class KvCache {
public:
    KvCache() : KvCache(0, 0) {}
    KvCache(int n_layers, int width)
        : n_layers_(n_layers), width_(width), keys_(static_cast<std::size_t>(n_layers)),
          values_(static_cast<std::size_t>(n_layers)), id_(next_id()) {}

    KvCache(const KvCache& other)
        : n_layers_(other.n_layers_), width_(other.width_), keys_(other.keys_), values_(other.values_),
          positions_(other.positions_), tags_(other.tags_), id_(next_id()) {}
    KvCache& operator=(const KvCache& other) {
        if (this != &other) {
            n_layers_ = other.n_layers_;
            width_ = other.width_;
            keys_ = other.keys_;
            values_ = other.values_;
            positions_ = other.positions_;
            tags_ = other.tags_;
            id_ = next_id();
            truncations_.clear();
        }
        return *this;
    }
    KvCache(KvCache&&) noexcept = default;
    KvCache& operator=(KvCache&&) noexcept = default;

    int n_layers() const { return n_layers_; }
    int width() const { return width_; }
    int size() const { return static_cast<int>(positions_.size()); }
    bool empty() const { return positions_.empty(); }

    std::span<const PositionId> positions() const { return positions_; }
    std::span<const Tag> tags() const { return tags_; }

    Eigen::Map<const Matrix<T>> keys(int layer) const {
        return {keys_.at(static_cast<std::size_t>(layer)).data(), size(), width_};
    }
    Eigen::Map<const Matrix<T>> values(int layer) const {
        return {values_.at(static_cast<std::size_t>(layer)).data(), size(), width_};
    }

    void append(const CacheDelta<T>& delta) {
        if (delta.size() == 0 && delta.keys.empty()) return;
        if (static_cast<int>(delta.keys.size()) != n_layers_ || static_cast<int>(delta.values.size()) != n_layers_)
            throw ShapeError("cache delta has " + std::to_string(delta.keys.size()) + " layers, cache has " +
                             std::to_string(n_layers_));
        if (delta.tags.size() != delta.positions.size()) throw ShapeError("cache delta tags/positions differ in length");
        for (int l = 0; l < n_layers_; ++l) {
            const auto& k = delta.keys[static_cast<std::size_t>(l)];
            const auto& v = delta.values[static_cast<std::size_t>(l)];
            if (k.rows() != delta.size() || v.rows() != delta.size() || k.cols() != width_ || v.cols() != width_)
                throw ShapeError("cache delta tensor shape mismatch at layer " + std::to_string(l));
        }
        for (int l = 0; l < n_layers_; ++l) {
            const auto& k = delta.keys[static_cast<std::size_t>(l)];
            const auto& v = delta.values[static_cast<std::size_t>(l)];
            // std::vector growth is geometric, so repeated appends are amortized O(1) per entry.
            keys_[static_cast<std::size_t>(l)].insert(keys_[static_cast<std::size_t>(l)].end(), k.data(), k.data() + k.size());
            values_[static_cast<std::size_t>(l)].insert(values_[static_cast<std::size_t>(l)].end(), v.data(), v.data() + v.size());
        }
        positions_.insert(positions_.end(), delta.positions.begin(), delta.positions.end());
        tags_.insert(tags_.end(), delta.tags.begin(), delta.tags.end());
    }

    CacheMark snapshot() const { return {id_, size(), truncations_.size()}; }

    void rollback(const CacheMark& mark) {
        if (mark.cache_id != id_) throw std::invalid_argument("cache mark belongs to a different cache");
        if (mark.length > size()) throw std::invalid_argument("stale cache mark: cache is shorter than the mark");
        for (std::size_t i = mark.truncations_seen; i < truncations_.size(); ++i)
            if (truncations_[i] < mark.length)
                throw std::invalid_argument("stale cache mark: entries behind it were rolled back");
        truncate(mark.length);
        truncations_.push_back(mark.length);
    }

    void clear() {
        truncate(0);
        truncations_.push_back(0);
    }

    /// Text table: index, tag, position id, then the key L2 norm per layer.
    std::string dump() const {
        std::ostringstream os;
        os << "index tag position";
        for (int l = 0; l < n_layers_; ++l) os << " knorm" << l;
        os << '\n' << std::fixed << std::setprecision(6);
        for (int i = 0; i < size(); ++i) {
            os << i << ' ' << tag_name(tags_[static_cast<std::size_t>(i)]) << ' ' << positions_[static_cast<std::size_t>(i)];
            for (int l = 0; l < n_layers_; ++l) os << ' ' << static_cast<double>(keys(l).row(i).norm());
            os << '\n';
        }
        return os.str();
    }

    /// Max abs difference over keys and values; infinity on structural mismatch.
    template <typename U>
    double max_abs_diff(const KvCache<U>& other) const {
        if (other.size() != size() || other.n_layers() != n_layers_ || other.width() != width_)
            return INFINITY;
        double worst = 0.0;
        for (int i = 0; i < size(); ++i)
            if (positions_[static_cast<std::size_t>(i)] != other.positions()[static_cast<std::size_t>(i)] ||
                tags_[static_cast<std::size_t>(i)] != other.tags()[static_cast<std::size_t>(i)])
                return INFINITY;
        for (int l = 0; l < n_layers_; ++l) {
            worst = std::max(worst, (keys(l).template cast<double>() - other.keys(l).template cast<double>()).cwiseAbs().maxCoeff());
            worst = std::max(worst, (values(l).template cast<double>() - other.values(l).template cast<double>()).cwiseAbs().maxCoeff());
        }
        return size() == 0 ? 0.0 : worst;
    }

private:
    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }

    void truncate(int length) {
        for (int l = 0; l < n_layers_; ++l) {
            keys_[static_cast<std::size_t>(l)].resize(static_cast<std::size_t>(length) * width_);
            values_[static_cast<std::size_t>(l)].resize(static_cast<std::size_t>(length) * width_);
        }
        positions_.resize(static_cast<std::size_t>(length));
        tags_.resize(static_cast<std::size_t>(length));
    }

    int n_layers_;
    int width_;
    std::vector<std::vector<T>> keys_;
    std::vector<std::vector<T>> values_;
    std::vector<PositionId> positions_;
    std::vector<Tag> tags_;
    std::uint64_t id_;
    std::vector<int> truncations_;
};

} // namespace expost
