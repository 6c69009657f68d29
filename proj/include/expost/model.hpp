#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "expost/config.hpp"
#include "expost/kv_cache.hpp"
#include "expost/mask_matrix.hpp"
#include "expost/rng.hpp"
#include "expost/rotary.hpp"
#include "expost/types.hpp"

namespace expost {

template <typename T>
struct LayerParams {
    Matrix<T> attn_norm; // [1 x d]
    Matrix<T> wq, wk, wv, wo; // [d x d]
    Matrix<T> mlp_norm; // [1 x d]
    Matrix<T> w_gate, w_up; // [d x d_ff]
    Matrix<T> w_down; // [d_ff x d]
};

template <typename T>
struct Parameters {
    Matrix<T> tok_emb; // [vocab x d]
    std::vector<LayerParams<T>> layers;
    Matrix<T> final_norm; // [1 x d]
    Matrix<T> head; // [d x vocab]

    /// Visits every tensor in a fixed order with its stable name.
    template <typename F>
    void for_each(F&& f) {
        f("tok_emb", tok_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            auto& L = layers[l];
            f(p + "attn_norm", L.attn_norm);
            f(p + "wq", L.wq);
            f(p + "wk", L.wk);
            f(p + "wv", L.wv);
            f(p + "wo", L.wo);
            f(p + "mlp_norm", L.mlp_norm);
            f(p + "w_gate", L.w_gate);
            f(p + "w_up", L.w_up);
            f(p + "w_down", L.w_down);
        }
        f("final_norm", final_norm);
        f("head", head);
    }
    template <typename F>
    void for_each(F&& f) const {
        const_cast<Parameters*>(this)->for_each([&](const std::string& n, Matrix<T>& m) { f(n, static_cast<const Matrix<T>&>(m)); });
    }

    static Parameters zeros_like(const ModelConfig& c) {
        Parameters p;
        const int d = c.d_model, f = c.d_ff, v = c.vocab_size;
        p.tok_emb = Matrix<T>::Zero(v, d);
        p.layers.resize(static_cast<std::size_t>(c.n_layers));
        for (auto& L : p.layers) {
            L.attn_norm = Matrix<T>::Zero(1, d);
            L.wq = L.wk = L.wv = L.wo = Matrix<T>::Zero(d, d);
            L.mlp_norm = Matrix<T>::Zero(1, d);
            L.w_gate = L.w_up = Matrix<T>::Zero(d, f);
            L.w_down = Matrix<T>::Zero(f, d);
        }
        p.final_norm = Matrix<T>::Zero(1, d);
        p.head = Matrix<T>::Zero(d, v);
        return p;
    }

    std::int64_t count() const {
        std::int64_t n = 0;
        for_each([&](const std::string&, const Matrix<T>& m) { n += m.size(); });
        return n;
    }
};

/// Counts multiply-accumulates actually issued by the matmuls of a forward call.
struct OpCounter {
    std::int64_t macs = 0;
    void add(std::int64_t rows, std::int64_t inner, std::int64_t cols) { macs += rows * inner * cols; }
};

template <typename T>
struct ForwardInput {
    std::span<const TokenId> tokens;
    std::span<const PositionId> positions;
    /// Tags copied into the cache delta; when empty every new entry is tagged Source.
    std::span<const Tag> tags = {};
    /// Explicit visibility, one row per new token and one column per (cache entry + new token).
    /// When null the new tokens see the whole cache plus a causal pattern among themselves.
    const MaskMatrix* mask = nullptr;
    const KvCache<T>* cache = nullptr;
};

template <typename T>
struct ForwardOutput {
    Matrix<T> logits; // [new tokens x vocab]
    CacheDelta<T> delta;
};

inline constexpr double kRmsEps = 1e-6;

namespace detail {

template <typename T>
Matrix<T> rms_norm(const Matrix<T>& x, const Matrix<T>& gain, Eigen::Matrix<T, Eigen::Dynamic, 1>* inv_rms = nullptr) {
    Matrix<T> y(x.rows(), x.cols());
    if (inv_rms) inv_rms->resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const T ms = x.row(i).squaredNorm() / static_cast<T>(x.cols());
        const T r = T(1) / std::sqrt(ms + static_cast<T>(kRmsEps));
        y.row(i) = (x.row(i) * r).cwiseProduct(gain);
        if (inv_rms) (*inv_rms)(i) = r;
    }
    return y;
}

template <typename T>
T sigmoid(T a) { return T(1) / (T(1) + std::exp(-a)); }

template <typename T>
T silu(T a) { return a * sigmoid(a); }

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b, OpCounter* ops) {
    if (ops) ops->add(a.rows(), a.cols(), b.cols());
    return a * b;
}

} // namespace detail

/// Decoder-only transformer (pre-norm, RMS norm, gated SiLU MLP) whose forward
/// pass takes explicit per-token position ids. Immutable after construction.
template <typename T>
class Transformer {
public:
    explicit Transformer(const ModelConfig& config) : config_(config) {
        config_.validate();
        params_ = init_parameters(config_);
        build_tables();
    }

    Transformer(const ModelConfig& config, Parameters<T> params) : config_(config), params_(std::move(params)) {
        config_.validate();
        build_tables();
    }

    const ModelConfig& config() const { return config_; }
    const Parameters<T>& params() const { return params_; }
    int width() const { return config_.d_model; }

    template <typename U>
    Transformer<U> cast() const {
        Parameters<U> p = Parameters<U>::zeros_like(config_);
        auto src = params_;
        std::vector<const Matrix<T>*> flat;
        src.for_each([&](const std::string&, Matrix<T>& m) { flat.push_back(&m); });
        std::size_t i = 0;
        p.for_each([&](const std::string&, Matrix<U>& m) { m = flat[i++]->template cast<U>(); });
        return Transformer<U>(config_, std::move(p));
    }

    KvCache<T> make_cache() const { return KvCache<T>(config_.n_layers, config_.d_model); }

    /// Scaled Gaussian init from a counter generator keyed on (seed, tensor name).
    static Parameters<T> init_parameters(const ModelConfig& c) {
        auto p = Parameters<T>::zeros_like(c);
        p.for_each([&](const std::string& name, Matrix<T>& m) {
            if (name.ends_with("norm")) {
                m.setOnes();
                return;
            }
            CounterRng rng(c.seed, name);
            double scale = 1.0 / std::sqrt(static_cast<double>(m.rows()));
            if (name == "tok_emb") scale = 1.0;
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * scale);
        });
        return p;
    }

    /// FNV-1a over the raw parameter bytes in visiting order.
    std::uint64_t parameter_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        params_.for_each([&](const std::string&, const Matrix<T>& m) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
            for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(T); ++i) {
                h ^= bytes[i];
                h *= 0x100000001b3ull;
            }
        });
        return h;
    }

    ForwardOutput<T> forward(const ForwardInput<T>& in, OpCounter* ops = nullptr) const {
        const int m = static_cast<int>(in.tokens.size());
        const int cached = in.cache ? in.cache->size() : 0;
        check_input(in, m, cached);

        ForwardOutput<T> out;
        out.delta.positions.assign(in.positions.begin(), in.positions.end());
        if (in.tags.empty())
            out.delta.tags.assign(static_cast<std::size_t>(m), Tag::Source);
        else
            out.delta.tags.assign(in.tags.begin(), in.tags.end());
        out.delta.keys.resize(static_cast<std::size_t>(config_.n_layers));
        out.delta.values.resize(static_cast<std::size_t>(config_.n_layers));
        if (m == 0) {
            out.logits = Matrix<T>(0, config_.vocab_size);
            for (int l = 0; l < config_.n_layers; ++l) {
                out.delta.keys[static_cast<std::size_t>(l)] = Matrix<T>(0, config_.d_model);
                out.delta.values[static_cast<std::size_t>(l)] = Matrix<T>(0, config_.d_model);
            }
            return out;
        }

        std::vector<PositionId> key_pos;
        key_pos.reserve(static_cast<std::size_t>(cached + m));
        if (in.cache) key_pos.assign(in.cache->positions().begin(), in.cache->positions().end());
        key_pos.insert(key_pos.end(), in.positions.begin(), in.positions.end());

        Matrix<T> x = embed(in.tokens);
        for (int l = 0; l < config_.n_layers; ++l) {
            const auto& L = params_.layers[static_cast<std::size_t>(l)];
            Matrix<T> xn = detail::rms_norm(x, L.attn_norm);
            Matrix<T> q = detail::matmul(xn, L.wq, ops);
            Matrix<T> k = detail::matmul(xn, L.wk, ops);
            Matrix<T> v = detail::matmul(xn, L.wv, ops);
            if (config_.pos_scheme == PosScheme::Rotary) {
                rotate_rows(q, in.positions, 1);
                rotate_rows(k, in.positions, 1);
            }
            Matrix<T> keys(cached + m, config_.d_model);
            Matrix<T> vals(cached + m, config_.d_model);
            if (cached > 0) {
                keys.topRows(cached) = in.cache->keys(l);
                vals.topRows(cached) = in.cache->values(l);
            }
            keys.bottomRows(m) = k;
            vals.bottomRows(m) = v;
            Matrix<T> attn = attention(q, keys, vals, in.positions, key_pos, cached, in.mask, ops, nullptr);
            x += detail::matmul(attn, L.wo, ops);

            Matrix<T> hn = detail::rms_norm(x, L.mlp_norm);
            Matrix<T> gate = detail::matmul(hn, L.w_gate, ops);
            Matrix<T> up = detail::matmul(hn, L.w_up, ops);
            Matrix<T> act = gate.unaryExpr([](T a) { return detail::silu(a); }).cwiseProduct(up);
            x += detail::matmul(act, L.w_down, ops);

            out.delta.keys[static_cast<std::size_t>(l)] = std::move(k);
            out.delta.values[static_cast<std::size_t>(l)] = std::move(v);
        }
        Matrix<T> xf = detail::rms_norm(x, params_.final_norm);
        out.logits = detail::matmul(xf, params_.head, ops);
        return out;
    }

    // Building blocks shared with the backward pass.

    Matrix<T> embed(std::span<const TokenId> tokens) const {
        Matrix<T> x(static_cast<Eigen::Index>(tokens.size()), config_.d_model);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] < 0 || tokens[i] >= config_.vocab_size)
                throw std::out_of_range("token id " + std::to_string(tokens[i]) + " outside vocabulary");
            x.row(static_cast<Eigen::Index>(i)) = params_.tok_emb.row(tokens[i]);
        }
        return x;
    }

    void rotate_rows(Matrix<T>& x, std::span<const PositionId> positions, int sign) const {
        const int hd = config_.head_dim();
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (int h = 0; h < config_.n_heads; ++h)
                rotary_.rotate(x.row(i).data() + h * hd, positions[static_cast<std::size_t>(i)], sign);
    }

    double alibi_slope(int head) const { return slopes_[static_cast<std::size_t>(head)]; }

    /// Multi-head attention of m new queries over (cached + m) keys. Only keys
    /// inside the causal envelope (index <= cached + row) are scored. When
    /// probs is non-null the per-head probability matrices are stored there.
    Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& keys, const Matrix<T>& vals,
                        std::span<const PositionId> query_pos, std::span<const PositionId> key_pos, int cached,
                        const MaskMatrix* mask, OpCounter* ops, std::vector<Matrix<T>>* probs) const {
        const int m = static_cast<int>(q.rows());
        const int n = static_cast<int>(keys.rows());
        const int hd = config_.head_dim();
        const T scale = T(1) / std::sqrt(static_cast<T>(hd));
        Matrix<T> out = Matrix<T>::Zero(m, config_.d_model);
        if (probs) probs->assign(static_cast<std::size_t>(config_.n_heads), Matrix<T>::Zero(m, n));
        Eigen::Matrix<T, Eigen::Dynamic, 1> scores;
        for (int h = 0; h < config_.n_heads; ++h) {
            const auto kh = keys.middleCols(h * hd, hd);
            const auto vh = vals.middleCols(h * hd, hd);
            for (int i = 0; i < m; ++i) {
                const int span_len = cached + i + 1;
                scores = kh.topRows(span_len) * q.row(i).segment(h * hd, hd).transpose();
                if (ops) {
                    ops->add(1, hd, span_len);
                    ops->add(1, span_len, hd);
                }
                T best = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < span_len; ++j) {
                    if (mask && !mask->at(i, j)) {
                        scores(j) = -std::numeric_limits<T>::infinity();
                        continue;
                    }
                    scores(j) *= scale;
                    if (config_.pos_scheme == PosScheme::Alibi) {
                        // Symmetric distance so that keys placed at higher positions
                        // (e.g. grouped layouts) still get a finite penalty.
                        const auto dist = std::abs(query_pos[static_cast<std::size_t>(i)] - key_pos[static_cast<std::size_t>(j)]);
                        scores(j) -= static_cast<T>(slopes_[static_cast<std::size_t>(h)] * dist);
                    }
                    best = std::max(best, scores(j));
                }
                if (best == -std::numeric_limits<T>::infinity()) continue; // nothing visible: zero output
                T total = 0;
                for (int j = 0; j < span_len; ++j) {
                    scores(j) = scores(j) == -std::numeric_limits<T>::infinity() ? T(0) : std::exp(scores(j) - best);
                    total += scores(j);
                }
                scores /= total;
                out.row(i).segment(h * hd, hd).noalias() = scores.transpose() * vh.topRows(span_len);
                if (probs) (*probs)[static_cast<std::size_t>(h)].row(i).head(span_len) = scores.transpose();
            }
        }
        return out;
    }

private:
    void check_input(const ForwardInput<T>& in, int m, int cached) const {
        if (static_cast<int>(in.positions.size()) != m) throw ShapeError("token_ids and position_ids differ in length");
        if (!in.tags.empty() && static_cast<int>(in.tags.size()) != m) throw ShapeError("tags and token_ids differ in length");
        for (PositionId p : in.positions) {
            if (p < 0) throw std::invalid_argument("negative position id");
            if (p >= config_.max_position)
                throw PositionOverflow("position id " + std::to_string(p) + " >= max_position " + std::to_string(config_.max_position));
        }
        if (in.cache && (in.cache->n_layers() != config_.n_layers || in.cache->width() != config_.d_model))
            throw ShapeError("cache shape does not match the model");
        if (in.mask && (in.mask->rows() != m || in.mask->cols() != cached + m))
            throw ShapeError("mask is " + std::to_string(in.mask->rows()) + "x" + std::to_string(in.mask->cols()) +
                             ", expected " + std::to_string(m) + "x" + std::to_string(cached + m));
    }

    void build_tables() {
        if (config_.pos_scheme == PosScheme::Rotary)
            rotary_ = RotaryTable<T>(config_.head_dim(), config_.max_position, config_.rotary_base);
        if (config_.pos_scheme == PosScheme::Alibi) slopes_ = alibi_slopes(config_.n_heads);
    }

    ModelConfig config_;
    Parameters<T> params_;
    RotaryTable<T> rotary_;
    std::vector<double> slopes_;
};

} // namespace expost
