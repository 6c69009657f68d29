#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "expost/model.hpp"

namespace expost {

/// Activations saved by a full-sequence (uncached) forward pass.
template <typename T>
struct Tape {
    using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    struct Layer {
        Matrix<T> x_in, xn1, q, k, v, attn, h, xn2, gate, up, act;
        Vec r1, r2;
        std::vector<Matrix<T>> probs;
    };
    std::vector<TokenId> tokens;
    std::vector<PositionId> positions;
    std::vector<Layer> layers;
    Matrix<T> x_final, xn_final;
    Vec r_final;
    Matrix<T> logits;
};

template <typename T>
struct Gradients {
    Parameters<T> params;
    Matrix<T> input; // d loss / d (input embedding rows), [len x d]
};

/// Forward over a whole sequence with an explicit square mask, keeping the tape.
template <typename T>
Tape<T> forward_with_tape(const Transformer<T>& model, std::span<const TokenId> tokens,
                          std::span<const PositionId> positions, const MaskMatrix& mask,
                          const Matrix<T>* input_override = nullptr) {
    const auto& cfg = model.config();
    const int m = static_cast<int>(tokens.size());
    if (static_cast<int>(positions.size()) != m) throw ShapeError("token_ids and position_ids differ in length");
    if (mask.rows() != m || mask.cols() != m) throw ShapeError("training mask must be square over the sequence");
    for (PositionId p : positions)
        if (p < 0 || p >= cfg.max_position) throw PositionOverflow("position id out of range: " + std::to_string(p));

    Tape<T> tape;
    tape.tokens.assign(tokens.begin(), tokens.end());
    tape.positions.assign(positions.begin(), positions.end());
    tape.layers.resize(static_cast<std::size_t>(cfg.n_layers));

    Matrix<T> x = model.embed(tokens);
    if (input_override) {
        if (input_override->rows() != m || input_override->cols() != cfg.d_model) throw ShapeError("input override shape");
        x = *input_override;
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& P = model.params().layers[static_cast<std::size_t>(l)];
        auto& L = tape.layers[static_cast<std::size_t>(l)];
        L.x_in = x;
        L.xn1 = detail::rms_norm(x, P.attn_norm, &L.r1);
        L.q = L.xn1 * P.wq;
        L.k = L.xn1 * P.wk;
        L.v = L.xn1 * P.wv;
        if (cfg.pos_scheme == PosScheme::Rotary) {
            model.rotate_rows(L.q, positions, 1);
            model.rotate_rows(L.k, positions, 1);
        }
        L.attn = model.attention(L.q, L.k, L.v, positions, positions, 0, &mask, nullptr, &L.probs);
        L.h = x + L.attn * P.wo;
        L.xn2 = detail::rms_norm(L.h, P.mlp_norm, &L.r2);
        L.gate = L.xn2 * P.w_gate;
        L.up = L.xn2 * P.w_up;
        L.act = L.gate.unaryExpr([](T a) { return detail::silu(a); }).cwiseProduct(L.up);
        x = L.h + L.act * P.w_down;
    }
    tape.x_final = x;
    tape.xn_final = detail::rms_norm(x, model.params().final_norm, &tape.r_final);
    tape.logits = tape.xn_final * model.params().head;
    return tape;
}

namespace detail {

/// Backward of y = x * r * gain with r = 1/sqrt(mean(x^2) + eps).
template <typename T>
Matrix<T> rms_norm_backward(const Matrix<T>& dy, const Matrix<T>& x, const Eigen::Matrix<T, Eigen::Dynamic, 1>& r,
                            const Matrix<T>& gain, Matrix<T>& dgain) {
    Matrix<T> dx(x.rows(), x.cols());
    const T d = static_cast<T>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const auto dyg = dy.row(i).cwiseProduct(gain);
        dgain += dy.row(i).cwiseProduct(x.row(i)) * r(i);
        const T dot = dyg.dot(x.row(i));
        dx.row(i) = dyg * r(i) - x.row(i) * (r(i) * r(i) * r(i) * dot / d);
    }
    return dx;
}

} // namespace detail

/// Reverse-mode gradients of a scalar loss given d loss / d logits.
template <typename T>
Gradients<T> backward(const Transformer<T>& model, const Tape<T>& tape, const Matrix<T>& dlogits) {
    const auto& cfg = model.config();
    const auto& params = model.params();
    const int m = static_cast<int>(tape.tokens.size());
    const int hd = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    Gradients<T> g{Parameters<T>::zeros_like(cfg), Matrix<T>()};
    g.params.head.noalias() += tape.xn_final.transpose() * dlogits;
    Matrix<T> dxn = dlogits * params.head.transpose();
    Matrix<T> dx = detail::rms_norm_backward(dxn, tape.x_final, tape.r_final, params.final_norm, g.params.final_norm);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& P = params.layers[static_cast<std::size_t>(l)];
        const auto& L = tape.layers[static_cast<std::size_t>(l)];
        auto& G = g.params.layers[static_cast<std::size_t>(l)];

        // MLP
        G.w_down.noalias() += L.act.transpose() * dx;
        Matrix<T> dact = dx * P.w_down.transpose();
        Matrix<T> dgate(m, cfg.d_ff), dup(m, cfg.d_ff);
        for (Eigen::Index i = 0; i < dgate.size(); ++i) {
            const T a = L.gate.data()[i];
            const T s = detail::sigmoid(a);
            dup.data()[i] = dact.data()[i] * a * s;
            dgate.data()[i] = dact.data()[i] * L.up.data()[i] * s * (T(1) + a * (T(1) - s));
        }
        G.w_gate.noalias() += L.xn2.transpose() * dgate;
        G.w_up.noalias() += L.xn2.transpose() * dup;
        Matrix<T> dxn2 = dgate * P.w_gate.transpose() + dup * P.w_up.transpose();
        Matrix<T> dh = dx + detail::rms_norm_backward(dxn2, L.h, L.r2, P.mlp_norm, G.mlp_norm);

        // attention
        G.wo.noalias() += L.attn.transpose() * dh;
        Matrix<T> dattn = dh * P.wo.transpose();
        Matrix<T> dq = Matrix<T>::Zero(m, cfg.d_model);
        Matrix<T> dk = Matrix<T>::Zero(m, cfg.d_model);
        Matrix<T> dv = Matrix<T>::Zero(m, cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Matrix<T>& p = L.probs[static_cast<std::size_t>(h)];
            const auto doh = dattn.middleCols(h * hd, hd);
            dv.middleCols(h * hd, hd).noalias() += p.transpose() * doh;
            Matrix<T> dp = doh * L.v.middleCols(h * hd, hd).transpose();
            Matrix<T> ds = p.cwiseProduct(dp);
            for (int i = 0; i < m; ++i) ds.row(i) -= p.row(i) * ds.row(i).sum();
            ds *= scale;
            dq.middleCols(h * hd, hd).noalias() += ds * L.k.middleCols(h * hd, hd);
            dk.middleCols(h * hd, hd).noalias() += ds.transpose() * L.q.middleCols(h * hd, hd);
        }
        if (cfg.pos_scheme == PosScheme::Rotary) {
            model.rotate_rows(dq, tape.positions, -1);
            model.rotate_rows(dk, tape.positions, -1);
        }
        G.wq.noalias() += L.xn1.transpose() * dq;
        G.wk.noalias() += L.xn1.transpose() * dk;
        G.wv.noalias() += L.xn1.transpose() * dv;
        Matrix<T> dxn1 = dq * P.wq.transpose() + dk * P.wk.transpose() + dv * P.wv.transpose();
        dx = dh + detail::rms_norm_backward(dxn1, L.x_in, L.r1, P.attn_norm, G.attn_norm);
    }
    g.input = dx;
    for (int i = 0; i < m; ++i) g.params.tok_emb.row(tape.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    return g;
}

struct LossResult {
    double loss = 0.0;
    int count = 0;
};

/// Mean cross-entropy over rows with label >= 0; writes d loss / d logits.
template <typename T>
LossResult cross_entropy(const Matrix<T>& logits, std::span<const TokenId> labels, Matrix<T>& dlogits) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) throw ShapeError("labels/logits row mismatch");
    dlogits = Matrix<T>::Zero(logits.rows(), logits.cols());
    LossResult res;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] >= 0) ++res.count;
    if (res.count == 0) return res;
    const T inv = T(1) / static_cast<T>(res.count);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const TokenId y = labels[static_cast<std::size_t>(i)];
        if (y < 0) continue;
        const T mx = logits.row(i).maxCoeff();
        Eigen::Matrix<T, 1, Eigen::Dynamic> e = (logits.row(i).array() - mx).exp().matrix();
        const T z = e.sum();
        res.loss += static_cast<double>(std::log(z) + mx - logits(i, y));
        dlogits.row(i) = e / z * inv;
        dlogits(i, y) -= inv;
    }
    res.loss /= res.count;
    return res;
}

} // namespace expost
