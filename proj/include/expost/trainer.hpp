#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "expost/backprop.hpp"
#include "expost/data.hpp"
#include "expost/engine.hpp"
#include "expost/metrics.hpp"

namespace expost {

/// Which parts of policy-consistent fine-tuning are active.
enum class TrainVariant {
    Full,   // slot layout + policy mask
    NoMask, // slot layout + plain causal mask
    NoSlot, // contiguous layout + policy mask
};

inline std::string variant_name(TrainVariant v) {
    switch (v) {
    case TrainVariant::Full: return "full";
    case TrainVariant::NoMask: return "no-mask";
    case TrainVariant::NoSlot: return "no-slot";
    }
    return "?";
}

inline SampleOptions sample_options(TrainVariant v) {
    SampleOptions o;
    o.layout = v == TrainVariant::NoSlot ? TrainLayout::Contiguous : TrainLayout::Slot;
    o.policy_mask = v != TrainVariant::NoMask;
    return o;
}

/// Streaming setup that matches how each variant was trained.
inline Strategy eval_strategy(TrainVariant v, int slot_len) {
    return v == TrainVariant::NoSlot ? Strategy::naive_reuse() : Strategy::expost(slot_len);
}
inline VisibilityMode eval_visibility(TrainVariant v) {
    return v == TrainVariant::NoMask ? VisibilityMode::Causal : VisibilityMode::Policy;
}

struct TrainConfig {
    int steps = 2000;
    int batch = 8;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double clip_norm = 1.0;
    int warmup = 100;
    std::uint64_t seed = 0;

    bool operator==(const TrainConfig&) const = default;
};

struct TrainResult {
    Transformer<float> model;
    std::vector<double> losses; // mean loss per step
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
class Adam {
public:
    Adam(const ModelConfig& c, const TrainConfig& cfg) : cfg_(cfg), m_(Parameters<T>::zeros_like(c)), v_(Parameters<T>::zeros_like(c)) {}

    void step(Parameters<T>& p, const Parameters<T>& g, double lr) {
        ++t_;
        const double b1c = 1 - std::pow(cfg_.beta1, t_);
        const double b2c = 1 - std::pow(cfg_.beta2, t_);
        std::vector<Matrix<T>*> ms, vs, gs;
        m_.for_each([&](const std::string&, Matrix<T>& x) { ms.push_back(&x); });
        v_.for_each([&](const std::string&, Matrix<T>& x) { vs.push_back(&x); });
        const_cast<Parameters<T>&>(g).for_each([&](const std::string&, Matrix<T>& x) { gs.push_back(&x); });
        std::size_t i = 0;
        p.for_each([&](const std::string&, Matrix<T>& w) {
            auto& m = *ms[i];
            auto& v = *vs[i];
            const auto& gr = *gs[i];
            ++i;
            m = static_cast<T>(cfg_.beta1) * m + static_cast<T>(1 - cfg_.beta1) * gr;
            v = static_cast<T>(cfg_.beta2) * v + static_cast<T>(1 - cfg_.beta2) * gr.cwiseProduct(gr);
            w.array() -= static_cast<T>(lr) * (m.array() / static_cast<T>(b1c)) /
                         ((v.array() / static_cast<T>(b2c)).sqrt() + static_cast<T>(cfg_.eps));
        });
    }

private:
    TrainConfig cfg_;
    Parameters<T> m_, v_;
    int t_ = 0;
};

/// Teacher-forced cross-entropy on one sample; accumulates gradients into acc.
template <typename T>
double sample_loss_and_grad(const Transformer<T>& model, const TrainingSample& s, Parameters<T>* acc, double weight) {
    const auto tokens = s.layout.tokens();
    const auto positions = s.layout.positions();
    auto tape = forward_with_tape(model, tokens, positions, s.mask);
    Matrix<T> dlogits;
    const auto lr = cross_entropy<T>(tape.logits, s.labels, dlogits);
    if (acc && lr.count > 0) {
        dlogits *= static_cast<T>(weight);
        auto g = backward(model, tape, dlogits);
        std::vector<Matrix<T>*> dst;
        acc->for_each([&](const std::string&, Matrix<T>& x) { dst.push_back(&x); });
        std::size_t i = 0;
        g.params.for_each([&](const std::string&, Matrix<T>& x) { *dst[i++] += x; });
    }
    return lr.loss;
}

/// Adam with global-norm clipping over freshly sampled corpus pairs.
/// Deterministic given (model seed, corpus, config).
inline TrainResult train(const Transformer<float>& init, const ToyCorpusSpec& corpus, int slot_len, const PolicySpec& policy,
                         RoleLengths roles, TrainVariant variant, const TrainConfig& cfg,
                         const std::function<void(int, double)>& on_step = {}) {
    const auto& mc = init.config();
    if (corpus.vocab_size > mc.vocab_size) throw ConfigError("corpus vocabulary exceeds model vocabulary");
    TrainResult res{init, {}};
    if (cfg.steps <= 0) return res;
    const auto perm = content_bijection(corpus);
    const SampleOptions sopt = sample_options(variant);
    Parameters<float> params = init.params();
    Adam<float> opt(mc, cfg);
    CounterRng pick(cfg.seed, "batch");
    for (int step = 0; step < cfg.steps; ++step) {
        Transformer<float> model(mc, params);
        auto grad = Parameters<float>::zeros_like(mc);
        double loss = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto pair = toy_pair(corpus, pick.uniform_int(0, corpus.size - 1), perm);
            const auto s = build_training_sequence(pair, slot_len, policy, roles, sopt);
            loss += sample_loss_and_grad(model, s, &grad, 1.0 / cfg.batch);
        }
        loss /= cfg.batch;
        if (!std::isfinite(loss)) throw DivergenceError("non-finite loss at step " + std::to_string(step));
        double sq = 0;
        grad.for_each([&](const std::string&, const Matrix<float>& g) { sq += static_cast<double>(g.squaredNorm()); });
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm at step " + std::to_string(step));
        if (norm > cfg.clip_norm)
            grad.for_each([&](const std::string&, Matrix<float>& g) { g *= static_cast<float>(cfg.clip_norm / norm); });
        const double warm = cfg.warmup > 0 ? std::min(1.0, (step + 1.0) / cfg.warmup) : 1.0;
        const double decay = 0.5 * (1 + std::cos(std::numbers::pi * step / cfg.steps));
        opt.step(params, grad, cfg.lr * warm * (0.1 + 0.9 * decay));
        res.losses.push_back(loss);
        if (on_step) on_step(step, loss);
    }
    res.model = Transformer<float>(mc, std::move(params));
    return res;
}

struct EvalResult {
    double accuracy = 0;
    double laal = 0;
    double cum_flops = 0;
    int samples = 0;
};

/// Free-running greedy streaming decode over held-out pairs.
template <typename T>
EvalResult evaluate(const Transformer<T>& model, const std::vector<SentencePair>& pairs, const PolicySpec& policy,
                    const Strategy& strategy, RoleLengths roles, VisibilityMode vis = VisibilityMode::Policy) {
    EvalResult r;
    EngineOptions opt;
    opt.roles = roles;
    opt.visibility = vis;
    opt.record_context = false;
    for (const auto& p : pairs) {
        const auto ref = streaming_target(p, policy);
        const auto trace = run_stream(model, p.source, policy, strategy, opt);
        r.accuracy += token_accuracy(trace.output, ref);
        const auto g = delays_from_trace(trace);
        if (!g.empty())
            r.laal += laal(g, static_cast<int>(p.source.size()), static_cast<int>(trace.output.size()), static_cast<int>(ref.size()));
        r.cum_flops += cumulative_flops(trace);
        ++r.samples;
    }
    if (r.samples > 0) {
        r.accuracy /= r.samples;
        r.laal /= r.samples;
        r.cum_flops /= r.samples;
    }
    return r;
}

struct VisibilityViolation {
    int target = 0; // 1-based target index j
    int source = 0; // 1-based source index i
    double grad = 0;
    bool operator==(const VisibilityViolation&) const = default;
};

struct GradVisibilityReport {
    int constrained_pairs = 0;
    std::vector<VisibilityViolation> violations;
    double max_illegal_grad = 0; // reverse mode, over constrained pairs
    double max_fd = 0;           // finite differences, over constrained pairs
    bool passed() const { return violations.empty(); }
};

/// For every target j and every source i > g(j), d loss(t_j) / d embed(s_i)
/// must be exactly zero. Checked in reverse mode and, when fd_step > 0, with
/// central differences along a random direction.
template <typename T>
GradVisibilityReport grad_visibility_check(const Transformer<T>& model, const TrainingSample& s, double fd_step = 0,
                                           std::uint64_t seed = 0) {
    GradVisibilityReport rep;
    const auto tokens = s.layout.tokens();
    const auto positions = s.layout.positions();
    const int n = s.layout.size();
    std::vector<int> src_row;
    for (int r = 0; r < n; ++r)
        if (s.layout.entries[static_cast<std::size_t>(r)].tag == Tag::Source) src_row.push_back(r);
    std::vector<int> emit_row;
    for (int r = 0; r < n; ++r)
        if (s.labels[static_cast<std::size_t>(r)] >= 0) emit_row.push_back(r);
    // Target ordinal predicted by each emitter row.
    std::vector<int> tgt_index;
    {
        int t = 0;
        for (int r = 0; r < n; ++r) {
            if (s.layout.entries[static_cast<std::size_t>(r)].tag == Tag::Target) ++t;
            if (s.labels[static_cast<std::size_t>(r)] >= 0) tgt_index.push_back(t + 1);
        }
    }

    const auto tape = forward_with_tape(model, tokens, positions, s.mask);
    const Matrix<T> x0 = model.embed(tokens);
    CounterRng rng(seed, "fd-direction");
    for (std::size_t e = 0; e < emit_row.size(); ++e) {
        const int r = emit_row[e];
        const int j = tgt_index[e];
        const int gj = s.g[static_cast<std::size_t>(j - 1)];
        const TokenId y = s.labels[static_cast<std::size_t>(r)];
        Matrix<T> dlogits = Matrix<T>::Zero(tape.logits.rows(), tape.logits.cols());
        {
            const auto row = tape.logits.row(r);
            const T mx = row.maxCoeff();
            Eigen::Matrix<T, 1, Eigen::Dynamic> ex = (row.array() - mx).exp().matrix();
            dlogits.row(r) = ex / ex.sum();
            dlogits(r, y) -= T(1);
        }
        const auto grads = backward(model, tape, dlogits);
        auto loss_at = [&](const Matrix<T>& x) {
            const auto t2 = forward_with_tape(model, tokens, positions, s.mask, &x);
            const auto row = t2.logits.row(r);
            const T mx = row.maxCoeff();
            return static_cast<double>(std::log((row.array() - mx).exp().sum()) + mx - row(y));
        };
        for (std::size_t i = static_cast<std::size_t>(gj); i < src_row.size(); ++i) {
            ++rep.constrained_pairs;
            const double gnorm = static_cast<double>(grads.input.row(src_row[i]).cwiseAbs().maxCoeff());
            rep.max_illegal_grad = std::max(rep.max_illegal_grad, gnorm);
            double fd = 0;
            if (fd_step > 0) {
                Eigen::Matrix<T, 1, Eigen::Dynamic> dir(x0.cols());
                for (Eigen::Index k = 0; k < dir.size(); ++k) dir(k) = static_cast<T>(rng.normal());
                dir /= dir.norm();
                Matrix<T> xp = x0, xm = x0;
                xp.row(src_row[i]) += static_cast<T>(fd_step) * dir;
                xm.row(src_row[i]) -= static_cast<T>(fd_step) * dir;
                fd = std::abs(loss_at(xp) - loss_at(xm)) / (2 * fd_step);
                rep.max_fd = std::max(rep.max_fd, fd);
            }
            if (gnorm != 0.0) rep.violations.push_back({j, static_cast<int>(i) + 1, gnorm});
        }
    }
    return rep;
}

} // namespace expost
