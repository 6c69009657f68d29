#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "expost/config.hpp"

namespace expost {

/// Analytic FLOP model of one forward call with c cached entries and m new
/// tokens. One multiply-accumulate counts as two FLOPs.
///
///   FLOPs(c, m) = 2 * [ n_layers * ( 4 m d^2                 q, k, v, o projections
///                                  + 3 m d d_ff              gated MLP
///                                  + 2 d (m c + m(m+1)/2) )  scores and weighted values
///                     + m d vocab ]                          output head
///
/// The attention term counts each new row against the cache plus the causal
/// triangle of new tokens, exactly what the forward pass issues.
struct FlopsModel {
    double d_model = 0;
    double d_ff = 0;
    double n_layers = 0;
    double vocab = 0;

    static FlopsModel from(const ModelConfig& c) {
        return {static_cast<double>(c.d_model), static_cast<double>(c.d_ff), static_cast<double>(c.n_layers),
                static_cast<double>(c.vocab_size)};
    }

    /// Dimensions of an 8B-parameter class decoder, for costing traces at the
    /// scale where the compute comparison is meaningful.
    static FlopsModel llm_8b() { return {4096, 14336, 32, 128256}; }

    double per_token_linear() const {
        return n_layers * (4 * d_model * d_model + 3 * d_model * d_ff) + d_model * vocab;
    }
};

inline double flops_forward(const FlopsModel& fm, std::int64_t cached, std::int64_t fresh) {
    if (cached < 0 || fresh < 0) throw std::invalid_argument("flops_forward needs non-negative counts");
    const double c = static_cast<double>(cached);
    const double m = static_cast<double>(fresh);
    const double attn = 2 * fm.d_model * (m * c + m * (m + 1) / 2);
    return 2 * (fm.n_layers * (4 * m * fm.d_model * fm.d_model + 3 * m * fm.d_model * fm.d_ff + attn) + m * fm.d_model * fm.vocab);
}

/// Length-adaptive average lagging in token units.
inline double laal(std::span<const int> g, int src_len, int hyp_len, int ref_len) {
    if (g.empty()) throw std::invalid_argument("laal needs a non-empty delay sequence");
    if (src_len < 1 || hyp_len < 1 || ref_len < 1) throw std::invalid_argument("laal needs lengths >= 1");
    const double gamma = static_cast<double>(std::max(hyp_len, ref_len)) / src_len;
    int tau = hyp_len;
    for (std::size_t j = 0; j < g.size(); ++j)
        if (g[j] >= src_len) {
            tau = static_cast<int>(j) + 1;
            break;
        }
    tau = std::min<int>(tau, static_cast<int>(g.size()));
    double sum = 0;
    for (int j = 1; j <= tau; ++j) sum += g[static_cast<std::size_t>(j - 1)] - (j - 1) / gamma;
    return sum / tau;
}

/// Plain average lagging: the rate uses the hypothesis length only.
inline double average_lagging(std::span<const int> g, int src_len, int hyp_len) {
    return laal(g, src_len, hyp_len, hyp_len);
}

/// Position-wise match rate against the reference (which includes its end token).
inline double token_accuracy(std::span<const std::int32_t> hyp, std::span<const std::int32_t> ref) {
    if (ref.empty()) return hyp.empty() ? 1.0 : 0.0;
    std::size_t hits = 0;
    for (std::size_t j = 0; j < ref.size() && j < hyp.size(); ++j) hits += hyp[j] == ref[j];
    return static_cast<double>(hits) / static_cast<double>(ref.size());
}

/// Least-squares slope of log(y) on log(x).
inline double fitted_exponent(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fitted_exponent needs >= 2 paired points");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct RunRow {
    std::string strategy;
    std::string policy;
    int k_or_n = 0;
    double laal = 0;
    double cum_gflops = 0;
    double token_accuracy = 0;

    static std::string csv_header() { return "strategy,policy,k_or_n,laal,cum_gflops,token_accuracy"; }

    std::string csv() const {
        std::ostringstream os;
        os << strategy << ',' << policy << ',' << k_or_n << ',' << std::setprecision(10) << laal << ',' << cum_gflops << ','
           << token_accuracy;
        return os.str();
    }
};

} // namespace expost
