#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "expost/types.hpp"

namespace expost {

enum class PosScheme : std::uint8_t { Rotary, Alibi, None };

inline std::string_view pos_scheme_name(PosScheme s) {
    switch (s) {
    case PosScheme::Rotary: return "rotary";
    case PosScheme::Alibi: return "alibi";
    case PosScheme::None: return "none";
    }
    return "?";
}

inline PosScheme parse_pos_scheme(std::string_view s) {
    if (s == "rotary") return PosScheme::Rotary;
    if (s == "alibi") return PosScheme::Alibi;
    if (s == "none") return PosScheme::None;
    throw ConfigError("unknown positional scheme: " + std::string(s));
}

struct ModelConfig {
    int d_model = 32;
    int n_heads = 4;
    int n_layers = 2;
    int d_ff = 64;
    int vocab_size = 64;
    PosScheme pos_scheme = PosScheme::Rotary;
    double rotary_base = 10000.0;
    int max_position = 1024;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1 || max_position < 1)
            throw ConfigError("model dimensions must be >= 1");
        if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
        if (d_model % n_heads != 0) throw ConfigError("n_heads must divide d_model");
        if (pos_scheme == PosScheme::Rotary && head_dim() % 2 != 0)
            throw ConfigError("rotary embedding needs an even head_dim, got " + std::to_string(head_dim()));
        if (!(rotary_base > 0.0)) throw ConfigError("rotary_base must be positive");
    }

    /// Exact parameter count: untied embedding and head, four attention
    /// projections and three gated-MLP matrices per layer, two norm gains per
    /// layer plus the final norm. No biases.
    std::int64_t parameter_count() const {
        const std::int64_t d = d_model, f = d_ff, v = vocab_size, l = n_layers;
        return v * d + l * (4 * d * d + 3 * d * f + 2 * d) + d + d * v;
    }

    bool operator==(const ModelConfig&) const = default;
};

} // namespace expost
