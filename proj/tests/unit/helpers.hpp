#pragma once

#include <vector>

#include "expost/expost.hpp"

namespace expost::test {

inline ModelConfig tiny_config(PosScheme scheme = PosScheme::Rotary, std::uint64_t seed = 3, int layers = 2) {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = layers;
    c.d_ff = 24;
    c.vocab_size = 40;
    c.pos_scheme = scheme;
    c.max_position = 512;
    c.seed = seed;
    return c;
}

inline std::vector<TokenId> iota_tokens(int n, TokenId first = kFirstContentToken) {
    std::vector<TokenId> v;
    for (int i = 0; i < n; ++i) v.push_back(first + i);
    return v;
}

inline std::vector<int> waitk_delays(int n_targets, int k, int src_len) {
    std::vector<int> g;
    for (int j = 1; j <= n_targets; ++j) g.push_back(waitk_g(j, k, src_len));
    return g;
}

} // namespace expost::test
