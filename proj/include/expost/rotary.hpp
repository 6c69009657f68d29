#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "expost/types.hpp"

namespace expost {

/// Rotates consecutive pairs (x[2i], x[2i+1]) by position * base^(-2i/dim).
template <typename T>
void rotate_in_place(std::span<T> x, double position, double base) {
    if (x.size() % 2 != 0) throw std::invalid_argument("rotary embedding needs an even length vector");
    const auto dim = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size() / 2; ++i) {
        const double theta = position * std::pow(base, -2.0 * static_cast<double>(i) / dim);
        const T c = static_cast<T>(std::cos(theta));
        const T s = static_cast<T>(std::sin(theta));
        const T a = x[2 * i];
        const T b = x[2 * i + 1];
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

template <typename T>
std::vector<T> apply_rotary(std::span<const T> v, PositionId position, double base = 10000.0) {
    if (position < 0) throw std::invalid_argument("rotary position must be non-negative");
    std::vector<T> out(v.begin(), v.end());
    rotate_in_place<T>(out, static_cast<double>(position), base);
    return out;
}

/// Precomputed cos/sin for every (position, pair) up to max_position.
template <typename T>
class RotaryTable {
public:
    RotaryTable() = default;
    RotaryTable(int head_dim, int max_position, double base)
        : half_(head_dim / 2), cos_(static_cast<std::size_t>(max_position) * half_),
          sin_(cos_.size()) {
        for (int p = 0; p < max_position; ++p)
            for (int i = 0; i < half_; ++i) {
                const double theta = p * std::pow(base, -2.0 * i / static_cast<double>(head_dim));
                cos_[static_cast<std::size_t>(p) * half_ + i] = static_cast<T>(std::cos(theta));
                sin_[static_cast<std::size_t>(p) * half_ + i] = static_cast<T>(std::sin(theta));
            }
    }

    /// sign = -1 applies the inverse rotation (used by the backward pass).
    void rotate(T* x, PositionId p, int sign = 1) const {
        const T* c = cos_.data() + static_cast<std::size_t>(p) * half_;
        const T* s = sin_.data() + static_cast<std::size_t>(p) * half_;
        for (int i = 0; i < half_; ++i) {
            const T a = x[2 * i];
            const T b = x[2 * i + 1];
            const T si = sign > 0 ? s[i] : -s[i];
            x[2 * i] = a * c[i] - b * si;
            x[2 * i + 1] = a * si + b * c[i];
        }
    }

private:
    int half_ = 0;
    std::vector<T> cos_;
    std::vector<T> sin_;
};

/// Standard ALiBi head slopes: for a power-of-two head count n the sequence is
/// 2^(-8/n), 2^(-16/n), ...; other counts interleave the next power of two.
inline std::vector<double> alibi_slopes(int n_heads) {
    auto pow2 = [](int n) {
        std::vector<double> s(static_cast<std::size_t>(n));
        const double start = std::pow(2.0, -8.0 / n);
        for (int i = 0; i < n; ++i) s[static_cast<std::size_t>(i)] = std::pow(start, i + 1);
        return s;
    };
    if (n_heads < 1) throw std::invalid_argument("n_heads must be >= 1");
    int closest = 1;
    while (closest * 2 <= n_heads) closest *= 2;
    auto slopes = pow2(closest);
    if (closest != n_heads) {
        auto extra = pow2(2 * closest);
        for (int i = 0; static_cast<int>(slopes.size()) < n_heads; i += 2)
            slopes.push_back(extra[static_cast<std::size_t>(i)]);
    }
    return slopes;
}

inline double alibi_bias(int head_index, int n_heads, PositionId query_pos, PositionId key_pos) {
    if (key_pos > query_pos) throw std::invalid_argument("alibi bias is only defined for key_pos <= query_pos");
    if (head_index < 0 || head_index >= n_heads) throw std::out_of_range("head index out of range");
    return -alibi_slopes(n_heads)[static_cast<std::size_t>(head_index)] * static_cast<double>(query_pos - key_pos);
}

} // namespace expost
