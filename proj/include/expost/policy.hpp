#pragma once

#include <algorithm>
#include <charconv>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "expost/types.hpp"

namespace expost {

enum class PolicyKind { WaitK, ReadN };

struct PolicySpec {
    PolicyKind kind = PolicyKind::WaitK;
    int k = 3;
    int n = 5;
    /// Max target tokens per WRITE phase (read-n only).
    int write_cap = 16;

    static PolicySpec wait_k(int k) {
        if (k < 1) throw ConfigError("wait-k needs k >= 1");
        return {PolicyKind::WaitK, k, 1, 16};
    }
    static PolicySpec read_n(int n, int write_cap = 16) {
        if (n < 1) throw ConfigError("read-n needs n >= 1");
        if (write_cap < 1) throw ConfigError("read-n needs write_cap >= 1");
        return {PolicyKind::ReadN, 1, n, write_cap};
    }

    int parameter() const { return kind == PolicyKind::WaitK ? k : n; }

    /// `wait-k:K` or `read-n:N[,cap]`.
    static PolicySpec parse(std::string_view s) {
        auto to_int = [&](std::string_view v) {
            int out = 0;
            auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
            if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("bad policy number in '" + std::string(s) + "'");
            return out;
        };
        if (s.starts_with("wait-k:")) return wait_k(to_int(s.substr(7)));
        if (s.starts_with("read-n:")) {
            auto rest = s.substr(7);
            auto comma = rest.find(',');
            if (comma == std::string_view::npos) return read_n(to_int(rest));
            return read_n(to_int(rest.substr(0, comma)), to_int(rest.substr(comma + 1)));
        }
        throw ConfigError("policy must be wait-k:K or read-n:N[,cap], got '" + std::string(s) + "'");
    }

    std::string to_string() const {
        if (kind == PolicyKind::WaitK) return "wait-k:" + std::to_string(k);
        return "read-n:" + std::to_string(n) + "," + std::to_string(write_cap);
    }

    bool operator==(const PolicySpec&) const = default;
};

struct Action {
    enum class Kind { Read, Write, Finish };
    Kind kind = Kind::Finish;
    int count = 0; // tokens to read, Read only

    static Action read(int c) {
        if (c < 1) throw std::invalid_argument("READ count must be >= 1");
        return {Kind::Read, c};
    }
    static Action write() { return {Kind::Write, 0}; }
    static Action finish() { return {Kind::Finish, 0}; }

    bool operator==(const Action&) const = default;
};

inline std::string action_name(const Action& a) {
    switch (a.kind) {
    case Action::Kind::Read: return "READ(" + std::to_string(a.count) + ")";
    case Action::Kind::Write: return "WRITE";
    case Action::Kind::Finish: return "FINISH";
    }
    return "?";
}

/// Scheduler inputs. src_len is the full stream length, known once the stream ends.
struct PolicyState {
    int src_read = 0;
    int src_len = 0;
    int tgt_emitted = 0;
    int segment_writes = 0; // writes since the last READ
    bool last_emitted_is_eos = false;
    bool last_emitted_is_eoseg = false;
    bool finished = false;

    bool src_exhausted() const { return src_read >= src_len; }
};

/// Source tokens visible when the j-th target (1-based) is written under wait-k.
inline int waitk_g(int j, int k, int src_len) {
    if (j < 1 || k < 1 || src_len < 1) throw std::invalid_argument("waitk_g needs j, k, |S| >= 1");
    return std::min(k + j - 1, src_len);
}

inline Action next_action(const PolicySpec& spec, const PolicyState& st) {
    if (st.finished || st.last_emitted_is_eos) return Action::finish();
    if (st.src_len == 0 && st.tgt_emitted == 0) return Action::finish();
    const int remaining = st.src_len - st.src_read;
    if (spec.kind == PolicyKind::WaitK) {
        if (remaining > 0 && st.src_read < spec.k + st.tgt_emitted) return Action::read(1);
        return Action::write();
    }
    if (remaining > 0) {
        const bool segment_done = st.src_read == 0 || st.last_emitted_is_eoseg || st.segment_writes >= spec.write_cap;
        if (segment_done) return Action::read(std::min(spec.n, remaining));
    }
    return Action::write();
}

/// Applies an action's bookkeeping to the scheduler state.
inline void advance(PolicyState& st, const Action& a, TokenId emitted = -1) {
    switch (a.kind) {
    case Action::Kind::Read:
        st.src_read += a.count;
        st.segment_writes = 0;
        st.last_emitted_is_eoseg = false;
        break;
    case Action::Kind::Write:
        ++st.tgt_emitted;
        ++st.segment_writes;
        st.last_emitted_is_eos = emitted == special::kEos;
        st.last_emitted_is_eoseg = emitted == special::kEndOfSegment;
        break;
    case Action::Kind::Finish: st.finished = true; break;
    }
}

class PolicyError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Throws PolicyError unless g is monotone non-decreasing and within [0, src_len].
inline void check_delays(const std::vector<int>& g, int src_len) {
    for (std::size_t j = 0; j < g.size(); ++j) {
        if (g[j] < 0 || g[j] > src_len) throw PolicyError("delay g(" + std::to_string(j + 1) + ") out of range");
        if (j > 0 && g[j] < g[j - 1]) throw PolicyError("delays are not monotone at j=" + std::to_string(j + 1));
    }
}

} // namespace expost
