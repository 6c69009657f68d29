#pragma once

#include <algorithm>
#include <climits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "expost/masking.hpp"
#include "expost/policy.hpp"
#include "expost/position_layout.hpp"
#include "expost/rng.hpp"

namespace expost {

enum class ToyTask { CopyMap, LocalReorder };

inline std::string toy_task_name(ToyTask t) { return t == ToyTask::CopyMap ? "copy_map" : "local_reorder"; }
inline ToyTask parse_toy_task(const std::string& s) {
    if (s == "copy_map") return ToyTask::CopyMap;
    if (s == "local_reorder") return ToyTask::LocalReorder;
    throw ConfigError("unknown toy task: " + s);
}

struct ToyCorpusSpec {
    ToyTask task = ToyTask::CopyMap;
    int min_len = 12;
    int max_len = 28;
    int vocab_size = 64;
    std::uint64_t seed = 1;
    int size = 2000;
    int window = 3; // LocalReorder shuffle window

    void validate() const {
        if (min_len < 1 || max_len < min_len) throw ConfigError("corpus length bounds must satisfy 1 <= min <= max");
        if (vocab_size <= kFirstContentToken + 1) throw ConfigError("corpus vocab leaves no room for content tokens");
        if (size < 1) throw ConfigError("corpus size must be >= 1");
        if (window < 1) throw ConfigError("reorder window must be >= 1");
    }
    bool operator==(const ToyCorpusSpec&) const = default;
};

struct SentencePair {
    std::vector<TokenId> source;
    std::vector<TokenId> target; // content only, no end markers
};

/// The fixed content-token bijection of a corpus.
inline std::vector<TokenId> content_bijection(const ToyCorpusSpec& spec) {
    std::vector<TokenId> perm(static_cast<std::size_t>(spec.vocab_size), -1);
    std::vector<TokenId> content(static_cast<std::size_t>(spec.vocab_size - kFirstContentToken));
    std::iota(content.begin(), content.end(), kFirstContentToken);
    CounterRng rng(spec.seed, "bijection");
    for (std::size_t i = content.size(); i > 1; --i)
        std::swap(content[i - 1], content[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    for (std::size_t i = 0; i < content.size(); ++i) perm[kFirstContentToken + i] = content[i];
    return perm;
}

/// Pair number `index`, a pure function of (spec, index).
inline SentencePair toy_pair(const ToyCorpusSpec& spec, std::int64_t index, const std::vector<TokenId>& perm) {
    CounterRng rng(spec.seed ^ splitmix64(static_cast<std::uint64_t>(index) + 0x51ull), "pair");
    SentencePair p;
    const int len = static_cast<int>(rng.uniform_int(spec.min_len, spec.max_len));
    for (int i = 0; i < len; ++i) p.source.push_back(static_cast<TokenId>(rng.uniform_int(kFirstContentToken, spec.vocab_size - 1)));
    for (TokenId s : p.source) p.target.push_back(perm[static_cast<std::size_t>(s)]);
    if (spec.task == ToyTask::LocalReorder)
        for (int w0 = 0; w0 < len; w0 += spec.window) {
            const int w1 = std::min(len, w0 + spec.window);
            for (int i = w1 - 1; i > w0; --i) std::swap(p.target[static_cast<std::size_t>(i)], p.target[static_cast<std::size_t>(rng.uniform_int(w0, i))]);
        }
    return p;
}

inline SentencePair toy_pair(const ToyCorpusSpec& spec, std::int64_t index) {
    return toy_pair(spec, index, content_bijection(spec));
}

inline std::vector<SentencePair> make_corpus(const ToyCorpusSpec& spec, std::int64_t first = 0, std::int64_t count = -1) {
    spec.validate();
    const auto perm = content_bijection(spec);
    if (count < 0) count = spec.size;
    std::vector<SentencePair> out;
    out.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) out.push_back(toy_pair(spec, first + i, perm));
    return out;
}

inline std::vector<std::vector<TokenId>> segment_source(std::span<const TokenId> source, int slot_len) {
    if (slot_len < 1) throw ConfigError("slot length must be >= 1");
    std::vector<std::vector<TokenId>> out;
    for (std::size_t i = 0; i < source.size(); i += static_cast<std::size_t>(slot_len))
        out.emplace_back(source.begin() + static_cast<std::ptrdiff_t>(i),
                         source.begin() + static_cast<std::ptrdiff_t>(std::min(source.size(), i + static_cast<std::size_t>(slot_len))));
    return out;
}

/// Target stream as the policy emits it: wait-k appends the end token;
/// read-n splits the content like the source segments, closes each segment
/// with the end-of-segment token and the last one with the end token.
inline std::vector<TokenId> streaming_target(const SentencePair& p, const PolicySpec& policy) {
    std::vector<TokenId> out;
    if (policy.kind == PolicyKind::WaitK) {
        out = p.target;
    } else {
        const auto segs = segment_source(p.target, policy.n);
        for (std::size_t s = 0; s < segs.size(); ++s) {
            out.insert(out.end(), segs[s].begin(), segs[s].end());
            if (s + 1 < segs.size()) out.push_back(special::kEndOfSegment);
        }
    }
    out.push_back(special::kEos);
    return out;
}

/// Delays produced by running the scheduler with `target` as its output.
inline std::vector<int> policy_delays(const PolicySpec& policy, int src_len, std::span<const TokenId> target) {
    PolicyState st;
    st.src_len = src_len;
    std::vector<int> g;
    const int cap = 4 * src_len + 8;
    for (;;) {
        const Action a = next_action(policy, st);
        if (a.kind == Action::Kind::Finish) break;
        if (a.kind == Action::Kind::Write) {
            if (g.size() >= target.size() || static_cast<int>(g.size()) >= cap)
                throw PolicyError("target ends before the policy finishes writing");
            g.push_back(st.src_read);
            advance(st, a, target[g.size() - 1]);
        } else {
            advance(st, a);
        }
    }
    if (g.size() != target.size()) throw PolicyError("policy finished with target tokens left over");
    return g;
}

enum class TrainLayout { Slot, Contiguous };

struct TrainingSample {
    LayoutPlan layout;
    MaskMatrix mask;
    std::vector<TokenId> labels; // per row, -1 where no loss
    std::vector<int> g;
};

/// Interleaved slot layout for a pair with explicit delays. Positions come
/// from the same allocator the streaming engine uses, so target positions
/// match inference exactly; unfilled slot positions become PAD entries.
inline LayoutPlan slot_layout(std::span<const TokenId> source, std::span<const TokenId> target, std::span<const int> g,
                              int slot_len, RoleLengths roles) {
    if (g.size() != target.size()) throw PolicyError("delay count differs from target length");
    check_delays(std::vector<int>(g.begin(), g.end()), static_cast<int>(source.size()));
    for (int gj : g)
        if (gj < 1) throw PolicyError("every target needs at least one visible source token");

    struct ChunkEntries {
        std::vector<LayoutEntry> user, src, asst, tgt;
    };
    AllocationState alloc(slot_len, roles);
    std::vector<ChunkEntries> chunks(1);
    for (PositionId p : alloc.initial_user_role_positions()) chunks[0].user.push_back({special::kUser, p, Tag::UserRole});
    int read = 0;
    for (std::size_t j = 0; j < target.size(); ++j) {
        while (read < g[j]) {
            for (const auto& pl : alloc.place_source_entries(1)) {
                chunks.resize(alloc.slots().size());
                auto& c = chunks.back();
                if (pl.tag == Tag::UserRole)
                    c.user.push_back({special::kUser, pl.position, Tag::UserRole});
                else
                    c.src.push_back({source[static_cast<std::size_t>(read)], pl.position, Tag::Source});
            }
            ++read;
        }
        auto& c = chunks.back();
        for (PositionId p : alloc.open_segment()) c.asst.push_back({special::kAssistant, p, Tag::AssistantRole});
        c.tgt.push_back({target[j], alloc.place_target(1).front(), Tag::Target});
    }

    LayoutPlan plan;
    for (int i = 0; i < roles.prompt; ++i) plan.push(special::kPrompt, i, Tag::Prompt);
    for (std::size_t ci = 0; ci < chunks.size(); ++ci) {
        const auto& c = chunks[ci];
        const auto& slot = alloc.slots()[ci];
        plan.entries.insert(plan.entries.end(), c.user.begin(), c.user.end());
        plan.entries.insert(plan.entries.end(), c.src.begin(), c.src.end());
        for (int f = slot.filled; f < slot_len; ++f) plan.push(special::kPad, slot.start_pos + f, Tag::Pad);
        plan.entries.insert(plan.entries.end(), c.asst.begin(), c.asst.end());
        plan.entries.insert(plan.entries.end(), c.tgt.begin(), c.tgt.end());
    }
    return plan;
}

/// Closed-form entry count of slot_layout.
inline int slot_layout_length(int src_visible, int n_targets, std::span<const int> g, int slot_len, RoleLengths roles) {
    const int chunks = std::max(1, (src_visible + slot_len - 1) / slot_len);
    std::vector<bool> has_target(static_cast<std::size_t>(chunks), false);
    for (int gj : g) has_target[static_cast<std::size_t>((gj - 1) / slot_len)] = true;
    const int with_targets = static_cast<int>(std::count(has_target.begin(), has_target.end(), true));
    return roles.prompt + chunks * (roles.user + slot_len) + roles.assistant * with_targets + n_targets;
}

struct SampleOptions {
    TrainLayout layout = TrainLayout::Slot;
    bool policy_mask = true; // false: plain causal mask
    MaskOptions mask{};
};

/// Training sample from explicit delays.
inline TrainingSample build_training_sequence(std::span<const TokenId> source, std::span<const TokenId> target,
                                              std::span<const int> g, int slot_len, RoleLengths roles,
                                              SampleOptions opt = {}) {
    TrainingSample s;
    s.g.assign(g.begin(), g.end());
    if (opt.layout == TrainLayout::Slot) {
        s.layout = slot_layout(source, target, g, slot_len, roles);
    } else {
        if (g.size() != target.size()) throw PolicyError("delay count differs from target length");
        check_delays(s.g, static_cast<int>(source.size()));
        const int visible = g.empty() ? 0 : g.back();
        s.layout = layout_recompute(std::vector<TokenId>(source.begin(), source.begin() + visible),
                                    std::vector<TokenId>(target.begin(), target.end()), roles);
    }
    s.mask = opt.policy_mask ? build_policy_mask(s.layout, s.g, opt.mask) : build_causal_mask(s.layout);
    s.labels = prediction_labels(s.layout);
    return s;
}

/// Training sample for a pair under a policy.
inline TrainingSample build_training_sequence(const SentencePair& pair, int slot_len, const PolicySpec& policy,
                                              RoleLengths roles, SampleOptions opt = {}) {
    const auto target = streaming_target(pair, policy);
    const auto g = policy_delays(policy, static_cast<int>(pair.source.size()), target);
    return build_training_sequence(pair.source, target, g, slot_len, roles, opt);
}

/// Mean materialized slot-layout length over a corpus (tokens + roles + pads).
inline double avg_sequence_length(const ToyCorpusSpec& corpus, int slot_len, RoleLengths roles, const PolicySpec& policy) {
    const auto pairs = make_corpus(corpus);
    double total = 0;
    for (const auto& p : pairs) {
        const auto t = streaming_target(p, policy);
        const auto g = policy_delays(policy, static_cast<int>(p.source.size()), t);
        total += slot_layout_length(g.back(), static_cast<int>(t.size()), g, slot_len, roles);
    }
    return total / static_cast<double>(pairs.size());
}

} // namespace expost
