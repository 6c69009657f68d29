#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "expost/kv_cache.hpp"
#include "expost/masking.hpp"
#include "expost/metrics.hpp"
#include "expost/model.hpp"
#include "expost/policy.hpp"
#include "expost/position_layout.hpp"

namespace expost {

enum class StrategyKind { Expost, Recompute, NaiveReuse, Conversational, Grouped };

struct Strategy {
    StrategyKind kind = StrategyKind::Expost;
    int slot_len = 16; // Expost only

    static Strategy expost(int slot_len) {
        if (slot_len < 1) throw ConfigError("EXPOST needs slot length >= 1");
        return {StrategyKind::Expost, slot_len};
    }
    static Strategy recompute() { return {StrategyKind::Recompute, 0}; }
    static Strategy naive_reuse() { return {StrategyKind::NaiveReuse, 0}; }
    static Strategy conversational() { return {StrategyKind::Conversational, 0}; }
    static Strategy grouped() { return {StrategyKind::Grouped, 0}; }

    std::string name() const {
        switch (kind) {
        case StrategyKind::Expost: return "expost";
        case StrategyKind::Recompute: return "recompute";
        case StrategyKind::NaiveReuse: return "naive-reuse";
        case StrategyKind::Conversational: return "conversational";
        case StrategyKind::Grouped: return "grouped";
        }
        return "?";
    }

    static Strategy parse(const std::string& s, int slot_len = 16) {
        if (s == "expost") return expost(slot_len);
        if (s == "recompute") return recompute();
        if (s == "naive-reuse") return naive_reuse();
        if (s == "conversational") return conversational();
        if (s == "grouped") return grouped();
        throw ConfigError("unknown strategy: " + s);
    }

    bool operator==(const Strategy&) const = default;
};

struct EngineOptions {
    RoleLengths roles{2, 1, 1};
    VisibilityMode visibility = VisibilityMode::Policy;
    MaskOptions mask{};
    /// RECOMPUTE re-encodes the prompt too instead of keeping its cache.
    bool recompute_from_scratch = false;
    /// EXPOST positions, but the whole cache is re-encoded after every READ.
    bool recompute_oracle = false;
    bool role_before_new_slot = true;
    /// Greedy decoding never picks the end token while source remains.
    bool suppress_eos_until_source_end = false;
    /// Teacher forcing: the j-th WRITE emits forced_output[j-1] when present.
    std::vector<TokenId> forced_output;
    /// Global write cap; <= 0 means 4|S| + 8.
    int write_cap = 0;
    /// Keep the cache contents at every WRITE (needed for uncached replay).
    bool record_context = true;
};

struct ForwardCall {
    int cached = 0;
    int fresh = 0;
    bool operator==(const ForwardCall&) const = default;
};

struct StepRecord {
    Action action;
    std::vector<TokenId> tokens;       // entries fed by this step, in feed order
    std::vector<PositionId> positions;
    std::vector<Tag> tags;
    int src_read = 0;                  // after the step
    std::vector<double> logits;        // WRITE: logits that chose the emitted token
    TokenId emitted = -1;
    PositionId emitted_position = -1;  // position the emitted token will be encoded at
    int cache_before = 0;
    int cache_after = 0;
    std::vector<ForwardCall> calls;
    int recomputed_tokens = 0;         // previously encoded entries encoded again
    PositionId slot_start = -1;        // EXPOST: start of the current slot after the step
    double flops = 0;
    /// WRITE: cache entries when the logits were computed, with the position
    /// each entry holds in the strategy's current layout.
    LayoutPlan context;
};

struct StreamTrace {
    Strategy strategy;
    PolicySpec policy;
    RoleLengths roles;
    std::vector<TokenId> source;
    std::vector<StepRecord> steps;
    std::vector<TokenId> output;
    bool capped = false;

    int write_count() const {
        return static_cast<int>(std::count_if(steps.begin(), steps.end(), [](const StepRecord& s) { return s.action.kind == Action::Kind::Write; }));
    }
};

/// Number of source tokens read before each emitted target.
inline std::vector<int> delays_from_trace(const StreamTrace& trace) {
    std::vector<int> g;
    for (const auto& s : trace.steps)
        if (s.action.kind == Action::Kind::Write) g.push_back(s.src_read);
    check_delays(g, static_cast<int>(trace.source.size()));
    return g;
}

inline double cumulative_flops(const StreamTrace& trace, const FlopsModel& fm) {
    double total = 0;
    for (const auto& s : trace.steps)
        for (const auto& c : s.calls) total += flops_forward(fm, c.cached, c.fresh);
    return total;
}

inline double cumulative_flops(const StreamTrace& trace) {
    double total = 0;
    for (const auto& s : trace.steps) total += s.flops;
    return total;
}

/// Rebuilds a cache from a full layout in one fresh forward pass (causal in
/// layout order, with the streaming tag filter).
template <typename T>
KvCache<T> recompute_from(const KvCache<T>& cache, const LayoutPlan& layout, const Transformer<T>& model,
                          VisibilityMode mode = VisibilityMode::Policy, MaskOptions mopt = {}, OpCounter* ops = nullptr) {
    if (cache.n_layers() != model.config().n_layers || cache.width() != model.config().d_model)
        throw ShapeError("cache shape does not match the model");
    KvCache<T> out = model.make_cache();
    if (layout.size() == 0) return out;
    const auto tokens = layout.tokens();
    const auto positions = layout.positions();
    const auto tags = layout.tags();
    const MaskMatrix mask = streaming_mask({}, tags, mode, mopt);
    ForwardInput<T> in{tokens, positions, tags, &mask, nullptr};
    out.append(model.forward(in, ops).delta);
    return out;
}

namespace detail {

template <typename T>
class Session {
public:
    Session(const Transformer<T>& model, std::span<const TokenId> source, const PolicySpec& policy, const Strategy& strategy,
            const EngineOptions& opt)
        : model_(model), source_(source.begin(), source.end()), strategy_(strategy), opt_(opt), cache_(model.make_cache()),
          fm_(FlopsModel::from(model.config())) {
        if (opt.roles.assistant < 1) throw ConfigError("streaming needs an assistant role block of length >= 1");
        if (strategy.kind == StrategyKind::Expost)
            alloc_.emplace(strategy.slot_len, opt.roles, model.config().max_position, opt.role_before_new_slot);
        trace_.strategy = strategy;
        trace_.policy = policy;
        trace_.roles = opt.roles;
        trace_.source = source_;
        policy_ = policy;
    }

    StreamTrace run() {
        PolicyState ps;
        ps.src_len = static_cast<int>(source_.size());
        if (source_.empty()) return trace_;
        const int cap = opt_.write_cap > 0 ? opt_.write_cap : 4 * static_cast<int>(source_.size()) + 8;
        for (;;) {
            Action a = next_action(policy_, ps);
            if (a.kind == Action::Kind::Write && writes_ >= cap) {
                trace_.capped = true;
                a = Action::finish();
            }
            StepRecord rec;
            rec.action = a;
            rec.cache_before = cache_.size();
            if (a.kind == Action::Kind::Finish) {
                rec.src_read = ps.src_read;
                rec.cache_after = cache_.size();
                trace_.steps.push_back(std::move(rec));
                break;
            }
            if (a.kind == Action::Kind::Read) {
                do_read(rec, ps.src_read, a.count);
                advance(ps, a);
                last_was_write_ = false;
            } else {
                const TokenId t = do_write(rec, ps);
                advance(ps, a, t);
                last_was_write_ = true;
            }
            rec.src_read = ps.src_read;
            rec.cache_after = cache_.size();
            if (alloc_) rec.slot_start = alloc_->current_slot().start_pos;
            trace_.steps.push_back(std::move(rec));
        }
        return trace_;
    }

private:
    struct Entry {
        TokenId token;
        PositionId position;
        Tag tag;
    };

    const RoleLengths& roles() const { return opt_.roles; }
    PositionId base() const { return roles().prompt + roles().user; }

    /// Identity of an entry in the strategy's layout, used to detect re-encoding.
    std::pair<Tag, int> identity(Tag tag, int ordinal) const { return {tag, ordinal}; }

    void feed(StepRecord& rec, const std::vector<Entry>& entries, const std::vector<int>& ordinals, Matrix<T>* logits = nullptr) {
        if (entries.empty()) return;
        std::vector<TokenId> tok;
        std::vector<PositionId> pos;
        std::vector<Tag> tag;
        for (const auto& e : entries) {
            tok.push_back(e.token);
            pos.push_back(e.position);
            tag.push_back(e.tag);
        }
        const MaskMatrix mask = streaming_mask(cache_.tags(), tag, opt_.visibility, opt_.mask);
        ForwardInput<T> in{tok, pos, tag, &mask, &cache_};
        auto out = model_.forward(in);
        rec.calls.push_back({cache_.size(), static_cast<int>(entries.size())});
        rec.flops += flops_forward(fm_, cache_.size(), static_cast<int>(entries.size()));
        cache_.append(out.delta);
        for (std::size_t i = 0; i < entries.size(); ++i) {
            rec.tokens.push_back(tok[i]);
            rec.positions.push_back(pos[i]);
            rec.tags.push_back(tag[i]);
            ctx_.push(tok[i], pos[i], tag[i]);
            if (!encoded_.insert(identity(tag[i], ordinals[i])).second) ++rec.recomputed_tokens;
            ctx_ordinals_.push_back(ordinals[i]);
        }
        if (logits) *logits = std::move(out.logits);
    }

    void truncate_to(int length) {
        cache_.rollback(mark_at(length));
        ctx_.entries.resize(static_cast<std::size_t>(length));
        ctx_ordinals_.resize(static_cast<std::size_t>(length));
    }

    CacheMark mark_at(int length) const {
        CacheMark m = cache_.snapshot();
        m.length = length;
        return m;
    }

    // ordinal counters for entry identities
    int next_ordinal(Tag t) { return ordinal_[t]++; }

    void push_block(std::vector<Entry>& e, std::vector<int>& ord, TokenId tok, Tag tag, int n, PositionId start) {
        for (int i = 0; i < n; ++i) {
            e.push_back({tok, start + i, tag});
            ord.push_back(next_ordinal(tag));
        }
    }

    void feed_prompt(StepRecord& rec) {
        std::vector<Entry> e;
        std::vector<int> ord;
        for (int i = 0; i < roles().prompt; ++i) {
            e.push_back({special::kPrompt, i, Tag::Prompt});
            ord.push_back(i);
        }
        feed(rec, e, ord);
        prompt_fed_ = true;
    }

    void do_read(StepRecord& rec, int src_read, int count) {
        const bool first = !prompt_fed_;
        if (first) feed_prompt(rec);
        std::vector<Entry> e;
        std::vector<int> ord;
        auto push_source = [&](int i, PositionId p) {
            e.push_back({source_[static_cast<std::size_t>(i)], p, Tag::Source});
            ord.push_back(i);
        };
        switch (strategy_.kind) {
        case StrategyKind::Expost: {
            if (first) {
                for (PositionId p : alloc_->initial_user_role_positions()) {
                    e.push_back({special::kUser, p, Tag::UserRole});
                    ord.push_back(next_ordinal(Tag::UserRole));
                }
            }
            int i = src_read;
            const PositionId slot_end = alloc_->current_slot().start_pos + alloc_->slot_len();
            for (const auto& pl : alloc_->place_source_entries(count)) {
                // the last target of the closing segment is encoded before the next slot
                if (pending_ && (pl.tag == Tag::UserRole || pl.position >= slot_end)) {
                    e.push_back(pending_->first);
                    ord.push_back(pending_->second);
                    pending_.reset();
                }
                if (pl.tag == Tag::UserRole) {
                    e.push_back({special::kUser, pl.position, Tag::UserRole});
                    ord.push_back(next_ordinal(Tag::UserRole));
                } else {
                    push_source(i++, pl.position);
                }
            }
            feed(rec, e, ord);
            if (opt_.recompute_oracle) {
                const LayoutPlan full = ctx_;
                const std::vector<int> ords = ctx_ordinals_;
                truncate_to(0);
                std::vector<Entry> all;
                for (const auto& x : full.entries) all.push_back({x.token, x.position, x.tag});
                feed(rec, all, ords);
            }
            break;
        }
        case StrategyKind::Recompute: {
            const int keep = opt_.recompute_from_scratch ? 0 : roles().prompt;
            if (!first) {
                truncate_to(keep);
                if (keep == 0) feed_prompt(rec);
            }
            ordinal_[Tag::UserRole] = 0;
            push_block(e, ord, special::kUser, Tag::UserRole, roles().user, roles().prompt);
            for (int i = 0; i < src_read + count; ++i) push_source(i, base() + i);
            feed(rec, e, ord);
            // assistant role and every emitted target are re-fed at the next WRITE
            recompute_pending_ = true;
            break;
        }
        case StrategyKind::NaiveReuse:
        case StrategyKind::Grouped: {
            if (first) push_block(e, ord, special::kUser, Tag::UserRole, roles().user, roles().prompt);
            for (int i = src_read; i < src_read + count; ++i) push_source(i, base() + i);
            feed(rec, e, ord);
            break;
        }
        case StrategyKind::Conversational: {
            if (first || last_was_write_) {
                if (pending_) {
                    e.push_back(pending_->first);
                    ord.push_back(pending_->second);
                    pending_.reset();
                }
                const PositionId start = cache_.size() + static_cast<int>(e.size());
                push_block(e, ord, special::kUser, Tag::UserRole, roles().user, start);
            }
            for (int i = src_read; i < src_read + count; ++i) push_source(i, cache_.size() + static_cast<int>(e.size()));
            feed(rec, e, ord);
            break;
        }
        }
    }

    /// Entries fed at a WRITE, ending with the row whose logits pick the token.
    std::vector<Entry> write_inputs(std::vector<int>& ord, int src_read) {
        std::vector<Entry> e;
        auto take_pending = [&] {
            if (!pending_) throw std::logic_error("WRITE without an emitter entry");
            e.push_back(pending_->first);
            ord.push_back(pending_->second);
            pending_.reset();
        };
        switch (strategy_.kind) {
        case StrategyKind::Expost:
            if (!alloc_->segment_open()) {
                if (pending_) throw std::logic_error("pending target survived a segment change");
                for (PositionId p : alloc_->open_segment()) {
                    e.push_back({special::kAssistant, p, Tag::AssistantRole});
                    ord.push_back(next_ordinal(Tag::AssistantRole));
                }
            } else {
                take_pending();
            }
            break;
        case StrategyKind::Recompute:
            if (recompute_pending_) {
                ordinal_[Tag::AssistantRole] = 0;
                const PositionId a0 = base() + src_read;
                push_block(e, ord, special::kAssistant, Tag::AssistantRole, roles().assistant, a0);
                for (std::size_t j = 0; j < emitted_.size(); ++j) {
                    e.push_back({emitted_[j], a0 + roles().assistant + static_cast<int>(j), Tag::Target});
                    ord.push_back(static_cast<int>(j));
                }
                pending_.reset();
                recompute_pending_ = false;
            } else {
                take_pending();
            }
            break;
        case StrategyKind::NaiveReuse:
            if (!assistant_fed_) {
                push_block(e, ord, special::kAssistant, Tag::AssistantRole, roles().assistant, base() + src_read);
                assistant_fed_ = true;
            } else {
                // stale reuse: the new entry is rotated to where it sits in today's layout
                auto p = *pending_;
                p.first.position = base() + src_read + roles().assistant + p.second;
                pending_ = p;
                take_pending();
            }
            break;
        case StrategyKind::Grouped:
            if (!assistant_fed_) {
                push_block(e, ord, special::kAssistant, Tag::AssistantRole, roles().assistant, base());
                assistant_fed_ = true;
            } else {
                take_pending();
            }
            break;
        case StrategyKind::Conversational:
            if (!last_was_write_) {
                if (pending_) {
                    e.push_back(pending_->first);
                    ord.push_back(pending_->second);
                    pending_.reset();
                }
                push_block(e, ord, special::kAssistant, Tag::AssistantRole, roles().assistant,
                           cache_.size() + static_cast<int>(e.size()));
            } else {
                take_pending();
            }
            break;
        }
        return e;
    }

    TokenId do_write(StepRecord& rec, const PolicyState& ps) {
        std::vector<int> ord;
        const auto e = write_inputs(ord, ps.src_read);
        Matrix<T> logits;
        feed(rec, e, ord, &logits);
        const auto last = logits.row(logits.rows() - 1);
        rec.logits.resize(static_cast<std::size_t>(last.size()));
        for (Eigen::Index v = 0; v < last.size(); ++v) rec.logits[static_cast<std::size_t>(v)] = static_cast<double>(last(v));

        TokenId tok;
        const std::size_t j = emitted_.size();
        if (j < opt_.forced_output.size()) {
            tok = opt_.forced_output[j];
        } else {
            tok = 0;
            double best = -std::numeric_limits<double>::infinity();
            const bool no_eos = opt_.suppress_eos_until_source_end && !ps.src_exhausted();
            for (std::size_t v = 0; v < rec.logits.size(); ++v) {
                if (no_eos && static_cast<TokenId>(v) == special::kEos) continue;
                if (rec.logits[v] > best) {
                    best = rec.logits[v];
                    tok = static_cast<TokenId>(v);
                }
            }
        }
        if (opt_.record_context) rec.context = logical_context();

        PositionId pos = 0;
        switch (strategy_.kind) {
        case StrategyKind::Expost: pos = alloc_->place_target(1).front(); break;
        case StrategyKind::Recompute:
        case StrategyKind::NaiveReuse: pos = base() + ps.src_read + roles().assistant + static_cast<int>(j); break;
        case StrategyKind::Grouped: pos = base() + roles().assistant + static_cast<int>(j); break;
        case StrategyKind::Conversational: pos = cache_.size(); break;
        }
        rec.emitted = tok;
        rec.emitted_position = pos;
        pending_ = std::make_pair(Entry{tok, pos, Tag::Target}, static_cast<int>(j));
        emitted_.push_back(tok);
        trace_.output.push_back(tok);
        ++writes_;
        return tok;
    }

    /// Cache contents with each entry's position in the current layout. Only
    /// the stale-reuse strategy has entries whose current position differs
    /// from the one they were encoded at.
    LayoutPlan logical_context() const {
        if (strategy_.kind != StrategyKind::NaiveReuse) return ctx_;
        LayoutPlan out = ctx_;
        int n_src = 0;
        for (const auto& x : ctx_.entries) n_src += x.tag == Tag::Source;
        for (std::size_t i = 0; i < out.entries.size(); ++i) {
            auto& x = out.entries[i];
            const int o = ctx_ordinals_[i];
            switch (x.tag) {
            case Tag::Prompt: x.position = o; break;
            case Tag::UserRole: x.position = roles().prompt + o; break;
            case Tag::Source: x.position = base() + o; break;
            case Tag::AssistantRole: x.position = base() + n_src + o; break;
            case Tag::Target: x.position = base() + n_src + roles().assistant + o; break;
            case Tag::Pad: break;
            }
        }
        return out;
    }

    const Transformer<T>& model_;
    std::vector<TokenId> source_;
    Strategy strategy_;
    PolicySpec policy_;
    EngineOptions opt_;
    KvCache<T> cache_;
    FlopsModel fm_;
    std::optional<AllocationState> alloc_;
    StreamTrace trace_;

    LayoutPlan ctx_;                 // cache contents in cache order, encoded positions
    std::vector<int> ctx_ordinals_;
    std::set<std::pair<Tag, int>> encoded_;
    std::map<Tag, int> ordinal_;
    std::optional<std::pair<Entry, int>> pending_; // emitted but not yet encoded target and its index
    std::vector<TokenId> emitted_;
    int writes_ = 0;
    bool prompt_fed_ = false;
    bool last_was_write_ = false;
    bool assistant_fed_ = false;
    bool recompute_pending_ = false;
};

} // namespace detail

/// Runs one greedy streaming decode and records every step.
template <typename T>
StreamTrace run_stream(const Transformer<T>& model, std::span<const TokenId> source, const PolicySpec& policy,
                       const Strategy& strategy, const EngineOptions& opt = {}) {
    return detail::Session<T>(model, source, policy, strategy, opt).run();
}

/// Re-executes every WRITE as one fresh forward pass over the recorded
/// context (no cache), replacing the logits and the cost accounting.
template <typename T>
StreamTrace uncached_replay(const StreamTrace& trace, const Transformer<T>& model,
                            VisibilityMode mode = VisibilityMode::Policy, MaskOptions mopt = {}) {
    StreamTrace out = trace;
    const FlopsModel fm = FlopsModel::from(model.config());
    for (auto& s : out.steps) {
        if (s.action.kind != Action::Kind::Write) continue;
        if (s.context.size() == 0) throw std::invalid_argument("trace has no recorded context for a WRITE step");
        const auto tokens = s.context.tokens();
        const auto positions = s.context.positions();
        const auto tags = s.context.tags();
        const MaskMatrix mask = streaming_mask({}, tags, mode, mopt);
        ForwardInput<T> in{tokens, positions, tags, &mask, nullptr};
        const auto res = model.forward(in);
        const auto last = res.logits.row(res.logits.rows() - 1);
        for (Eigen::Index v = 0; v < last.size(); ++v) s.logits[static_cast<std::size_t>(v)] = static_cast<double>(last(v));
        s.calls = {{0, s.context.size()}};
        s.flops = flops_forward(fm, 0, s.context.size());
        s.recomputed_tokens = s.context.size() - 1;
    }
    return out;
}

struct TraceComparison {
    double max_logit_diff = 0;
    int first_divergence_step = -1; // index into steps, -1 when none
    bool token_match = true;
    bool structural_match = true;
};

inline TraceComparison compare_traces(const StreamTrace& a, const StreamTrace& b, double tol) {
    TraceComparison r;
    r.token_match = a.output == b.output;
    r.structural_match = a.steps.size() == b.steps.size();
    const std::size_t n = std::min(a.steps.size(), b.steps.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto& x = a.steps[i];
        const auto& y = b.steps[i];
        if (!(x.action == y.action)) {
            r.structural_match = false;
            if (r.first_divergence_step < 0) r.first_divergence_step = static_cast<int>(i);
            break;
        }
        if (x.action.kind != Action::Kind::Write) continue;
        double d = 0;
        if (x.logits.size() != y.logits.size()) {
            d = std::numeric_limits<double>::infinity();
            r.structural_match = false;
        } else {
            for (std::size_t v = 0; v < x.logits.size(); ++v) d = std::max(d, std::abs(x.logits[v] - y.logits[v]));
        }
        r.max_logit_diff = std::max(r.max_logit_diff, d);
        if (r.first_divergence_step < 0 && (d > tol || x.emitted != y.emitted)) r.first_divergence_step = static_cast<int>(i);
    }
    return r;
}

} // namespace expost
