#pragma once

#include <algorithm>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "expost/types.hpp"

namespace expost {

/// Positions consumed by the fixed instruction prefix and by each role-marker block.
struct RoleLengths {
    int prompt = 0;
    int user = 0;
    int assistant = 0;
    bool operator==(const RoleLengths&) const = default;
};

struct LayoutEntry {
    TokenId token = 0;
    PositionId position = 0;
    Tag tag = Tag::Source;

    bool operator==(const LayoutEntry&) const = default;
};

/// A materialized sequence: token, position id and tag per entry, in layout order.
struct LayoutPlan {
    std::vector<LayoutEntry> entries;

    int size() const { return static_cast<int>(entries.size()); }

    void push(TokenId token, PositionId position, Tag tag) { entries.push_back({token, position, tag}); }

    std::vector<TokenId> tokens() const {
        std::vector<TokenId> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.token);
        return out;
    }
    std::vector<PositionId> positions() const {
        std::vector<PositionId> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.position);
        return out;
    }
    std::vector<Tag> tags() const {
        std::vector<Tag> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.tag);
        return out;
    }
    int count(Tag t) const {
        return static_cast<int>(std::count_if(entries.begin(), entries.end(), [t](const LayoutEntry& e) { return e.tag == t; }));
    }

    /// Within every maximal run of equal tags, position ids strictly increase.
    bool runs_strictly_increasing() const {
        for (std::size_t i = 1; i < entries.size(); ++i)
            if (entries[i].tag == entries[i - 1].tag && entries[i].position <= entries[i - 1].position) return false;
        return true;
    }

    /// Line-per-entry text: `index tag token position`.
    std::string serialize() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < entries.size(); ++i)
            os << i << ' ' << tag_name(entries[i].tag) << ' ' << entries[i].token << ' ' << entries[i].position << '\n';
        return os.str();
    }

    static LayoutPlan parse(const std::string& text) {
        LayoutPlan plan;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            int index = 0;
            std::string tag;
            TokenId token = 0;
            PositionId pos = 0;
            if (!(ls >> index >> tag >> token >> pos)) throw std::invalid_argument("malformed layout line: " + line);
            if (index != plan.size()) throw std::invalid_argument("layout indices must be consecutive from 0");
            plan.push(token, pos, parse_tag(tag));
        }
        return plan;
    }

    bool operator==(const LayoutPlan&) const = default;
};

struct SlotState {
    int index = 0;
    PositionId start_pos = 0;
    int filled = 0;

    bool operator==(const SlotState&) const = default;
};

/// Slot state machine for explicit position allocation. Source tokens fill a
/// reserved block of slot_len positions; the target segment of the current
/// allocation phase starts at slot start + slot_len no matter how many source
/// tokens have arrived, so earlier target positions never move.
class AllocationState {
public:
    AllocationState(int slot_len, RoleLengths roles, PositionId max_position = std::numeric_limits<PositionId>::max(),
                    bool role_before_new_slot = true)
        : slot_len_(slot_len), roles_(roles), max_position_(max_position), role_before_new_slot_(role_before_new_slot) {
        if (slot_len < 1) throw ConfigError("slot length must be >= 1");
        if (roles.prompt < 0 || roles.user < 0 || roles.assistant < 0) throw ConfigError("role lengths must be >= 0");
        const PositionId start = roles.prompt + roles.user;
        check_budget(start + slot_len - 1);
        slots_.push_back({0, start, 0});
        last_placed_ = start - 1;
    }

    int slot_len() const { return slot_len_; }
    const RoleLengths& roles() const { return roles_; }
    const std::vector<SlotState>& slots() const { return slots_; }
    const SlotState& current_slot() const { return slots_.back(); }
    PositionId last_target_end() const { return last_target_end_; }
    bool segment_open() const { return segment_open_; }

    /// Positions of the prompt prefix and of the user role block that precedes slot 0.
    std::vector<PositionId> prompt_positions() const { return range(0, roles_.prompt); }
    std::vector<PositionId> initial_user_role_positions() const { return range(roles_.prompt, roles_.user); }

    /// True when placing n more source tokens opens at least one new slot.
    bool would_open_slot(int n) const { return current_slot().filled + n > slot_len_; }

    struct Placed {
        PositionId position;
        Tag tag;
    };

    /// Places n source tokens; user role blocks of newly opened slots are
    /// reported in order, interleaved with the source positions.
    std::vector<Placed> place_source_entries(int n) {
        if (n < 1) throw std::invalid_argument("place_source needs n_tokens >= 1");
        AllocationState next = *this;
        std::vector<Placed> out;
        for (int t = 0; t < n; ++t) {
            if (next.slots_.back().filled == slot_len_) {
                PositionId base = std::max(next.last_target_end_, next.last_placed_) + 1;
                if (role_before_new_slot_) {
                    for (int r = 0; r < roles_.user; ++r) out.push_back({base + r, Tag::UserRole});
                    base += roles_.user;
                }
                next.check_budget(base + slot_len_ - 1);
                next.slots_.push_back({static_cast<int>(next.slots_.size()), base, 0});
                next.segment_open_ = false;
            }
            auto& slot = next.slots_.back();
            const PositionId p = slot.start_pos + slot.filled;
            ++slot.filled;
            next.last_placed_ = std::max(next.last_placed_, p);
            out.push_back({p, Tag::Source});
        }
        *this = std::move(next);
        return out;
    }

    std::vector<PositionId> place_source(int n) {
        std::vector<PositionId> out;
        for (const auto& p : place_source_entries(n))
            if (p.tag == Tag::Source) out.push_back(p.position);
        return out;
    }

    PositionId target_start() const { return current_slot().start_pos + slot_len_; }

    /// Opens the target segment of the current phase and returns the positions
    /// of its assistant role block, [target_start, target_start + assistant).
    std::vector<PositionId> open_segment() {
        if (segment_open_) return {};
        const PositionId ts = target_start();
        if (roles_.assistant > 0) check_budget(ts + roles_.assistant - 1);
        segment_open_ = true;
        last_placed_ = std::max(last_placed_, ts + roles_.assistant - 1);
        return range(ts, roles_.assistant);
    }

    std::vector<PositionId> place_target(int n) {
        if (n < 0) throw std::invalid_argument("place_target needs n_tokens >= 0");
        const PositionId ts = target_start();
        const PositionId first = std::max(ts + roles_.assistant, last_target_end_ + 1);
        if (n == 0) return {};
        check_budget(first + n - 1);
        open_segment();
        last_target_end_ = first + n - 1;
        last_placed_ = std::max(last_placed_, last_target_end_);
        return range(first, n);
    }

    /// Unfilled reserved positions in each slot.
    std::vector<int> gaps() const {
        std::vector<int> out;
        for (const auto& s : slots_) out.push_back(slot_len_ - s.filled);
        return out;
    }

    bool operator==(const AllocationState&) const = default;

private:
    static std::vector<PositionId> range(PositionId start, int n) {
        std::vector<PositionId> out(static_cast<std::size_t>(std::max(n, 0)));
        for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = start + i;
        return out;
    }

    void check_budget(PositionId last) const {
        if (last >= max_position_)
            throw PositionOverflow("position " + std::to_string(last) + " exceeds the position budget " +
                                   std::to_string(max_position_));
    }

    int slot_len_;
    RoleLengths roles_;
    PositionId max_position_;
    bool role_before_new_slot_;
    std::vector<SlotState> slots_;
    PositionId last_target_end_ = -1;
    PositionId last_placed_ = -1;
    bool segment_open_ = false;
};

inline AllocationState new_allocation(int slot_len, int prompt_len, int role_user_len, int role_asst_len) {
    return AllocationState(slot_len, RoleLengths{prompt_len, role_user_len, role_asst_len});
}

namespace detail {
inline void push_block(LayoutPlan& plan, TokenId token, Tag tag, int n, PositionId& pos) {
    for (int i = 0; i < n; ++i) plan.push(token, pos++, tag);
}
} // namespace detail

/// Contiguous layout re-encoded from scratch: prompt, user role, every source
/// token read so far, assistant role, every target token so far.
inline LayoutPlan layout_recompute(const std::vector<TokenId>& source, const std::vector<TokenId>& target, RoleLengths roles) {
    LayoutPlan plan;
    PositionId pos = 0;
    detail::push_block(plan, special::kPrompt, Tag::Prompt, roles.prompt, pos);
    detail::push_block(plan, special::kUser, Tag::UserRole, roles.user, pos);
    for (TokenId t : source) plan.push(t, pos++, Tag::Source);
    detail::push_block(plan, special::kAssistant, Tag::AssistantRole, roles.assistant, pos);
    for (TokenId t : target) plan.push(t, pos++, Tag::Target);
    return plan;
}

struct Chunk {
    bool is_source = true;
    std::vector<TokenId> tokens;
};

/// Conversation-style layout: every chunk gets its own role block and all
/// positions are contiguous, so appending a chunk never touches earlier entries.
inline LayoutPlan layout_conversational(const std::vector<Chunk>& chunks, RoleLengths roles) {
    LayoutPlan plan;
    PositionId pos = 0;
    detail::push_block(plan, special::kPrompt, Tag::Prompt, roles.prompt, pos);
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        const bool expect_source = i % 2 == 0;
        if (chunks[i].is_source != expect_source)
            throw std::invalid_argument("conversational chunks must alternate source/target, starting with source");
        if (chunks[i].is_source) {
            detail::push_block(plan, special::kUser, Tag::UserRole, roles.user, pos);
            for (TokenId t : chunks[i].tokens) plan.push(t, pos++, Tag::Source);
        } else {
            detail::push_block(plan, special::kAssistant, Tag::AssistantRole, roles.assistant, pos);
            for (TokenId t : chunks[i].tokens) plan.push(t, pos++, Tag::Target);
        }
    }
    return plan;
}

/// Independent position spaces for source and target. Prompt and user role
/// form a shared prefix; both groups then count up from the same base, so
/// source and target position ids overlap.
inline LayoutPlan layout_grouped(const std::vector<TokenId>& source, const std::vector<TokenId>& target, RoleLengths roles = {}) {
    LayoutPlan plan;
    PositionId pos = 0;
    detail::push_block(plan, special::kPrompt, Tag::Prompt, roles.prompt, pos);
    detail::push_block(plan, special::kUser, Tag::UserRole, roles.user, pos);
    const PositionId base = pos;
    for (TokenId t : source) plan.push(t, pos++, Tag::Source);
    pos = base;
    detail::push_block(plan, special::kAssistant, Tag::AssistantRole, roles.assistant, pos);
    for (TokenId t : target) plan.push(t, pos++, Tag::Target);
    return plan;
}

} // namespace expost
