#pragma once

#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "expost/mask_matrix.hpp"
#include "expost/position_layout.hpp"
#include "expost/types.hpp"

namespace expost {

struct MaskOptions {
    /// Let SOURCE rows attend to earlier TARGET and assistant-role entries
    /// (causally possible in interleaved layouts). Off by default.
    bool source_sees_targets = false;
};

inline constexpr int kUnbounded = std::numeric_limits<int>::max();

/// How many source tokens each row may see. A row's budget is the delay of
/// the target it predicts: the assistant role block predicts the first target
/// of its segment and a target entry predicts the next target of the same
/// segment. Rows that predict nothing are bounded only by layout order.
inline std::vector<int> source_budgets(const LayoutPlan& layout, std::span<const int> g) {
    const int n = layout.size();
    const int n_targets = layout.count(Tag::Target);
    if (static_cast<int>(g.size()) < n_targets)
        throw std::invalid_argument("delay sequence has " + std::to_string(g.size()) + " entries for " +
                                    std::to_string(n_targets) + " targets");
    std::vector<int> budget(static_cast<std::size_t>(n), kUnbounded);
    // Ordinal (0-based) of the first target at or after each entry, when it is
    // reachable through assistant-role/target entries only.
    int next_target = -1;
    int target_ordinal = n_targets;
    for (int r = n - 1; r >= 0; --r) {
        const Tag t = layout.entries[static_cast<std::size_t>(r)].tag;
        if (t == Tag::Target) {
            --target_ordinal;
            if (next_target >= 0) budget[static_cast<std::size_t>(r)] = g[static_cast<std::size_t>(next_target)];
            next_target = target_ordinal;
        } else if (t == Tag::AssistantRole) {
            if (next_target >= 0) budget[static_cast<std::size_t>(r)] = g[static_cast<std::size_t>(next_target)];
        } else {
            next_target = -1;
        }
    }
    return budget;
}

/// Policy-consistent mask over a full training layout.
inline MaskMatrix build_policy_mask(const LayoutPlan& layout, std::span<const int> g, MaskOptions opt = {}) {
    const int n = layout.size();
    const auto budget = source_budgets(layout, g);
    std::vector<int> src_ordinal(static_cast<std::size_t>(n), 0);
    for (int i = 0, s = 0; i < n; ++i)
        if (layout.entries[static_cast<std::size_t>(i)].tag == Tag::Source) src_ordinal[static_cast<std::size_t>(i)] = ++s;

    MaskMatrix mask(n, n);
    for (int r = 0; r < n; ++r) {
        const Tag rt = layout.entries[static_cast<std::size_t>(r)].tag;
        if (rt == Tag::Pad) continue;
        for (int c = 0; c <= r; ++c) {
            const Tag ct = layout.entries[static_cast<std::size_t>(c)].tag;
            if (ct == Tag::Pad) continue;
            if (rt == Tag::Source && !opt.source_sees_targets && (ct == Tag::Target || ct == Tag::AssistantRole)) continue;
            if (ct == Tag::Source && src_ordinal[static_cast<std::size_t>(c)] > budget[static_cast<std::size_t>(r)]) continue;
            mask.set(r, c, true);
        }
    }
    return mask;
}

/// Plain causal mask over non-PAD entries (the "no policy masking" ablation).
inline MaskMatrix build_causal_mask(const LayoutPlan& layout) {
    const int n = layout.size();
    MaskMatrix mask(n, n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c <= r; ++c)
            if (layout.entries[static_cast<std::size_t>(r)].tag != Tag::Pad && layout.entries[static_cast<std::size_t>(c)].tag != Tag::Pad)
                mask.set(r, c, true);
    return mask;
}

/// Independent entry-by-entry statement of the policy visibility rule, for
/// differential testing against build_policy_mask.
inline bool visibility_oracle(const LayoutPlan& layout, std::span<const int> g, int row, int col, MaskOptions opt = {}) {
    const int n = layout.size();
    if (row < 0 || row >= n || col < 0 || col >= n) throw std::out_of_range("visibility_oracle index out of range");
    const auto& E = layout.entries;
    const Tag rt = E[static_cast<std::size_t>(row)].tag;
    const Tag ct = E[static_cast<std::size_t>(col)].tag;
    if (rt == Tag::Pad || ct == Tag::Pad) return false;
    if (col > row) return false;
    if (rt == Tag::Source) {
        if (opt.source_sees_targets) return true;
        return ct == Tag::Prompt || ct == Tag::UserRole || ct == Tag::Source;
    }
    if (ct != Tag::Source) return true;

    // 1-based index of the source column.
    int i = 0;
    for (int c = 0; c <= col; ++c)
        if (E[static_cast<std::size_t>(c)].tag == Tag::Source) ++i;

    // Which target does this row predict?
    int predicted = 0; // 1-based target index, 0 if none
    if (rt == Tag::Target) {
        if (row + 1 < n && E[static_cast<std::size_t>(row + 1)].tag == Tag::Target) {
            for (int c = 0; c <= row + 1; ++c)
                if (E[static_cast<std::size_t>(c)].tag == Tag::Target) ++predicted;
        }
    } else if (rt == Tag::AssistantRole) {
        int k = row;
        while (k < n && E[static_cast<std::size_t>(k)].tag == Tag::AssistantRole) ++k;
        if (k < n && E[static_cast<std::size_t>(k)].tag == Tag::Target)
            for (int c = 0; c <= k; ++c)
                if (E[static_cast<std::size_t>(c)].tag == Tag::Target) ++predicted;
    }
    if (predicted == 0) return true;
    if (predicted > static_cast<int>(g.size())) throw std::invalid_argument("delay sequence shorter than target count");
    return i <= g[static_cast<std::size_t>(predicted - 1)];
}

/// Which rows of a training layout predict a target, and which target:
/// label[r] is the token to predict at row r, or -1.
inline std::vector<TokenId> prediction_labels(const LayoutPlan& layout) {
    const int n = layout.size();
    std::vector<TokenId> labels(static_cast<std::size_t>(n), -1);
    for (int r = 0; r + 1 < n; ++r) {
        const Tag t = layout.entries[static_cast<std::size_t>(r)].tag;
        const Tag next = layout.entries[static_cast<std::size_t>(r + 1)].tag;
        if ((t == Tag::AssistantRole || t == Tag::Target) && next == Tag::Target)
            labels[static_cast<std::size_t>(r)] = layout.entries[static_cast<std::size_t>(r + 1)].token;
    }
    return labels;
}

enum class VisibilityMode { Policy, Causal };

/// Visibility for new entries appended to a streaming cache: columns are the
/// cached entries followed by the new ones. Under Policy, SOURCE rows ignore
/// TARGET and assistant-role entries; every other row sees everything before it.
inline MaskMatrix streaming_mask(std::span<const Tag> cached, std::span<const Tag> fresh, VisibilityMode mode,
                                 MaskOptions opt = {}) {
    const int c = static_cast<int>(cached.size());
    const int m = static_cast<int>(fresh.size());
    MaskMatrix mask(m, c + m);
    for (int r = 0; r < m; ++r) {
        const bool restrict = mode == VisibilityMode::Policy && fresh[static_cast<std::size_t>(r)] == Tag::Source &&
                              !opt.source_sees_targets;
        for (int col = 0; col <= c + r; ++col) {
            const Tag ct = col < c ? cached[static_cast<std::size_t>(col)] : fresh[static_cast<std::size_t>(col - c)];
            if (ct == Tag::Pad) continue;
            if (restrict && (ct == Tag::Target || ct == Tag::AssistantRole)) continue;
            mask.set(r, col, true);
        }
    }
    return mask;
}

} // namespace expost
