#pragma once

#include <iomanip>
#include <sstream>
#include <string>

#include "expost/engine.hpp"

namespace expost {

/// Step-by-step text of a streaming trace: the action, every entry it fed
/// as TAG:token@position, the emitted token with its reserved position, and
/// the current slot for EXPOST.
inline std::string render_trace(const StreamTrace& t) {
    std::ostringstream os;
    os << "# strategy " << t.strategy.name();
    if (t.strategy.kind == StrategyKind::Expost) os << " L_slot=" << t.strategy.slot_len;
    os << " policy " << t.policy.to_string() << " roles " << t.roles.prompt << ',' << t.roles.user << ',' << t.roles.assistant << '\n';
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const auto& s = t.steps[i];
        os << std::setw(3) << i << ' ' << std::left << std::setw(8) << action_name(s.action) << std::right << " fed";
        if (s.tokens.empty()) os << " -";
        for (std::size_t e = 0; e < s.tokens.size(); ++e) os << ' ' << tag_name(s.tags[e]) << ':' << s.tokens[e] << '@' << s.positions[e];
        if (s.action.kind == Action::Kind::Write) os << " | emit " << s.emitted << '@' << s.emitted_position;
        if (s.slot_start >= 0) os << " | slot [" << s.slot_start << ',' << s.slot_start + t.strategy.slot_len - 1 << ']';
        os << '\n';
    }
    if (t.capped) os << "# stopped at the write cap\n";
    return os.str();
}

} // namespace expost
