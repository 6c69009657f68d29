#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace expost {

using TokenId = std::int32_t;
using PositionId = std::int32_t;

/// Reserved vocabulary ids. Content tokens of the toy tasks start at kFirstContentToken.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kEndOfSegment = 2;
inline constexpr TokenId kUser = 3;
inline constexpr TokenId kAssistant = 4;
inline constexpr TokenId kPrompt = 5;
} // namespace special

inline constexpr TokenId kFirstContentToken = 6;

/// Role of an entry in a layout or cache. Role blocks are split by speaker so
/// visibility rules never have to inspect token content.
enum class Tag : std::uint8_t { Prompt, UserRole, AssistantRole, Source, Target, Pad };

inline constexpr bool is_role(Tag t) { return t == Tag::UserRole || t == Tag::AssistantRole; }

inline std::string_view tag_name(Tag t) {
    switch (t) {
    case Tag::Prompt: return "PROMPT";
    case Tag::UserRole: return "ROLE_U";
    case Tag::AssistantRole: return "ROLE_A";
    case Tag::Source: return "SOURCE";
    case Tag::Target: return "TARGET";
    case Tag::Pad: return "PAD";
    }
    return "?";
}

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a position id would exceed the model's positional budget.
class PositionOverflow : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline Tag parse_tag(std::string_view s) {
    for (Tag t : {Tag::Prompt, Tag::UserRole, Tag::AssistantRole, Tag::Source, Tag::Target, Tag::Pad})
        if (tag_name(t) == s) return t;
    throw std::invalid_argument("unknown tag: " + std::string(s));
}

} // namespace expost
