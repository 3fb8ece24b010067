#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sicl {

// Byte-level vocabulary: ids 0..255 are raw UTF-8 bytes, followed by specials.
namespace tok {
constexpr int kBos = 256;
constexpr int kEos = 257;
constexpr int kSep = 258;
constexpr int kDemoSep = 259;
constexpr int kPad = 260;
constexpr int kFrame = 261;  // placeholder; the frame embedding is injected at this position
constexpr int kVocabSize = 262;

inline bool is_special(int id) { return id >= 256; }
}  // namespace tok

std::vector<int> encode_bytes(std::string_view text);
/// Inverse of encode_bytes; special ids are skipped.
std::string decode_bytes(std::span<const int> ids);

enum class SpanKind : std::uint8_t { control = 0, input = 1, target = 2 };
constexpr int kNumSpanKinds = 3;

/// Structured position of one token. Offsets restart in every span, so the
/// same frame→character alignment holds in every demonstration and in the query.
struct TokenPosition {
    SpanKind kind = SpanKind::control;
    int offset = 0;             // from the start of the span
    int offset_from_end = -1;   // input spans only; -1 elsewhere
    int segment_from_last = 0;  // 0 = query, 1 = nearest demonstration, ...

    friend bool operator==(const TokenPosition&, const TokenPosition&) = default;
};

}  // namespace sicl
