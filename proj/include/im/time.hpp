#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace im {

// All clocks in the system are integer microseconds. The simulator's virtual
// clock and the process backend's monotonic clock share this representation so
// trace records are directly comparable.
using TimeUs = std::int64_t;
using DurationUs = std::int64_t;

constexpr DurationUs kMicrosecond = 1;
constexpr DurationUs kMillisecond = 1000;
constexpr DurationUs kSecond = 1000 * kMillisecond;
constexpr DurationUs kMinute = 60 * kSecond;

// Parses "200ms", "5s", "10m", "150us". Integers only, suffix required.
std::optional<DurationUs> parse_duration(const std::string& text);

// Canonical rendering: largest unit that divides the value exactly.
std::string format_duration(DurationUs d);

}  // namespace im
