#pragma once

namespace lossnet {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kRngName = "xoshiro256++ 1.0 / splitmix64 expansion";

} // namespace lossnet
