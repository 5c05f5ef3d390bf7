#pragma once

namespace qmap {

inline constexpr const char* kVersion = "0.3.0";

}  // namespace qmap
