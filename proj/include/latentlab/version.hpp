#pragma once

namespace latentlab {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace latentlab
