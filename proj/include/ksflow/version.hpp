#pragma once

namespace ksflow {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ksflow
