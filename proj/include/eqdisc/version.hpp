#pragma once

namespace eqdisc {
inline constexpr const char* kVersion = "0.1.0";
}
