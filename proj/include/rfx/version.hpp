#pragma once

namespace rfx {

inline constexpr const char* kLibraryVersion = "0.1.0";

}  // namespace rfx
