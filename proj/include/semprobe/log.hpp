#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace semprobe {

using WarningSink = std::function<void(std::string_view)>;

/// Emits a warning through the current sink (stderr by default).
void warn(std::string_view message);

/// Replaces the sink; returns the previous one so callers can restore it.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace semprobe
