#include "semprobe/log.hpp"

#include <iostream>
#include <mutex>

namespace semprobe {

namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

WarningSink& current_sink() {
  static WarningSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

}  // namespace

void warn(std::string_view message) {
  std::lock_guard lock(sink_mutex());
  if (current_sink()) current_sink()(message);
}

WarningSink set_warning_sink(WarningSink sink) {
  std::lock_guard lock(sink_mutex());
  auto previous = std::move(current_sink());
  current_sink() = std::move(sink);
  return previous;
}

}  // namespace semprobe
