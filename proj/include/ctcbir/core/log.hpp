// Copyright (c) 2026, The ctcbir Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <utility>

namespace ctcbir {

enum class LogLevel { kInfo, kWarning };

using LogSink = std::function<void(LogLevel, const std::string&)>;

namespace detail {
struct LogState {
  std::mutex mu;
  LogSink sink = [](LogLevel level, const std::string& msg) {
    std::cerr << (level == LogLevel::kWarning ? "[warn] " : "[info] ") << msg << '\n';
  };
};
inline LogState& log_state() {
  static LogState state;
  return state;
}
}  // namespace detail

/// Replaces the process-wide sink; returns the previous one.
inline LogSink set_log_sink(LogSink sink) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mu);
  return std::exchange(s.sink, std::move(sink));
}

inline void log(LogLevel level, const std::string& msg) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mu);
  if (s.sink) s.sink(level, msg);
}

inline void log_info(const std::string& msg) { log(LogLevel::kInfo, msg); }
inline void log_warning(const std::string& msg) { log(LogLevel::kWarning, msg); }

}  // namespace ctcbir
