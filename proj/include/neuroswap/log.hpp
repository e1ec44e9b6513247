#pragma once

#include <iostream>
#include <mutex>
#include <string>

namespace neuroswap {

inline void log_warning(const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[neuroswap] warning: " << msg << "\n";
}

inline void log_info(const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[neuroswap] " << msg << "\n";
}

}  // namespace neuroswap
