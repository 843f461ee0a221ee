#pragma once

#include <random>

#include "bbg/tensor.hpp"

namespace testing {

inline bbg::Tensor random_tensor(bbg::Shape shape, std::uint64_t seed,
                                 double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  bbg::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace testing

#include <functional>
#include <optional>

#include "bbg/error.hpp"

namespace testing {

// Code of the bbg::Error thrown by fn, or nullopt if it returns normally.
inline std::optional<bbg::ErrorCode> error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const bbg::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace testing
