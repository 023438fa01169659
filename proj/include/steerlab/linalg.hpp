#pragma once

#include <cstddef>
#include <span>

namespace steerlab {

// r <- r - a <a, r>. `a` is assumed unit length; callers validate.
template <typename T, typename U>
inline void project_out(std::span<T> r, std::span<const U> a) noexcept {
  T dot = T(0);
  for (std::size_t i = 0; i < r.size(); ++i) dot += static_cast<T>(a[i]) * r[i];
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= static_cast<T>(a[i]) * dot;
}

template <typename T, typename U>
inline auto dot(std::span<const T> x, std::span<const U> y) noexcept {
  decltype(T() * U()) s{};
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

}  // namespace steerlab
