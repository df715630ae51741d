// One-dimensional min-convolution with a quadratic:
//
//   g(p) = min_q f(q) + weight * ((p - q) * step)^2
//
// computed in linear time via the lower envelope of parabolas. Infinite inputs
// are treated as absent samples. Both the Euclidean distance transform and the
// displacement-label message passing are built on this primitive.
#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "pulmoreg/core.hpp"

namespace pulmoreg {

/// Scratch buffers reused across calls to avoid reallocations in hot loops.
struct EnvelopeWorkspace {
  std::vector<int> vertex;
  std::vector<double> boundary;

  void reserve(std::size_t n) {
    if (vertex.size() < n) vertex.resize(n);
    if (boundary.size() < n + 1) boundary.resize(n + 1);
  }
};

/// Writes g into out and, if argmin is non-empty, the minimising q per p
/// (-1 when every input is infinite). f and out may not alias.
inline void min_convolve_quadratic(std::span<const double> f, double step, double weight,
                                   std::span<double> out, std::span<int> argmin,
                                   EnvelopeWorkspace& ws) {
  const int n = static_cast<int>(f.size());
  const bool want_arg = !argmin.empty();
  if (n == 0) return;

  if (weight <= 0.0) {
    int best = -1;
    double best_val = kInf;
    for (int q = 0; q < n; ++q) {
      if (f[q] < best_val) {
        best_val = f[q];
        best = q;
      }
    }
    for (int p = 0; p < n; ++p) {
      out[p] = best_val;
      if (want_arg) argmin[p] = best;
    }
    return;
  }

  ws.reserve(static_cast<std::size_t>(n));
  int* v = ws.vertex.data();
  double* z = ws.boundary.data();
  int k = -1;
  // Parabola positions in physical units (x = q * step).
  auto pos = [step](int q) { return static_cast<double>(q) * step; };

  for (int q = 0; q < n; ++q) {
    if (!(f[q] < kInf)) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    const double xq = pos(q);
    double s = 0.0;
    while (true) {
      const double xv = pos(v[k]);
      s = ((f[q] + weight * xq * xq) - (f[v[k]] + weight * xv * xv)) / (2.0 * weight * (xq - xv));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      // k == 0 and the new parabola dominates everywhere.
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }

  if (k < 0) {
    for (int p = 0; p < n; ++p) {
      out[p] = kInf;
      if (want_arg) argmin[p] = -1;
    }
    return;
  }

  int j = 0;
  for (int p = 0; p < n; ++p) {
    const double xp = pos(p);
    while (z[j + 1] < xp) ++j;
    const double d = (xp - pos(v[j]));
    out[p] = f[v[j]] + weight * d * d;
    if (want_arg) argmin[p] = v[j];
  }
}

inline void min_convolve_quadratic(std::span<const double> f, double step, double weight,
                                   std::span<double> out, std::span<int> argmin = {}) {
  EnvelopeWorkspace ws;
  min_convolve_quadratic(f, step, weight, out, argmin, ws);
}

}  // namespace pulmoreg
