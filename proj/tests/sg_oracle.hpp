#pragma once

// Brute-force Savitzky-Golay reference: fits the least-squares polynomial to
// every (reflect-padded) window by Gaussian elimination on the normal
// equations in long double and differentiates it at the window centre.

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

namespace spectra_invar::testing {

inline std::vector<long double> solve_dense(std::vector<std::vector<long double>> a,
                                            std::vector<long double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const long double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::vector<long double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    long double s = b[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * x[c];
    x[i] = s / a[i][i];
  }
  return x;
}

inline std::vector<double> sg_reference(const std::vector<double>& x, int window, int order,
                                        int deriv) {
  const long n = static_cast<long>(x.size());
  const int half = window / 2;
  auto at = [&](long i) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i;
      if (i >= n) i = 2 * (n - 1) - i;
    }
    return static_cast<long double>(x[i]);
  };
  std::vector<double> out(x.size());
  for (long i = 0; i < n; ++i) {
    const int m = order + 1;
    std::vector<std::vector<long double>> ata(m, std::vector<long double>(m, 0.0L));
    std::vector<long double> aty(m, 0.0L);
    for (int k = -half; k <= half; ++k) {
      const long double y = at(i + k);
      for (int a = 0; a < m; ++a) {
        aty[a] += std::pow(static_cast<long double>(k), a) * y;
        for (int b = 0; b < m; ++b) ata[a][b] += std::pow(static_cast<long double>(k), a + b);
      }
    }
    const auto c = solve_dense(ata, aty);
    long double fact = 1.0L;
    for (int k = 2; k <= deriv; ++k) fact *= k;
    out[i] = static_cast<double>(fact * c[deriv]);
  }
  return out;
}

}  // namespace spectra_invar::testing
