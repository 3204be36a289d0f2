#pragma once

// Straightforward reimplementations used as references for the similarity
// stack. They share no code with the library: ranks come from counting,
// CKA is evaluated in feature space rather than through Gram matrices.

#include <cmath>
#include <vector>

#include "metarep/random.hpp"

namespace metarep::oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix euclidean_rdm(const Matrix& x) {
  const std::size_t n = x.size();
  Matrix d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < x[i].size(); ++k) s += (x[i][k] - x[j][k]) * (x[i][k] - x[j][k]);
      d[i][j] = std::sqrt(s);
    }
  return d;
}

// rank = 1 + #smaller + (#equal - 1) / 2
inline std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0.0, equal = 0.0;
    for (double v : x) {
      if (v < x[i]) less += 1.0;
      if (v == x[i]) equal += 1.0;
    }
    r[i] = 1.0 + less + (equal - 1.0) / 2.0;
  }
  return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx) / std::sqrt(syy);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(ranks(x), ranks(y));
}

inline double rsa(const Matrix& a, const Matrix& b) {
  std::vector<double> ta, tb;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < i; ++j) {
      ta.push_back(a[i][j]);
      tb.push_back(b[i][j]);
    }
  return 1.0 - spearman(ta, tb);
}

inline Matrix center_columns(Matrix x) {
  const std::size_t n = x.size(), d = x[0].size();
  for (std::size_t k = 0; k < d; ++k) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x[i][k];
    mu /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) x[i][k] -= mu;
  }
  return x;
}

// ||A^T B||_F^2
inline double cross_frob2(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t p = 0; p < a[0].size(); ++p)
    for (std::size_t q = 0; q < b[0].size(); ++q) {
      double c = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) c += a[i][p] * b[i][q];
      s += c * c;
    }
  return s;
}

inline double linear_cka(const Matrix& x0, const Matrix& y0) {
  const Matrix x = center_columns(x0), y = center_columns(y0);
  return cross_frob2(y, x) / (std::sqrt(cross_frob2(x, x)) * std::sqrt(cross_frob2(y, y)));
}

// Random orthogonal d x d matrix from Gram-Schmidt on Gaussian columns.
inline Matrix random_orthogonal(Rng& rng, std::size_t d) {
  Matrix q(d, std::vector<double>(d));
  for (auto& row : q)
    for (double& v : row) v = rng.normal();
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += q[i][c] * q[i][p];
      for (std::size_t i = 0; i < d; ++i) q[i][c] -= dot * q[i][p];
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) norm += q[i][c] * q[i][c];
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < d; ++i) q[i][c] /= norm;
  }
  return q;
}

inline Matrix multiply(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

}  // namespace metarep::oracle
