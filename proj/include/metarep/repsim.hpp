#pragma once

// Representation similarity.
//
// RSA is two-stage: each representation (probe inputs x features) becomes an
// RDM of pairwise input dissimilarities; two RDMs are then compared by
// 1 - Spearman over their strictly-lower triangles. Linear CKA compares the
// representation matrices directly.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "metarep/tensor.hpp"
#include "metarep/util.hpp"

namespace metarep {

enum class RdmMetric { euclidean, correlation };

inline std::string to_string(RdmMetric m) { return m == RdmMetric::euclidean ? "euclidean" : "correlation"; }

// Symmetric n x n dissimilarity matrix with zero diagonal.
struct Rdm {
  Tensor d;
  std::size_t n() const { return d.shape()[0]; }
  double operator()(std::size_t i, std::size_t j) const { return d.at(i, j); }
};

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

inline Rdm rdm_euclidean(const Tensor& rep) {
  detail::require_matrix(rep, "rdm_euclidean");
  const std::size_t p = rep.dim(0), d = rep.dim(1);
  if (p < 3) throw ShapeError("rdm_euclidean: need at least 3 probe inputs, got " + std::to_string(p));
  Rdm r{Tensor(Shape{p, p})};
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      const double* a = &rep.data()[i * d];
      const double* b = &rep.data()[j * d];
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
      r.d.at(i, j) = r.d.at(j, i) = std::sqrt(s);
    }
  return r;
}

// 1 - Pearson correlation between rows.
inline Rdm rdm_correlation(const Tensor& rep) {
  detail::require_matrix(rep, "rdm_correlation");
  const std::size_t p = rep.dim(0), d = rep.dim(1);
  if (p < 3) throw ShapeError("rdm_correlation: need at least 3 probe inputs, got " + std::to_string(p));
  std::vector<double> z(p * d);
  for (std::size_t i = 0; i < p; ++i) {
    const double* row = &rep.data()[i * d];
    const double mu = std::accumulate(row, row + d, 0.0) / static_cast<double>(d);
    double ss = 0.0;
    for (std::size_t k = 0; k < d; ++k) ss += (row[k] - mu) * (row[k] - mu);
    if (!(ss > 0.0)) throw DegenerateError("rdm_correlation: row " + std::to_string(i) + " is constant");
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t k = 0; k < d; ++k) z[i * d + k] = (row[k] - mu) * inv;
  }
  Rdm r{Tensor(Shape{p, p})};
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      double c = 0.0;
      for (std::size_t k = 0; k < d; ++k) c += z[i * d + k] * z[j * d + k];
      r.d.at(i, j) = r.d.at(j, i) = std::clamp(1.0 - c, 0.0, 2.0);
    }
  return r;
}

inline Rdm make_rdm(const Tensor& rep, RdmMetric metric) {
  return metric == RdmMetric::euclidean ? rdm_euclidean(rep) : rdm_correlation(rep);
}

// 1-based ranks; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("pearson: length mismatch");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateError("pearson: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
  if (x.size() < 3) throw ShapeError("spearman: need at least 3 values");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  try {
    return pearson(rx, ry);
  } catch (const DegenerateError&) {
    throw DegenerateError("spearman: constant input");
  }
}

// Strictly-lower triangle, row-major: (1,0), (2,0), (2,1), (3,0), ...
inline std::vector<double> lower_triangle(const Rdm& r) {
  const std::size_t n = r.n();
  std::vector<double> out;
  out.reserve(n * (n - 1) / 2);
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) out.push_back(r(i, j));
  return out;
}

inline double rsa_dissimilarity(const Rdm& a, const Rdm& b, std::string_view name_a = "a",
                                std::string_view name_b = "b") {
  if (a.n() != b.n())
    throw ShapeError("rsa_dissimilarity: RDM sizes differ (" + std::to_string(a.n()) + " vs " +
                     std::to_string(b.n()) + ")");
  if (a.n() < 3) throw ShapeError("rsa_dissimilarity: RDMs need n >= 3");
  const auto ta = lower_triangle(a), tb = lower_triangle(b);
  try {
    return 1.0 - spearman(ta, tb);
  } catch (const DegenerateError&) {
    throw DegenerateError("rsa_dissimilarity: constant RDM triangle comparing '" + std::string(name_a) +
                          "' with '" + std::string(name_b) + "'");
  }
}

namespace detail {

// Gram matrix of column-centred rows: (X - 1 mu^T)(X - 1 mu^T)^T.
inline std::vector<double> centered_gram(const Tensor& x) {
  const std::size_t p = x.dim(0), d = x.dim(1);
  std::vector<double> c(x.vec().begin(), x.vec().end());
  for (std::size_t k = 0; k < d; ++k) {
    double mu = 0.0;
    for (std::size_t i = 0; i < p; ++i) mu += c[i * d + k];
    mu /= static_cast<double>(p);
    for (std::size_t i = 0; i < p; ++i) c[i * d + k] -= mu;
  }
  std::vector<double> g(p * p);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += c[i * d + k] * c[j * d + k];
      g[i * p + j] = g[j * p + i] = s;
    }
  return g;
}

}  // namespace detail

// Linear CKA, ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centred
// inputs, evaluated through the P x P Gram matrices.
inline double linear_cka(const Tensor& x, const Tensor& y) {
  detail::require_matrix(x, "linear_cka");
  detail::require_matrix(y, "linear_cka");
  if (x.dim(0) != y.dim(0)) throw ShapeError("linear_cka: row counts differ");
  if (x.dim(0) < 2) throw ShapeError("linear_cka: need at least 2 rows");
  const auto k = detail::centered_gram(x), l = detail::centered_gram(y);
  double kl = 0.0, kk = 0.0, ll = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    kl += k[i] * l[i];
    kk += k[i] * k[i];
    ll += l[i] * l[i];
  }
  if (!(kk > 0.0) || !(ll > 0.0)) throw DegenerateError("linear_cka: representation is constant after centering");
  return std::clamp(kl / std::sqrt(kk * ll), 0.0, 1.0);
}

// n header-less rows of n comma-separated values.
inline void write_rdm_csv(const std::string& path, const Rdm& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  for (std::size_t i = 0; i < r.n(); ++i) {
    for (std::size_t j = 0; j < r.n(); ++j) out << (j ? "," : "") << fmt_double(r(i, j));
    out << '\n';
  }
}

}  // namespace metarep
