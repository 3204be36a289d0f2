#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "metarep/tensor.hpp"
#include "metarep/util.hpp"

namespace metarep {

struct Eigensystem {
  std::vector<double> values;  // descending
  Tensor vectors;              // n x n, column k pairs with values[k]
  std::size_t sweeps = 0;
};

// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
// 1e-12 (or 100 sweeps). Each eigenvector is signed so that its
// largest-magnitude entry is positive.
inline Eigensystem jacobi_eigh(const Tensor& s) {
  if (s.rank() != 2 || s.dim(0) != s.dim(1)) throw ShapeError("jacobi_eigh: expected a square matrix");
  const std::size_t n = s.dim(0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(s.at(i, j) - s.at(j, i)) > 1e-10)
        throw ShapeError("jacobi_eigh: matrix is not symmetric at (" + std::to_string(i) + ", " +
                         std::to_string(j) + ")");
  std::vector<double> a(s.vec().begin(), s.vec().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) a[i * n + j] = a[j * n + i] = 0.5 * (s.at(i, j) + s.at(j, i));
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  const auto off_norm = [&] {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) f += a[i * n + j] * a[i * n + j];
    return std::sqrt(f);
  };

  std::size_t sweep = 0;
  for (; sweep < 100 && off_norm() >= 1e-12; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - sn * akq;
          a[k * n + q] = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - sn * aqk;
          a[q * n + k] = sn * apk + c * aqk;
        }
        a[p * n + q] = a[q * n + p] = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - sn * vkq;
          v[k * n + q] = sn * vkp + c * vkq;
        }
      }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });
  Eigensystem r{std::vector<double>(n), Tensor(Shape{n, n}), sweep};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    r.values[k] = a[src * n + src];
    std::size_t big = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(v[i * n + src]) > std::abs(v[big * n + src])) big = i;
    const double sign = v[big * n + src] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) r.vectors.at(i, k) = sign * v[i * n + src];
  }
  return r;
}

struct Embedding {
  Tensor coords;                 // n x dim
  std::vector<double> eigenvalues;  // the dim leading eigenvalues of B
  double residual = 0.0;         // positive eigenvalues beyond dim
};

// Classical (Torgerson) MDS: B = -1/2 J (D o D) J, coords = V_+ sqrt(L_+).
// Non-positive eigenvalues among the leading `dim` give all-zero columns.
inline Embedding classical_mds(const Tensor& d, std::size_t dim) {
  if (d.rank() != 2 || d.dim(0) != d.dim(1)) throw ShapeError("classical_mds: expected a square matrix");
  const std::size_t n = d.dim(0);
  if (dim < 1 || dim > n - 1)
    throw ShapeError("classical_mds: dim must be in [1, " + std::to_string(n - 1) + "]");
  for (std::size_t i = 0; i < n; ++i)
    if (d.at(i, i) != 0.0) throw ShapeError("classical_mds: non-zero diagonal at " + std::to_string(i));

  Tensor b(Shape{n, n});
  std::vector<double> row_mean(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double sq = d.at(i, j) * d.at(i, j);
      row_mean[i] += sq;
      total += sq;
    }
  for (double& m : row_mean) m /= static_cast<double>(n);
  total /= static_cast<double>(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double sq = 0.5 * (d.at(i, j) * d.at(i, j) + d.at(j, i) * d.at(j, i));
      b.at(i, j) = -0.5 * (sq - row_mean[i] - row_mean[j] + total);
    }

  const Eigensystem eig = jacobi_eigh(b);
  const double scale_ref = std::max(1.0, std::abs(eig.values.front()));
  const double tol = 1e-12 * scale_ref;
  if (!(eig.values.front() > tol)) throw DegenerateError("classical_mds: no positive eigenvalues");

  Embedding e{Tensor(Shape{n, dim}), {}, 0.0};
  for (std::size_t k = 0; k < dim; ++k) {
    const double lambda = eig.values[k];
    e.eigenvalues.push_back(lambda);
    if (lambda <= tol) continue;
    const double root = std::sqrt(lambda);
    for (std::size_t i = 0; i < n; ++i) e.coords.at(i, k) = eig.vectors.at(i, k) * root;
  }
  for (std::size_t k = dim; k < n; ++k)
    if (eig.values[k] > tol) e.residual += eig.values[k];
  return e;
}

// `point_id,x,y` CSV (with provenance/header lines) plus a JSON sidecar.
inline void write_embedding(const std::string& csv_path, const std::string& json_path, const Embedding& e,
                            const std::string& provenance) {
  if (e.coords.dim(1) != 2) throw ShapeError("write_embedding: expected a 2-D embedding");
  CsvWriter csv(csv_path, provenance, "point_id,x,y");
  for (std::size_t i = 0; i < e.coords.dim(0); ++i)
    csv.row({std::to_string(i), fmt_double(e.coords.at(i, 0)), fmt_double(e.coords.at(i, 1))});
  nlohmann::json j;
  j["eigenvalues"] = e.eigenvalues;
  j["residual"] = e.residual;
  j["provenance"] = provenance;
  std::ofstream out(json_path, std::ios::binary);
  if (!out) throw Error("cannot write '" + json_path + "'");
  out << j.dump(2) << '\n';
}

}  // namespace metarep
