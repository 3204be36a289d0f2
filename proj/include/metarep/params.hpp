#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "metarep/autodiff.hpp"

namespace metarep {

// Named tensors. std::map keeps iteration lexicographic, which every
// serializer and reduction in the project relies on.
using ParamSet = std::map<std::string, Tensor>;
using VarMap = std::map<std::string, Var>;

inline bool conformable(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib)
    if (ia->first != ib->first || ia->second.shape() != ib->second.shape()) return false;
  return true;
}

inline void require_conformable(const ParamSet& a, const ParamSet& b, const char* what) {
  if (!conformable(a, b)) throw ShapeError(std::string(what) + ": parameter sets are not conformable");
}

inline VarMap as_params(const ParamSet& p) {
  VarMap out;
  for (const auto& [name, t] : p) out.emplace(name, Var::param(t));
  return out;
}

inline VarMap as_constants(const ParamSet& p) {
  VarMap out;
  for (const auto& [name, t] : p) out.emplace(name, Var::constant(t));
  return out;
}

inline ParamSet values(const VarMap& v) {
  ParamSet out;
  for (const auto& [name, var] : v) out.emplace(name, var.value());
  return out;
}

inline VarMap detach(const VarMap& v) {
  VarMap out;
  for (const auto& [name, var] : v) out.emplace(name, var.detach());
  return out;
}

inline std::size_t parameter_count(const ParamSet& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : p) n += t.size();
  return n;
}

// Gradient of a scalar with respect to every entry of a VarMap. Names the
// loss does not reach get zeros and are listed in `unreachable`.
inline VarMap grad(const Var& loss, const VarMap& wrt, bool create_graph = false,
                   std::vector<std::string>* unreachable = nullptr) {
  std::vector<Var> vars;
  vars.reserve(wrt.size());
  for (const auto& [name, v] : wrt) vars.push_back(v);
  std::vector<bool> missing;
  std::vector<Var> g = grad(loss, vars, create_graph, &missing);
  VarMap out;
  std::size_t i = 0;
  for (const auto& [name, v] : wrt) {
    if (missing[i] && unreachable) unreachable->push_back(name);
    out.emplace(name, std::move(g[i]));
    ++i;
  }
  return out;
}

// Central differences, one coordinate at a time.
inline ParamSet finite_diff_grad(const std::function<double(const ParamSet&)>& f,
                                 const ParamSet& at, double h) {
  if (!(h > 0.0)) throw Error("finite_diff_grad: step must be positive");
  ParamSet probe = at;
  ParamSet out;
  for (auto& [name, t] : probe) {
    Tensor g(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + h;
      const double up = f(probe);
      t[i] = saved - h;
      const double down = f(probe);
      t[i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

// max over entries of |a - b| / (1 + |b|)
inline double max_relative_error(const ParamSet& a, const ParamSet& b) {
  require_conformable(a, b, "max_relative_error");
  double worst = 0.0;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib)
    for (std::size_t i = 0; i < ia->second.size(); ++i)
      worst = std::max(worst, std::abs(ia->second[i] - ib->second[i]) / (1.0 + std::abs(ib->second[i])));
  return worst;
}

}  // namespace metarep
