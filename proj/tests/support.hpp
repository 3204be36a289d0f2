#pragma once

// Small helpers shared by the test binaries.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "metarep/random.hpp"
#include "metarep/tensor.hpp"

namespace metarep::test_support {

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("metarep_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline Tensor uniform_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace metarep::test_support
