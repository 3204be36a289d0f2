#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "metarep/tensor.hpp"

namespace metarep {

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fingerprint(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double)), h);
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

// Shortest representation that reads back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Default worker count: METAREP_THREADS, else hardware concurrency.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("METAREP_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers write
// results into slot i, so output order never depends on scheduling. The
// first exception (lowest index) is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::size_t next = 0;
  std::mutex m;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(m);
        if (next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// CSV with one '#' provenance line, a header row, then rows.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& provenance, const std::string& header)
      : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw Error("cannot write '" + path + "'");
    out_ << "# " << provenance << '\n' << header << '\n';
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    if (!out_) throw Error("write failed for '" + path_ + "'");
  }
  const std::string& path() const { return path_; }

 private:
  std::ofstream out_;
  std::string path_;
};

}  // namespace metarep
