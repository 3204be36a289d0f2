#pragma once

// Checkpoint file layout (all integers and payloads little-endian):
//
//   "MRCK" | u32 version=1 | u32 entry_count |
//   entry_count x ( u16 name_len | name (UTF-8) | u8 rank | u32 extent x rank | f64 x size )
//
// Parameters are written in lexicographic order. The training step and
// config fingerprint travel as the reserved entry "__meta" = [step,
// fingerprint_hi32, fingerprint_lo32].

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "metarep/params.hpp"

namespace metarep {

struct Checkpoint {
  std::uint64_t step = 0;
  ParamSet params;
  std::uint64_t config_fingerprint = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kMetaEntry = "__meta";

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class LeReader {
 public:
  LeReader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("truncated checkpoint '" + source_ + "'");
  }
  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline void put_entry(std::string& out, const std::string& name, const Tensor& t) {
  if (name.size() > 0xffff) throw FormatError("checkpoint entry name too long");
  if (t.rank() > 0xff) throw FormatError("checkpoint entry rank too large");
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t e : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.size() + 1));
  const Tensor meta(Shape{3}, {static_cast<double>(ck.step),
                               static_cast<double>(ck.config_fingerprint >> 32),
                               static_cast<double>(ck.config_fingerprint & 0xffffffffULL)});
  detail::put_entry(out, kMetaEntry, meta);
  for (const auto& [name, t] : ck.params) {
    if (name.starts_with("__")) throw FormatError("parameter name '" + name + "' uses reserved prefix");
    detail::put_entry(out, name, t);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "<memory>") {
  detail::LeReader r(bytes, source);
  if (r.take(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("bad checkpoint magic in '" + source + "'");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in '" + source + "'");
  const auto count = r.get<std::uint32_t>();
  Checkpoint ck;
  bool have_meta = false;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.get<std::uint16_t>();
    std::string name(r.take(len));
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(r.get<std::uint64_t>());
    if (name == kMetaEntry) {
      if (t.size() != 3) throw FormatError("malformed checkpoint metadata in '" + source + "'");
      ck.step = static_cast<std::uint64_t>(t[0]);
      ck.config_fingerprint = (static_cast<std::uint64_t>(t[1]) << 32) | static_cast<std::uint64_t>(t[2]);
      have_meta = true;
    } else if (!ck.params.emplace(std::move(name), std::move(t)).second) {
      throw FormatError("duplicate checkpoint entry in '" + source + "'");
    }
  }
  if (!have_meta) throw FormatError("checkpoint '" + source + "' has no metadata entry");
  if (!r.done()) throw FormatError("trailing bytes in checkpoint '" + source + "'");
  return ck;
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t step) {
  std::ostringstream name;
  name << "ckpt_" << std::setw(8) << std::setfill('0') << step << ".mrck";
  return dir / name.str();
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for checkpoint '" + path.string() + "'");
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  return decode_checkpoint(bytes, path.string());
}

// Steps of all ckpt_*.mrck files in a directory, ascending.
inline std::vector<std::uint64_t> list_checkpoints(const std::filesystem::path& dir) {
  std::vector<std::uint64_t> steps;
  if (!std::filesystem::is_directory(dir)) return steps;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string f = entry.path().filename().string();
    if (f.size() == 18 && f.starts_with("ckpt_") && f.ends_with(".mrck"))
      steps.push_back(std::stoull(f.substr(5, 8)));
  }
  std::sort(steps.begin(), steps.end());
  return steps;
}

}  // namespace metarep
