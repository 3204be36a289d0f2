#pragma once

// Few-shot episode sources.
//
// Every source is indexed: task(i) is a pure function of the source
// configuration and i, so parallel or repeated sampling is reproducible.
// Task indices live in three disjoint ranges: meta-training stream,
// evaluation tasks and probe tasks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "metarep/random.hpp"
#include "metarep/tensor.hpp"

namespace metarep {

struct Episode {
  Tensor support_x;  // (n_way * k_shot) x C x H x W, class-major
  std::vector<int> support_y;
  Tensor query_x;    // (n_way * n_query) x C x H x W, class-major
  std::vector<int> query_y;
  std::size_t n_way = 0, k_shot = 0, n_query = 0;
};

inline constexpr std::uint64_t kTrainTaskLimit = std::uint64_t{1} << 62;
inline constexpr std::uint64_t kEvalTaskBase = std::uint64_t{1} << 62;
inline constexpr std::uint64_t kProbeTaskBase = std::uint64_t{1} << 63;

inline std::uint64_t train_task_index(std::uint64_t step, std::uint64_t slot, std::uint64_t batch) {
  const std::uint64_t idx = step * batch + slot;
  if (idx >= kTrainTaskLimit) throw Error("training task index overflow");
  return idx;
}
inline std::uint64_t eval_task_index(std::uint64_t j) { return kEvalTaskBase + (j % kEvalTaskBase); }
inline std::uint64_t probe_task_index(std::uint64_t seed) {
  return kProbeTaskBase + (seed % kEvalTaskBase);
}
inline bool is_train_task_index(std::uint64_t idx) { return idx < kTrainTaskLimit; }

// Labels 0..n-1, each exactly k times in support and q times in query.
inline bool has_valid_label_counts(const Episode& e) {
  std::vector<std::size_t> s(e.n_way, 0), q(e.n_way, 0);
  for (int y : e.support_y) {
    if (y < 0 || static_cast<std::size_t>(y) >= e.n_way) return false;
    ++s[static_cast<std::size_t>(y)];
  }
  for (int y : e.query_y) {
    if (y < 0 || static_cast<std::size_t>(y) >= e.n_way) return false;
    ++q[static_cast<std::size_t>(y)];
  }
  return std::all_of(s.begin(), s.end(), [&](std::size_t c) { return c == e.k_shot; }) &&
         std::all_of(q.begin(), q.end(), [&](std::size_t c) { return c == e.n_query; }) &&
         e.support_x.shape()[0] == e.support_y.size() && e.query_x.shape()[0] == e.query_y.size();
}

// --- synthetic ---------------------------------------------------------------

struct SynthConfig {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t n_query = 5;
  std::size_t image_size = 28;
  double blur_sigma = 2.0;
  double noise_sigma = 0.35;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_way < 2) throw ConfigError("task.n_way must be >= 2");
    if (k_shot < 1 || n_query < 1) throw ConfigError("task.k_shot and task.n_query must be >= 1");
    if (image_size < 4) throw ConfigError("task.image_size must be >= 4");
    if (blur_sigma < 0.0) throw ConfigError("task.blur_sigma must be >= 0");
    // Prototypes span [0, 1]; noise at or beyond that range drowns them.
    if (noise_sigma < 0.0 || noise_sigma >= 1.0) throw ConfigError("task.noise_sigma must be in [0, 1)");
  }
};

namespace detail {

// One box-filter pass along rows then columns, clamp-to-edge.
inline void box_blur(std::vector<double>& img, std::size_t n, std::size_t radius) {
  if (radius == 0) return;
  std::vector<double> tmp(img.size());
  const auto clamp = [n](std::ptrdiff_t i) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  const double norm = 1.0 / static_cast<double>(2 * radius + 1);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = -r; d <= r; ++d) s += img[y * n + clamp(static_cast<std::ptrdiff_t>(x) + d)];
      tmp[y * n + x] = s * norm;
    }
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t d = -r; d <= r; ++d) s += tmp[clamp(static_cast<std::ptrdiff_t>(y) + d) * n + x];
      img[y * n + x] = s * norm;
    }
}

}  // namespace detail

// Gaussian-blurred white noise, stretched to [0, 1]. Three box passes of
// width w approximate a Gaussian of variance 3 (w^2 - 1) / 12.
inline std::vector<double> synth_prototype(const SynthConfig& cfg, std::uint64_t task_index,
                                           std::size_t cls) {
  const std::size_t n = cfg.image_size;
  Rng rng(derive_seed({cfg.seed, task_index, cls, 0x9907ULL}));
  std::vector<double> img(n * n);
  for (double& v : img) v = rng.uniform();
  const double width = std::sqrt(4.0 * cfg.blur_sigma * cfg.blur_sigma + 1.0);
  const auto radius = static_cast<std::size_t>(std::lround((width - 1.0) / 2.0));
  for (int pass = 0; pass < 3; ++pass) detail::box_blur(img, n, radius);
  const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
  const double mn = *lo, range = *hi - *lo;
  for (double& v : img) v = range > 0.0 ? std::clamp((v - mn) / range, 0.0, 1.0) : 0.5;
  return img;
}

inline Episode synth_episode(const SynthConfig& cfg, std::uint64_t task_index) {
  cfg.validate();
  const std::size_t n = cfg.image_size, px = n * n;
  Episode e;
  e.n_way = cfg.n_way;
  e.k_shot = cfg.k_shot;
  e.n_query = cfg.n_query;
  e.support_x = Tensor(Shape{cfg.n_way * cfg.k_shot, 1, n, n});
  e.query_x = Tensor(Shape{cfg.n_way * cfg.n_query, 1, n, n});
  for (std::size_t c = 0; c < cfg.n_way; ++c) {
    const std::vector<double> proto = synth_prototype(cfg, task_index, c);
    Rng rng(derive_seed({cfg.seed, task_index, c, 0x5a3bULL}));
    const auto draw = [&](Tensor& dst, std::size_t row) {
      double* out = &dst[row * px];
      for (std::size_t i = 0; i < px; ++i) {
        const double noise = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * rng.normal() : 0.0;
        out[i] = std::clamp(proto[i] + noise, 0.0, 1.0);
      }
    };
    for (std::size_t k = 0; k < cfg.k_shot; ++k) {
      draw(e.support_x, c * cfg.k_shot + k);
      e.support_y.push_back(static_cast<int>(c));
    }
    for (std::size_t q = 0; q < cfg.n_query; ++q) {
      draw(e.query_x, c * cfg.n_query + q);
      e.query_y.push_back(static_cast<int>(c));
    }
  }
  return e;
}

// --- IDX (MNIST) -------------------------------------------------------------

struct LabeledImages {
  Tensor x;  // N x 1 x rows x cols, values in [0, 1]
  std::vector<int> y;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                               const std::filesystem::path& path) {
  if (off + 4 > b.size()) throw FormatError("truncated IDX header in '" + path.string() + "'");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

inline LabeledImages load_mnist_idx(const std::filesystem::path& images_path,
                                    const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::read_be32(img, 0, images_path) != kIdxImageMagic)
    throw FormatError("bad IDX image magic in '" + images_path.string() + "'");
  if (detail::read_be32(lab, 0, labels_path) != kIdxLabelMagic)
    throw FormatError("bad IDX label magic in '" + labels_path.string() + "'");
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n != n_labels)
    throw FormatError("image count " + std::to_string(n) + " in '" + images_path.string() +
                      "' does not match label count " + std::to_string(n_labels) + " in '" +
                      labels_path.string() + "'");
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("empty IDX file '" + images_path.string() + "'");
  if (img.size() < 16 + n * rows * cols) throw FormatError("truncated IDX images in '" + images_path.string() + "'");
  if (lab.size() < 8 + n) throw FormatError("truncated IDX labels in '" + labels_path.string() + "'");
  LabeledImages out{Tensor(Shape{n, 1, rows, cols}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n * rows * cols; ++i) out.x[i] = static_cast<double>(img[16 + i]) / 255.0;
  for (std::size_t i = 0; i < n; ++i) out.y[i] = lab[8 + i];
  return out;
}

// Pixels are quantized with round(v * 255) after clamping to [0, 1].
inline void write_mnist_idx(const std::filesystem::path& images_path,
                            const std::filesystem::path& labels_path, const LabeledImages& data) {
  const Shape& s = data.x.shape();
  if (s.size() != 4 || s[1] != 1 || s[0] != data.y.size())
    throw ShapeError("write_mnist_idx: expected N x 1 x H x W images with N labels");
  std::ofstream img(images_path, std::ios::binary), lab(labels_path, std::ios::binary);
  if (!img || !lab) throw FormatError("cannot write IDX files");
  detail::put_be32(img, kIdxImageMagic);
  for (std::size_t d : {s[0], s[2], s[3]}) detail::put_be32(img, static_cast<std::uint32_t>(d));
  for (double v : data.x.data()) img.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(s[0]));
  for (int y : data.y) {
    if (y < 0 || y > 255) throw FormatError("IDX labels must fit in one byte");
    lab.put(static_cast<char>(y));
  }
}

// --- PGM class directories -----------------------------------------------------

// class name -> images (each 1 x H x W)
using ClassPool = std::map<std::string, std::vector<Tensor>>;

// Nearest neighbour: output pixel i samples input floor(i * in / out).
inline Tensor resample_nearest(const Tensor& img, std::size_t size) {
  const std::size_t h = img.shape()[1], w = img.shape()[2];
  Tensor out(Shape{1, size, size});
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) out[i * size + j] = img[(i * h / size) * w + (j * w / size)];
  return out;
}

inline Tensor decode_pgm(const std::vector<unsigned char>& bytes, const std::string& name) {
  std::size_t pos = 0;
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto token = [&] {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  const auto number = [&](const char* what) {
    const std::string t = token();
    if (t.empty() || !std::all_of(t.begin(), t.end(), ::isdigit))
      throw FormatError("bad PGM " + std::string(what) + " in '" + name + "'");
    return static_cast<std::size_t>(std::stoul(t));
  };
  if (token() != "P5") throw FormatError("'" + name + "' is not a binary (P5) PGM");
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (maxval == 0 || maxval > 255) throw FormatError("PGM maxval " + std::to_string(maxval) + " unsupported in '" + name + "'");
  if (w == 0 || h == 0) throw FormatError("empty PGM '" + name + "'");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + w * h) throw FormatError("truncated PGM '" + name + "'");
  Tensor out(Shape{1, h, w});
  for (std::size_t i = 0; i < w * h; ++i)
    out[i] = std::min(1.0, static_cast<double>(bytes[pos + i]) / static_cast<double>(maxval));
  return out;
}

inline ClassPool load_pgm_classes(const std::filesystem::path& root, std::size_t image_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw FormatError("'" + root.string() + "' is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw FormatError("no class directories under '" + root.string() + "'");
  ClassPool pool;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw FormatError("class directory '" + dir.string() + "' contains no .pgm files");
    auto& images = pool[dir.filename().string()];
    for (const auto& f : files)
      images.push_back(resample_nearest(decode_pgm(detail::read_file(f), f.string()), image_size));
  }
  return pool;
}

// N distinct classes, then K + Q distinct images per class, relabelled
// 0..N-1 in sampled order.
inline Episode episode_from_pool(const ClassPool& pool, std::size_t n_way, std::size_t k_shot,
                                 std::size_t n_query, Rng& rng) {
  if (pool.size() < n_way)
    throw Error("pool has " + std::to_string(pool.size()) + " classes, need " + std::to_string(n_way));
  std::vector<const ClassPool::value_type*> classes;
  for (const auto& entry : pool) classes.push_back(&entry);
  rng.shuffle(classes);
  classes.resize(n_way);
  const Shape& img_shape = classes.front()->second.front().shape();
  const std::size_t px = shape_size(img_shape);
  Episode e;
  e.n_way = n_way;
  e.k_shot = k_shot;
  e.n_query = n_query;
  Shape ss{n_way * k_shot}, qs{n_way * n_query};
  ss.insert(ss.end(), img_shape.begin(), img_shape.end());
  qs.insert(qs.end(), img_shape.begin(), img_shape.end());
  e.support_x = Tensor(ss);
  e.query_x = Tensor(qs);
  for (std::size_t c = 0; c < n_way; ++c) {
    const auto& [name, images] = *classes[c];
    if (images.size() < k_shot + n_query)
      throw Error("class '" + name + "' has " + std::to_string(images.size()) + " images, need " +
                  std::to_string(k_shot + n_query));
    std::vector<std::size_t> order(images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < k_shot + n_query; ++i) {
      const Tensor& src = images[order[i]];
      if (src.shape() != img_shape) throw ShapeError("class '" + name + "' has mismatched image shape");
      const bool support = i < k_shot;
      Tensor& dst = support ? e.support_x : e.query_x;
      const std::size_t row = support ? c * k_shot + i : c * n_query + (i - k_shot);
      std::copy(src.data().begin(), src.data().end(), dst.data().begin() + static_cast<std::ptrdiff_t>(row * px));
      (support ? e.support_y : e.query_y).push_back(static_cast<int>(c));
    }
  }
  return e;
}

// --- indexed sources -----------------------------------------------------------

class TaskSource {
 public:
  virtual ~TaskSource() = default;
  // Episode with the source's own query count.
  virtual Episode task(std::uint64_t index) const = 0;
  // Same task identity, different number of query images per class.
  virtual Episode task(std::uint64_t index, std::size_t n_query) const = 0;
  virtual std::size_t n_way() const = 0;
  virtual std::string describe() const = 0;
};

class SynthTaskSource final : public TaskSource {
 public:
  explicit SynthTaskSource(SynthConfig cfg) : cfg_(cfg) { cfg_.validate(); }
  Episode task(std::uint64_t index) const override { return synth_episode(cfg_, index); }
  Episode task(std::uint64_t index, std::size_t n_query) const override {
    SynthConfig c = cfg_;
    c.n_query = n_query;
    return synth_episode(c, index);
  }
  std::size_t n_way() const override { return cfg_.n_way; }
  std::string describe() const override {
    return "synthetic n_way=" + std::to_string(cfg_.n_way) + " k_shot=" + std::to_string(cfg_.k_shot) +
           " n_query=" + std::to_string(cfg_.n_query) + " seed=" + std::to_string(cfg_.seed);
  }
  const SynthConfig& config() const { return cfg_; }

 private:
  SynthConfig cfg_;
};

class PoolTaskSource final : public TaskSource {
 public:
  PoolTaskSource(std::shared_ptr<const ClassPool> pool, std::size_t n_way, std::size_t k_shot,
                 std::size_t n_query, std::uint64_t seed)
      : pool_(std::move(pool)), n_way_(n_way), k_shot_(k_shot), n_query_(n_query), seed_(seed) {}
  Episode task(std::uint64_t index) const override { return task(index, n_query_); }
  Episode task(std::uint64_t index, std::size_t n_query) const override {
    Rng rng(derive_seed({seed_, index, 0x9001ULL}));
    return episode_from_pool(*pool_, n_way_, k_shot_, n_query, rng);
  }
  std::size_t n_way() const override { return n_way_; }
  std::string describe() const override {
    return "pool classes=" + std::to_string(pool_->size()) + " n_way=" + std::to_string(n_way_) +
           " seed=" + std::to_string(seed_);
  }

 private:
  std::shared_ptr<const ClassPool> pool_;
  std::size_t n_way_, k_shot_, n_query_;
  std::uint64_t seed_;
};

// The held-out task whose query inputs serve as the RSA probe set for a
// whole experiment run. Its index never collides with training tasks.
// probe_size = n_way * queries per class; 0 keeps the source's query count.
inline Episode probe_task(const TaskSource& source, std::uint64_t probe_seed, std::size_t probe_size = 0) {
  if (probe_size == 0) return source.task(probe_task_index(probe_seed));
  if (probe_size % source.n_way() != 0)
    throw ConfigError("probe size " + std::to_string(probe_size) + " is not a multiple of n_way " +
                      std::to_string(source.n_way()));
  return source.task(probe_task_index(probe_seed), probe_size / source.n_way());
}

inline Episode probe_task(const SynthConfig& cfg, std::uint64_t probe_seed) {
  return synth_episode(cfg, probe_task_index(probe_seed));
}

}  // namespace metarep
