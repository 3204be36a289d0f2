#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "metarep/random.hpp"
#include "metarep/tasks.hpp"
#include "support.hpp"

using namespace metarep;
namespace fs = std::filesystem;
using metarep::test_support::TempDir;

namespace {

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

void write_pgm(const fs::path& p, std::size_t w, std::size_t h, const std::vector<unsigned char>& px,
               const std::string& header_extra = "") {
  std::string head = "P5\n" + header_extra + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> b(head.begin(), head.end());
  b.insert(b.end(), px.begin(), px.end());
  write_bytes(p, b);
}

}  // namespace

TEST(Tasks, SyntheticEpisodesHaveValidLabelCounts) {
  SynthConfig c;
  c.image_size = 16;
  c.k_shot = 2;
  c.n_query = 3;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Episode e = synth_episode(c, i);
    EXPECT_TRUE(has_valid_label_counts(e));
    EXPECT_EQ(e.support_x.shape(), (Shape{10, 1, 16, 16}));
    EXPECT_EQ(e.query_x.shape(), (Shape{15, 1, 16, 16}));
    for (double v : e.query_x.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Tasks, SyntheticEpisodesAreIndexedDeterministically) {
  SynthConfig c;
  c.image_size = 12;
  EXPECT_EQ(synth_episode(c, 5).support_x, synth_episode(c, 5).support_x);
  EXPECT_NE(synth_episode(c, 5).support_x, synth_episode(c, 6).support_x);
  SynthConfig other = c;
  other.seed = 1;
  EXPECT_NE(synth_episode(c, 5).support_x, synth_episode(other, 5).support_x);
  // More queries extend, and do not change, the support set.
  SynthTaskSource src(c);
  EXPECT_EQ(src.task(9).support_x, src.task(9, 10).support_x);
}

TEST(Tasks, PrototypesSpanTheUnitRange) {
  SynthConfig c;
  c.image_size = 20;
  for (std::size_t cls = 0; cls < 5; ++cls) {
    const auto p = synth_prototype(c, 3, cls);
    EXPECT_DOUBLE_EQ(*std::min_element(p.begin(), p.end()), 0.0);
    EXPECT_DOUBLE_EQ(*std::max_element(p.begin(), p.end()), 1.0);
  }
}

TEST(Tasks, NoiselessSamplesEqualThePrototype) {
  SynthConfig c;
  c.image_size = 10;
  c.noise_sigma = 0.0;
  const Episode e = synth_episode(c, 4);
  const auto proto = synth_prototype(c, 4, 2);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(e.query_x[(2 * c.n_query) * 100 + i], proto[i]);
}

TEST(Tasks, TaskIndexRangesAreDisjoint) {
  EXPECT_TRUE(is_train_task_index(train_task_index(100000, 3, 4)));
  EXPECT_FALSE(is_train_task_index(eval_task_index(0)));
  EXPECT_FALSE(is_train_task_index(probe_task_index(0)));
  EXPECT_NE(eval_task_index(7), probe_task_index(7));
  EXPECT_THROW(train_task_index(kTrainTaskLimit, 0, 1), Error);
}

TEST(Tasks, ProbeSizeMustDivideByWays) {
  SynthConfig c;
  c.image_size = 8;
  SynthTaskSource src(c);
  EXPECT_EQ(probe_task(src, 0, 50).query_x.dim(0), 50u);
  EXPECT_THROW(probe_task(src, 0, 52), ConfigError);
}

TEST(Tasks, SynthConfigValidation) {
  SynthConfig c;
  c.noise_sigma = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SynthConfig{};
  c.k_shot = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Tasks, IdxFilesBuiltByHandAreDecoded) {
  TempDir dir("idx");
  std::vector<unsigned char> img, lab;
  be32(img, 0x803);
  be32(img, 2);
  be32(img, 2);
  be32(img, 3);
  for (unsigned char v : {0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 1}) img.push_back(v);
  be32(lab, 0x801);
  be32(lab, 2);
  lab.push_back(7);
  lab.push_back(3);
  write_bytes(dir.path / "i", img);
  write_bytes(dir.path / "l", lab);
  const LabeledImages d = load_mnist_idx(dir.path / "i", dir.path / "l");
  EXPECT_EQ(d.x.shape(), (Shape{2, 1, 2, 3}));
  EXPECT_EQ(d.y, (std::vector<int>{7, 3}));
  EXPECT_DOUBLE_EQ(d.x[1], 0.2);
  EXPECT_DOUBLE_EQ(d.x[5], 1.0);
  EXPECT_DOUBLE_EQ(d.x[11], 1.0 / 255.0);
}

TEST(Tasks, IdxErrorsAreReported) {
  TempDir dir("idxbad");
  std::vector<unsigned char> img, lab;
  be32(img, 0x803);
  be32(img, 2);
  be32(img, 2);
  be32(img, 2);
  img.resize(16 + 5);  // one pixel short
  be32(lab, 0x801);
  be32(lab, 2);
  lab.push_back(0);
  lab.push_back(1);
  write_bytes(dir.path / "i", img);
  write_bytes(dir.path / "l", lab);
  EXPECT_THROW(load_mnist_idx(dir.path / "i", dir.path / "l"), FormatError);
  EXPECT_THROW(load_mnist_idx(dir.path / "l", dir.path / "l"), FormatError);  // wrong magic
  EXPECT_THROW(load_mnist_idx(dir.path / "missing", dir.path / "l"), FormatError);
}

TEST(Tasks, IdxWriteThenReadIsExactOnTheByteGrid) {
  TempDir dir("idxrt");
  Rng rng(3);
  LabeledImages d{Tensor(Shape{5, 1, 4, 6}), {}};
  for (double& v : d.x.data()) v = static_cast<double>(rng.index(256)) / 255.0;
  for (int i = 0; i < 5; ++i) d.y.push_back(static_cast<int>(rng.index(10)));
  write_mnist_idx(dir.path / "i", dir.path / "l", d);
  const LabeledImages r = load_mnist_idx(dir.path / "i", dir.path / "l");
  EXPECT_EQ(r.x, d.x);
  EXPECT_EQ(r.y, d.y);
}

TEST(Tasks, PgmDecodingHandlesCommentsAndMaxval) {
  const std::string s = "P5\n# a comment\n2 1\n# another\n100\n";
  std::vector<unsigned char> b(s.begin(), s.end());
  b.push_back(50);
  b.push_back(100);
  const Tensor t = decode_pgm(b, "x.pgm");
  EXPECT_EQ(t.shape(), (Shape{1, 1, 2}));
  EXPECT_DOUBLE_EQ(t[0], 0.5);
  EXPECT_DOUBLE_EQ(t[1], 1.0);
  const std::string ascii = "P2\n1 1\n255\n0\n";
  EXPECT_THROW(decode_pgm(std::vector<unsigned char>(ascii.begin(), ascii.end()), "a.pgm"), FormatError);
  std::vector<unsigned char> trunc(s.begin(), s.end());
  trunc.push_back(1);
  EXPECT_THROW(decode_pgm(trunc, "t.pgm"), FormatError);
}

TEST(Tasks, NearestResamplingPicksFloorIndex) {
  Tensor img(Shape{1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Tensor up = resample_nearest(img, 4);
  EXPECT_EQ(up, Tensor(Shape{1, 4, 4}, {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(Tasks, PgmPoolEpisodesUseDistinctClassesAndImages) {
  TempDir dir("pgm");
  const std::size_t classes = 7, per_class = 4;
  for (std::size_t c = 0; c < classes; ++c) {
    fs::create_directories(dir.path / ("class" + std::to_string(c)));
    for (std::size_t i = 0; i < per_class; ++i) {
      // Pixel value encodes (class, image) so sampled images can be traced.
      const auto code = static_cast<unsigned char>(c * per_class + i);
      write_pgm(dir.path / ("class" + std::to_string(c)) / ("img" + std::to_string(i) + ".pgm"), 3, 3,
                std::vector<unsigned char>(9, code), i == 0 ? "# c\n" : "");
    }
  }
  auto pool = std::make_shared<const ClassPool>(load_pgm_classes(dir.path, 6));
  ASSERT_EQ(pool->size(), classes);
  PoolTaskSource src(pool, 5, 1, 2, 11);
  for (std::uint64_t t = 0; t < 30; ++t) {
    const Episode e = src.task(t);
    ASSERT_TRUE(has_valid_label_counts(e));
    std::set<int> codes;
    std::vector<std::set<std::size_t>> class_of(5);
    const auto code_of = [](const Tensor& x, std::size_t row) {
      return static_cast<int>(std::lround(x[row * 36] * 255.0));
    };
    for (std::size_t r = 0; r < e.support_y.size(); ++r) {
      codes.insert(code_of(e.support_x, r));
      class_of[static_cast<std::size_t>(e.support_y[r])].insert(static_cast<std::size_t>(code_of(e.support_x, r)) / per_class);
    }
    for (std::size_t r = 0; r < e.query_y.size(); ++r) {
      codes.insert(code_of(e.query_x, r));
      class_of[static_cast<std::size_t>(e.query_y[r])].insert(static_cast<std::size_t>(code_of(e.query_x, r)) / per_class);
    }
    EXPECT_EQ(codes.size(), 15u);  // all images distinct
    std::set<std::size_t> used;
    for (const auto& s : class_of) {
      EXPECT_EQ(s.size(), 1u);  // one source class per label
      used.insert(*s.begin());
    }
    EXPECT_EQ(used.size(), 5u);  // distinct classes
  }
  EXPECT_EQ(src.task(4).query_x, src.task(4).query_x);
}

TEST(Tasks, PgmPoolErrors) {
  TempDir dir("pgmbad");
  EXPECT_THROW(load_pgm_classes(dir.path, 8), FormatError);  // no classes
  fs::create_directories(dir.path / "a");
  EXPECT_THROW(load_pgm_classes(dir.path, 8), FormatError);  // empty class
  write_pgm(dir.path / "a" / "x.pgm", 2, 2, {0, 0, 0, 0});
  auto pool = std::make_shared<const ClassPool>(load_pgm_classes(dir.path, 4));
  Rng rng(1);
  EXPECT_THROW(episode_from_pool(*pool, 2, 1, 1, rng), Error);
}
