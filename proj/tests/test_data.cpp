#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "svt/checkpoint.hpp"
#include "svt/data.hpp"
#include "svt/ops.hpp"

using namespace svt;
namespace fs = std::filesystem;

namespace {

fs::path fixture_dir() {
  auto d = fs::temp_directory_path() / "svt_data_fixtures";
  fs::create_directories(d);
  return d;
}

std::vector<unsigned char> cifar10_record(int label,
                                          bool patterned = true) {
  std::vector<unsigned char> r(3073, 0);
  r[0] = (unsigned char)label;
  if (patterned)
    for (int i = 0; i < 3072; ++i) r[(std::size_t)i + 1] = (unsigned char)(i % 256);
  return r;
}

void write_records(const fs::path& p,
                   const std::vector<std::vector<unsigned char>>& recs) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  for (const auto& r : recs)
    f.write(reinterpret_cast<const char*>(r.data()), std::streamsize(r.size()));
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("cifar-10 fixture decodes to exact bytes") {
  auto dir = fixture_dir() / "c10";
  fs::create_directories(dir);
  for (int i = 1; i <= 5; ++i)
    write_records(dir / ("data_batch_" + std::to_string(i) + ".bin"),
                  {cifar10_record(i % 10), cifar10_record(0, false)});
  write_records(dir / "test_batch.bin", {cifar10_record(7)});

  auto d = load_cifar10(dir.string());
  CHECK(d.train.size() == 10);
  CHECK(d.test.size() == 1);
  CHECK(d.classes == 10);
  CHECK(d.image_size == 32);
  CHECK(d.train[0].label == 1);
  CHECK(d.test[0].label == 7);

  // pixel (y,x,c) comes from plane byte c*1024 + y*32 + x
  auto px = [&](const Sample& s, int y, int x, int c) {
    return s.image[(std::size_t)(y * 32 + x) * 3 + c];
  };
  CHECK(px(d.train[0], 0, 0, 0) == 0.0f);
  CHECK(px(d.train[0], 0, 5, 0) == 5.0f / 255.0f);
  CHECK(px(d.train[0], 1, 0, 0) == 32.0f / 255.0f);
  CHECK(px(d.train[0], 0, 0, 1) == 0.0f);  // 1024 % 256
  CHECK(px(d.train[0], 2, 3, 2) == float((2048 + 67) % 256) / 255.0f);

  // the all-zero record is label 0, all black
  CHECK(d.train[1].label == 0);
  for (auto v : d.train[1].image) CHECK(v == 0.0f);

  SUBCASE("length not a record multiple is a format error") {
    std::ofstream f(dir / "data_batch_1.bin",
                    std::ios::binary | std::ios::app);
    f.put(char(1));
    f.close();
    CHECK_THROWS_WITH_AS(load_cifar10(dir.string()),
                         doctest::Contains("record size"), std::runtime_error);
  }
  SUBCASE("out-of-range label is a corrupt record") {
    write_records(dir / "data_batch_2.bin", {cifar10_record(10)});
    CHECK_THROWS_WITH_AS(load_cifar10(dir.string()),
                         doctest::Contains("corrupt"), std::runtime_error);
  }
  SUBCASE("missing file is an io error") {
    CHECK_THROWS_WITH_AS(load_cifar10((dir / "nope").string()),
                         doctest::Contains("io error"), std::runtime_error);
  }
}

TEST_CASE("cifar-100 uses the fine label byte") {
  auto dir = fixture_dir() / "c100";
  fs::create_directories(dir);
  std::vector<unsigned char> rec(3074, 0);
  rec[0] = 5;   // coarse, ignored
  rec[1] = 42;  // fine
  rec[2 + 100] = 200;
  write_records(dir / "train.bin", {rec, std::vector<unsigned char>(3074, 0)});
  write_records(dir / "test.bin", {rec});

  auto d = load_cifar100(dir.string());
  CHECK(d.classes == 100);
  CHECK(d.train.size() == 2);
  CHECK(d.train[0].label == 42);
  CHECK(d.train[0].image[(std::size_t)(3 * 32 + 4) * 3] == 200.0f / 255.0f);
  CHECK(d.train[1].label == 0);

  SUBCASE("wrong modulus") {
    std::ofstream f(dir / "train.bin", std::ios::binary | std::ios::app);
    f.write("xx", 2);
    f.close();
    CHECK_THROWS_WITH_AS(load_cifar100(dir.string()),
                         doctest::Contains("3074"), std::runtime_error);
  }
  SUBCASE("fine label over 99 is corrupt") {
    rec[1] = 100;
    write_records(dir / "train.bin", {rec});
    CHECK_THROWS_WITH_AS(load_cifar100(dir.string()),
                         doctest::Contains("corrupt"), std::runtime_error);
  }
}

TEST_CASE("normalization identities and statistics") {
  auto d = synthetic_dataset(11, 20, 3, 16);

  SUBCASE("mean 0 / std 1 is the identity") {
    auto img = d.train[0].image;
    auto copy = img;
    normalize_image(img, {0, 0, 0}, {1, 1, 1});
    CHECK(img == copy);
  }
  SUBCASE("zero std is rejected") {
    auto img = d.train[0].image;
    CHECK_THROWS_WITH_AS(normalize_image(img, {0, 0, 0}, {1, 0, 1}),
                         doctest::Contains("parameter error"),
                         std::runtime_error);
  }
  SUBCASE("normalized train split has near-zero channel means") {
    double sum[3] = {0, 0, 0};
    std::size_t n = 0;
    for (const auto& s : d.train) {
      auto img = s.image;
      normalize_image(img, d.mean, d.stdev);
      for (std::size_t i = 0; i < img.size(); ++i) sum[i % 3] += img[i];
      n += img.size() / 3;
    }
    for (int c = 0; c < 3; ++c) CHECK(std::abs(sum[c] / double(n)) < 0.01);
  }
  SUBCASE("denormalize inverts normalize") {
    auto img = d.train[3].image;
    auto orig = img;
    normalize_image(img, d.mean, d.stdev);
    denormalize_image(img, d.mean, d.stdev);
    for (std::size_t i = 0; i < img.size(); ++i)
      CHECK(std::abs(img[i] - orig[i]) < 1e-6f);
  }
  SUBCASE("make_batch normalizes and stacks") {
    auto b = make_batch(d.train, {0, 5}, 16, d.mean, d.stdev);
    CHECK(b->shape == Shape{2, 16, 16, 3});
    CHECK(b->data[0] ==
          (d.train[0].image[0] - d.mean[0]) / d.stdev[0]);
    CHECK(labels_of(d.train, {0, 5}) ==
          std::vector<int>{d.train[0].label, d.train[5].label});
  }
}

TEST_CASE("synthetic datasets are deterministic and class-consistent") {
  auto a = synthetic_dataset(7, 4, 3, 16);
  auto b = synthetic_dataset(7, 4, 3, 16);
  CHECK(a.train.size() == 12);
  CHECK(a.test.size() == 3);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].image == b.train[i].image);
    CHECK(a.train[i].label == b.train[i].label);
  }

  SUBCASE("zero noise collapses each class to its prototype") {
    auto c = synthetic_dataset(7, 3, 2, 16, 0.0);
    CHECK(c.train[0].image == c.train[1].image);
    CHECK(c.train[3].image == c.train[4].image);
    CHECK(c.train[0].image != c.train[3].image);
  }
  SUBCASE("different seeds differ") {
    auto c = synthetic_dataset(8, 4, 3, 16);
    CHECK(a.train[0].image != c.train[0].image);
  }
}

TEST_CASE("quadrant probes record where the pattern sits") {
  auto d = synthetic_dataset(3, 6, 4, 16, 0.0, true);
  REQUIRE(d.train_quadrant.size() == d.train.size());
  REQUIRE(d.test_quadrant.size() == d.test.size());
  bool saw_multiple = false;
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto& img = d.train[i].image;
    double energy[4] = {0, 0, 0, 0};
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const int q = (y / 8) * 2 + (x / 8);
        for (int c = 0; c < 3; ++c)
          energy[q] += std::abs(img[(std::size_t)(y * 16 + x) * 3 + c] - 0.1);
      }
    int best = 0;
    for (int q = 1; q < 4; ++q)
      if (energy[q] > energy[best]) best = q;
    CHECK(best == d.train_quadrant[i]);
    if (d.train_quadrant[i] != d.train_quadrant[0]) saw_multiple = true;
  }
  CHECK(saw_multiple);
}

TEST_CASE("checkpoint round trips byte-exactly") {
  auto dir = fixture_dir();
  const auto p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();

  Checkpoint ck;
  ck.meta = "{\"stage\":\"pretrain\",\"epoch\":3,\"seed\":7}";
  ck.entries.push_back({"m", {2, 2}, {1, 2, 3, 4}});
  ck.entries.push_back({"bias", {3}, {-0.5f, 0.25f, 9.75f}});
  save_checkpoint(p1, ck);

  auto back = load_checkpoint(p1);
  CHECK(back.meta == ck.meta);
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].name == "m");
  CHECK(back.entries[0].dims == Shape{2, 2});
  CHECK(back.entries[0].data == std::vector<float>{1, 2, 3, 4});
  CHECK(back.entries[1].data == ck.entries[1].data);

  save_checkpoint(p2, back);
  CHECK(slurp(p1) == slurp(p2));

  // size = header(4+4+4+meta+4) + per entry 2+name+1+1+4*rank+4*numel
  const std::size_t want = 16 + ck.meta.size() + (2 + 1 + 1 + 1 + 8 + 16) +
                           (2 + 4 + 1 + 1 + 4 + 12);
  CHECK(fs::file_size(p1) == want);
}

TEST_CASE("checkpoint failure modes") {
  auto dir = fixture_dir();
  const auto p = (dir / "bad.ckpt").string();
  Checkpoint ck;
  ck.entries.push_back({"w", {2}, {1, 2}});
  save_checkpoint(p, ck);

  SUBCASE("bad magic") {
    auto bytes = slurp(p);
    bytes[0] = 'X';
    std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("magic"),
                         std::runtime_error);
  }
  SUBCASE("future version is refused, never reinterpreted") {
    auto bytes = slurp(p);
    bytes[4] = 2;
    std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("version 2"),
                         std::runtime_error);
  }
  SUBCASE("truncated payload") {
    auto bytes = slurp(p);
    bytes.resize(bytes.size() - 3);
    std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("truncated"),
                         std::runtime_error);
  }
  SUBCASE("duplicate names refused on save") {
    ck.entries.push_back({"w", {1}, {3}});
    CHECK_THROWS_WITH_AS(save_checkpoint(p, ck),
                         doctest::Contains("duplicate"), std::runtime_error);
  }
  SUBCASE("entry dims must cover the payload") {
    ck.entries[0].dims = {3};
    CHECK_THROWS_WITH_AS(save_checkpoint(p, ck), doctest::Contains("dims"),
                         std::runtime_error);
  }
}

TEST_CASE("parameters round trip through checkpoints bit-exactly") {
  auto dir = fixture_dir();
  const auto p = (dir / "params.ckpt").string();

  Params<float> src{{"layer.w", make_tensor<float>({2, 3},
                                                   {1, 2, 3, 4, 5, 6}, true)},
                    {"layer.b", make_tensor<float>({3}, {7, 8, 9}, true)}};
  save_checkpoint(p, checkpoint_from(src, "{}"));

  Params<float> dst{{"layer.w", make_tensor<float>({2, 3}, true)},
                    {"layer.b", make_tensor<float>({3}, true)}};
  auto ck = load_checkpoint(p);
  load_into(ck, dst);
  CHECK(dst[0].t->data == src[0].t->data);
  CHECK(dst[1].t->data == src[1].t->data);

  SUBCASE("missing tensor is named") {
    Params<float> extra{{"other.w", make_tensor<float>({2}, true)}};
    CHECK_THROWS_WITH_AS(load_into(ck, extra), doctest::Contains("other.w"),
                         std::runtime_error);
  }
  SUBCASE("shape mismatch is named") {
    Params<float> wrong{{"layer.w", make_tensor<float>({3, 2}, true)}};
    CHECK_THROWS_WITH_AS(load_into(ck, wrong), doctest::Contains("layer.w"),
                         std::runtime_error);
  }
}

TEST_CASE("raw tensor import round trips") {
  auto dir = fixture_dir();
  const auto ptr = (dir / "train.svtd").string(),
             pte = (dir / "test.svtd").string();

  auto d0 = synthetic_dataset(5, 3, 2, 8);
  save_raw_samples(ptr, d0.train, 2, 8);
  save_raw_samples(pte, d0.test, 2, 8);
  auto d = load_raw_dataset(ptr, pte, "mini");
  CHECK(d.classes == 2);
  CHECK(d.image_size == 8);
  REQUIRE(d.train.size() == d0.train.size());
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    CHECK(d.train[i].label == d0.train[i].label);
    CHECK(d.train[i].image == d0.train[i].image);
  }

  SUBCASE("bad magic") {
    std::ofstream(ptr, std::ios::binary | std::ios::trunc) << "JUNKJUNK";
    CHECK_THROWS_WITH_AS(load_raw_dataset(ptr, pte, "x"),
                         doctest::Contains("SVTD"), std::runtime_error);
  }
  SUBCASE("mismatched headers") {
    save_raw_samples(ptr, d0.train, 3, 8);
    CHECK_THROWS_WITH_AS(load_raw_dataset(ptr, pte, "x"),
                         doctest::Contains("disagree"), std::runtime_error);
  }
}

TEST_CASE("a linear probe separates the synthetic classes quickly") {
  auto d = synthetic_dataset(1, 8, 2, 16, 0.02);
  std::vector<int> idx(d.train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  auto x4 = make_batch(d.train, idx, 16, d.mean, d.stdev);
  auto labels = labels_of(d.train, idx);
  const int B = int(idx.size()), F = 16 * 16 * 3;

  auto w = make_tensor<float>({2, F}, true);
  auto b = make_tensor<float>({2}, true);
  auto tgt = make_tensor<float>({B, 2});
  for (int i = 0; i < B; ++i) tgt->data[(std::size_t)i * 2 + labels[(std::size_t)i]] = 1.0f;

  Params<float> ps{{"w", w}, {"b", b}};
  auto st = OptimizerState<float>::init(ps, 0.05, 0.0);
  int fitted_at = -1;
  for (int step = 0; step < 200; ++step) {
    auto logits = linear(reshape(x4, {B, F}), w, b);
    auto loss = cross_entropy(logits, tgt);
    zero_grad(ps);
    backward(loss);
    adam_step(ps, st, 0.05, 0.0);

    NoGrad<float> ng;
    auto check = linear(reshape(x4, {B, F}), w, b);
    int correct = 0;
    for (int i = 0; i < B; ++i) {
      int arg = 0;
      for (int c = 1; c < 2; ++c)
        if (check->data[(std::size_t)i * 2 + c] >
            check->data[(std::size_t)i * 2 + arg])
          arg = c;
      correct += arg == labels[(std::size_t)i];
    }
    if (correct == B) {
      fitted_at = step;
      break;
    }
  }
  CHECK(fitted_at >= 0);
  CHECK(fitted_at < 200);
}

TEST_CASE("hue-grouped synthetic classes are not separable by color alone") {
  // 10 classes over 3 hues: color = c%3, shape = c/3
  auto d = synthetic_dataset(1, 1, 10, 16, 0.0, false, 3);

  // classes 0 and 3 share a hue but draw different shapes
  const auto& a = d.train[0].image;
  const auto& b = d.train[3].image;
  std::array<float, 3> seen_a{0, 0, 0}, seen_b{0, 0, 0};
  bool same_palette = true, identical = true;
  for (std::size_t i = 0; i < a.size(); i += 3) {
    if (a[i] != 0.1f) seen_a = {a[i], a[i + 1], a[i + 2]};
    if (b[i] != 0.1f) seen_b = {b[i], b[i + 1], b[i + 2]};
    identical = identical && a[i] == b[i];
  }
  same_palette = seen_a == seen_b;
  CHECK(same_palette);
  CHECK_FALSE(identical);

  // all 10 prototypes remain pairwise distinct
  for (int c1 = 0; c1 < 10; ++c1)
    for (int c2 = c1 + 1; c2 < 10; ++c2) {
      bool differ = false;
      const auto& x = d.train[(std::size_t)c1].image;
      const auto& y = d.train[(std::size_t)c2].image;
      for (std::size_t i = 0; i < x.size() && !differ; ++i)
        differ = x[i] != y[i];
      CHECK(differ);
    }

  // grouping off reproduces the one-hue-per-class fixture
  auto plain = synthetic_dataset(1, 1, 4, 16, 0.0);
  auto zero = synthetic_dataset(1, 1, 4, 16, 0.0, false, 0);
  for (int c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < plain.train[(std::size_t)c].image.size(); ++i)
      CHECK(plain.train[(std::size_t)c].image[i] ==
            zero.train[(std::size_t)c].image[i]);

  CHECK_THROWS_WITH_AS(synthetic_dataset(1, 1, 13, 16, 0.0, false, 3),
                       doctest::Contains("4 shapes per hue"),
                       std::runtime_error);
}
