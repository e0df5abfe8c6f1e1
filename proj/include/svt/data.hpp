#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "svt/io_bytes.hpp"
#include "svt/rng.hpp"
#include "svt/tensor.hpp"

namespace svt {

// image is H*W*3 interleaved (HWC) floats in [0,1]
struct Sample {
  std::vector<float> image;
  int label = 0;
  int id = 0;
};

struct Dataset {
  std::string name;
  int image_size = 32;
  int classes = 10;
  std::vector<Sample> train, test;
  std::array<float, 3> mean{0.f, 0.f, 0.f};
  std::array<float, 3> stdev{1.f, 1.f, 1.f};
  // set only by the quadrant probe generator: train/test object quadrants
  std::vector<int> train_quadrant, test_quadrant;
};

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

inline void check_stats(const std::array<float, 3>& stdev) {
  for (float s : stdev)
    if (s == 0.0f) throw param_error("normalize: zero channel std");
}

inline void normalize_image(std::vector<float>& img,
                            const std::array<float, 3>& mean,
                            const std::array<float, 3>& stdev) {
  check_stats(stdev);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const int c = int(i % 3);
    img[i] = (img[i] - mean[c]) / stdev[c];
  }
}

inline void denormalize_image(std::vector<float>& img,
                              const std::array<float, 3>& mean,
                              const std::array<float, 3>& stdev) {
  check_stats(stdev);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const int c = int(i % 3);
    img[i] = img[i] * stdev[c] + mean[c];
  }
}

// per-channel statistics over a sample list (population std)
inline void compute_stats(const std::vector<Sample>& samples,
                          std::array<float, 3>& mean,
                          std::array<float, 3>& stdev) {
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  std::size_t n = 0;
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < s.image.size(); ++i) {
      const int c = int(i % 3);
      sum[c] += s.image[i];
      sq[c] += double(s.image[i]) * s.image[i];
    }
    n += s.image.size() / 3;
  }
  for (int c = 0; c < 3; ++c) {
    const double m = n ? sum[c] / double(n) : 0.0;
    const double var = n ? std::max(0.0, sq[c] / double(n) - m * m) : 1.0;
    mean[c] = float(m);
    stdev[c] = float(std::sqrt(var));
    if (stdev[c] == 0.0f) stdev[c] = 1.0f;  // constant channel: leave centered
  }
}

// gather samples into a normalized [B,S,S,3] batch
inline Tensor<float> make_batch(const std::vector<Sample>& samples,
                                const std::vector<int>& idx, int size,
                                const std::array<float, 3>& mean,
                                const std::array<float, 3>& stdev) {
  check_stats(stdev);
  const int B = int(idx.size());
  const std::size_t px = (std::size_t)size * size * 3;
  auto t = make_tensor<float>({B, size, size, 3});
  for (int b = 0; b < B; ++b) {
    const auto& img = samples[(std::size_t)idx[(std::size_t)b]].image;
    if (img.size() != px)
      throw shape_error("make_batch: sample " + std::to_string(idx[b]) +
                        " has " + std::to_string(img.size()) +
                        " values, want " + std::to_string(px));
    float* dst = t->ptr() + (std::size_t)b * px;
    for (std::size_t i = 0; i < px; ++i) {
      const int c = int(i % 3);
      dst[i] = (img[i] - mean[c]) / stdev[c];
    }
  }
  return t;
}

inline std::vector<int> labels_of(const std::vector<Sample>& samples,
                                  const std::vector<int>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out[i] = samples[(std::size_t)idx[i]].label;
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR binary records
// ---------------------------------------------------------------------------

namespace detail {

// Published layout: per record, `label_bytes` leading label bytes then 3072
// pixel bytes as three 32x32 planes (R, G, B), each row-major. The fine
// label is the last label byte. Pixels map to [0,1]; output is HWC.
inline void read_cifar_records(const std::string& path, int label_bytes,
                               int classes, std::vector<Sample>& out) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw io_error("cannot open '" + path + "'");
  const std::int64_t len = f.tellg();
  const std::int64_t rec = label_bytes + 3072;
  if (len % rec != 0)
    throw io_error("'" + path + "' length " + std::to_string(len) +
                   " is not a multiple of the record size " +
                   std::to_string(rec));
  f.seekg(0);
  std::vector<unsigned char> buf((std::size_t)rec);
  const std::int64_t n = len / rec;
  out.reserve(out.size() + (std::size_t)n);
  for (std::int64_t r = 0; r < n; ++r) {
    f.read(reinterpret_cast<char*>(buf.data()), rec);
    if (!f) throw io_error("'" + path + "' truncated at record " +
                           std::to_string(r));
    Sample s;
    s.label = buf[(std::size_t)label_bytes - 1];
    if (s.label >= classes)
      throw io_error("corrupt record " + std::to_string(r) + " in '" + path +
                     "': label " + std::to_string(s.label) + " >= " +
                     std::to_string(classes));
    s.id = int(out.size());
    s.image.resize(3072);
    const unsigned char* px = buf.data() + label_bytes;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        for (int c = 0; c < 3; ++c)
          s.image[(std::size_t)(y * 32 + x) * 3 + c] =
              float(px[c * 1024 + y * 32 + x]) / 255.0f;
    out.push_back(std::move(s));
  }
}

}  // namespace detail

// directory with data_batch_{1..5}.bin and test_batch.bin
inline Dataset load_cifar10(const std::string& dir) {
  Dataset d;
  d.name = "cifar10";
  d.image_size = 32;
  d.classes = 10;
  for (int i = 1; i <= 5; ++i)
    detail::read_cifar_records(dir + "/data_batch_" + std::to_string(i) +
                                   ".bin",
                               1, 10, d.train);
  detail::read_cifar_records(dir + "/test_batch.bin", 1, 10, d.test);
  compute_stats(d.train, d.mean, d.stdev);
  return d;
}

// directory with train.bin and test.bin; records carry coarse then fine label
inline Dataset load_cifar100(const std::string& dir) {
  Dataset d;
  d.name = "cifar100";
  d.image_size = 32;
  d.classes = 100;
  detail::read_cifar_records(dir + "/train.bin", 2, 100, d.train);
  detail::read_cifar_records(dir + "/test.bin", 2, 100, d.test);
  compute_stats(d.train, d.mean, d.stdev);
  return d;
}

// ---------------------------------------------------------------------------
// raw tensor import: magic "SVTD", u32 version=1, u32 count, u32 classes,
// u32 height, u32 width, then per record u32 label + h*w*3 f32 HWC in [0,1].
// All integers and floats little-endian. Admits any pre-converted dataset.
// ---------------------------------------------------------------------------

inline std::vector<Sample> load_raw_samples(const std::string& path,
                                            int& classes, int& size) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "SVTD")
    throw io_error("'" + path + "' has no SVTD magic");
  const auto version = detail::read_u32(f, path);
  if (version != 1)
    throw io_error("'" + path + "' is format version " +
                   std::to_string(version) + ", this build reads version 1");
  const auto count = detail::read_u32(f, path);
  classes = int(detail::read_u32(f, path));
  const int h = int(detail::read_u32(f, path));
  const int w = int(detail::read_u32(f, path));
  if (h != w || h <= 0 || classes <= 0)
    throw io_error("'" + path + "' header wants square images and classes > 0");
  size = h;
  std::vector<Sample> out;
  out.reserve(count);
  const std::size_t px = (std::size_t)h * w * 3;
  for (std::uint32_t r = 0; r < count; ++r) {
    Sample s;
    s.label = int(detail::read_u32(f, path));
    if (s.label >= classes)
      throw io_error("corrupt record " + std::to_string(r) + " in '" + path +
                     "': label " + std::to_string(s.label) + " >= " +
                     std::to_string(classes));
    s.id = int(r);
    s.image.resize(px);
    f.read(reinterpret_cast<char*>(s.image.data()),
           std::streamsize(px * sizeof(float)));
    if (!f) throw io_error("'" + path + "' truncated at record " +
                           std::to_string(r));
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_raw_samples(const std::string& path,
                             const std::vector<Sample>& samples, int classes,
                             int size) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f.write("SVTD", 4);
  detail::write_u32(f, 1);
  detail::write_u32(f, std::uint32_t(samples.size()));
  detail::write_u32(f, std::uint32_t(classes));
  detail::write_u32(f, std::uint32_t(size));
  detail::write_u32(f, std::uint32_t(size));
  for (const auto& s : samples) {
    detail::write_u32(f, std::uint32_t(s.label));
    f.write(reinterpret_cast<const char*>(s.image.data()),
            std::streamsize(s.image.size() * sizeof(float)));
  }
  if (!f) throw io_error("write to '" + path + "' failed");
}

inline Dataset load_raw_dataset(const std::string& train_path,
                                const std::string& test_path,
                                const std::string& name = "raw") {
  Dataset d;
  d.name = name;
  int c1 = 0, s1 = 0, c2 = 0, s2 = 0;
  d.train = load_raw_samples(train_path, c1, s1);
  d.test = load_raw_samples(test_path, c2, s2);
  if (c1 != c2 || s1 != s2)
    throw io_error("train/test headers disagree: classes " +
                   std::to_string(c1) + "/" + std::to_string(c2) + ", size " +
                   std::to_string(s1) + "/" + std::to_string(s2));
  d.classes = c1;
  d.image_size = s1;
  compute_stats(d.train, d.mean, d.stdev);
  return d;
}

// Deterministically keep per_class training images of each class (the test
// split stays whole). Selection shuffles each class's index list with its own
// derived stream, so the result is independent of how other classes are laid
// out. Normalization stats are recomputed on the kept images.
inline Dataset balanced_subset(const Dataset& d, int per_class,
                               std::uint64_t seed) {
  if (per_class <= 0)
    throw param_error("balanced_subset: per_class must be positive");
  Dataset out;
  out.name = d.name + "-subset";
  out.image_size = d.image_size;
  out.classes = d.classes;
  out.test = d.test;
  out.test_quadrant = d.test_quadrant;
  Rng root(seed);
  std::vector<std::vector<int>> by_class(d.classes);
  for (int i = 0; i < int(d.train.size()); ++i)
    by_class.at(d.train[i].label).push_back(i);
  for (int c = 0; c < d.classes; ++c) {
    auto& idx = by_class[c];
    if (int(idx.size()) < per_class)
      throw validation_error("balanced_subset: class " + std::to_string(c) +
                             " has " + std::to_string(idx.size()) +
                             " images, want " + std::to_string(per_class));
    Rng rng = root.derive(std::uint64_t(c));
    shuffle(idx, rng);
    for (int i = 0; i < per_class; ++i) {
      out.train.push_back(d.train[idx[i]]);
      if (!d.train_quadrant.empty())
        out.train_quadrant.push_back(d.train_quadrant[idx[i]]);
    }
  }
  compute_stats(out.train, out.mean, out.stdev);
  return out;
}

// ---------------------------------------------------------------------------
// synthetic fixture: k classes of distinct colored geometric patterns plus
// Gaussian pixel noise, linearly separable at low noise, seeded.
// ---------------------------------------------------------------------------

namespace detail {

inline std::array<float, 3> class_color(int c) {
  // golden-ratio hue walk keeps any k colors far apart
  const double h = std::fmod(0.12 + 0.61803398874989485 * c, 1.0) * 6.0;
  const int i = int(h);
  const double f = h - i, v = 0.9, s = 0.85;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = 0, g = 0, b = 0;
  switch (i % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    case 5: r = v; g = p; b = q; break;
  }
  return {float(r), float(g), float(b)};
}

inline bool in_pattern(int kind, double x, double y) {
  const double dx = x - 0.5, dy = y - 0.5;
  const double r = std::sqrt(dx * dx + dy * dy);
  switch (kind & 3) {
    case 0: return r < 0.32;                                   // disk
    case 1: return std::abs(dx) < 0.16 || std::abs(dy) < 0.16; // plus
    case 2: return std::fmod((x + y) * 3.0, 1.0) < 0.5;        // stripes
    default: return r > 0.17 && r < 0.38;                      // ring
  }
}

// paint class pattern into region [ox,ox+rs) x [oy,oy+rs) of an image
inline void paint(std::vector<float>& img, int size, int hue_idx, int kind,
                  int ox, int oy, int rs) {
  const auto col = class_color(hue_idx);
  for (int y = 0; y < rs; ++y)
    for (int x = 0; x < rs; ++x) {
      const double u = (x + 0.5) / rs, v = (y + 0.5) / rs;
      if (!in_pattern(kind, u, v)) continue;
      float* p = img.data() + ((std::size_t)(oy + y) * size + ox + x) * 3;
      p[0] = col[0];
      p[1] = col[1];
      p[2] = col[2];
    }
}

}  // namespace detail

// When `quadrant` is set each pattern lands in a random quadrant (recorded in
// train_quadrant/test_quadrant as 0..3 = TL,TR,BL,BR) for saliency probes.
// hue_groups = 0 gives every class its own hue; a positive value makes
// classes share hues (color = c % hue_groups, shape = c / hue_groups), so
// color alone can no longer separate them
inline Dataset synthetic_dataset(std::uint64_t seed, int n_per_class, int k,
                                 int size, double noise = 0.05,
                                 bool quadrant = false, int hue_groups = 0) {
  if (n_per_class <= 0 || k <= 0 || size <= 0)
    throw param_error("synthetic_dataset: counts and size must be positive");
  if (hue_groups < 0 || (hue_groups > 0 && k > hue_groups * 4))
    throw param_error(
        "synthetic_dataset: hue grouping supports at most 4 shapes per hue");
  Dataset d;
  d.name = "synthetic";
  d.image_size = size;
  d.classes = k;
  Rng root(seed);

  auto gen_split = [&](int per_class, int stream, std::vector<Sample>& out,
                       std::vector<int>& quads) {
    int id = 0;
    for (int c = 0; c < k; ++c)
      for (int i = 0; i < per_class; ++i) {
        Rng rng = root.derive(std::uint64_t(stream) * 1000003u +
                              std::uint64_t(c) * 1009u + std::uint64_t(i));
        Sample s;
        s.label = c;
        s.id = id++;
        s.image.assign((std::size_t)size * size * 3, 0.1f);
        const int hue = hue_groups > 0 ? c % hue_groups : c;
        const int kind = hue_groups > 0 ? c / hue_groups : c;
        if (quadrant) {
          const int q = int(rng.randint(4));
          quads.push_back(q);
          const int half = size / 2;
          detail::paint(s.image, size, hue, kind, (q & 1) * half,
                        (q >> 1) * half, half);
        } else {
          detail::paint(s.image, size, hue, kind, 0, 0, size);
        }
        if (noise > 0)
          for (auto& v : s.image) {
            v += float(noise * rng.normal());
            v = std::min(1.0f, std::max(0.0f, v));
          }
        out.push_back(std::move(s));
      }
  };

  gen_split(n_per_class, 1, d.train, d.train_quadrant);
  gen_split(std::max(1, n_per_class / 5), 2, d.test, d.test_quadrant);
  compute_stats(d.train, d.mean, d.stdev);
  return d;
}

}  // namespace svt
