#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "svt/distill.hpp"
#include "svt/finetune.hpp"
#include "svt/metrics.hpp"
#include "svt/vit.hpp"

namespace svt {

// ---------------------------------------------------------------------------
// CLS attention extraction. The raw row is the last block's CLS attention for
// one head, softmax output over all 1+n tokens; the display grid drops the
// CLS term and renormalizes over the n patches, figure-style.
// ---------------------------------------------------------------------------

struct AttentionMap {
  int heads = 0, gh = 0, gw = 0;              // patch grid is gh x gw
  std::vector<std::vector<float>> raw;        // heads x (1+n), full CLS row
  std::vector<std::vector<float>> head_grid;  // heads x (gh*gw), renormalized
  std::vector<float> mean_grid;               // gh*gw, mean over heads
};

// one image [1,H,W,3], already normalized like the training input
template <class T>
AttentionMap attention_map(ViT<T>& m, const Tensor<T>& image) {
  if (image->shape.size() != 4 || image->shape[0] != 1)
    throw shape_error("attention_map: want one [1,H,W,3] image, got " +
                      shape_str(image->shape));
  NoGrad<T> ng;
  auto out = forward(m, image, /*want_attention=*/true);
  const Tensor<T>& a = out.attention.back();  // [1, heads, 1+n, 1+n]
  AttentionMap map;
  map.heads = int(a->shape[1]);
  const int n1 = int(a->shape[2]);
  map.gh = image->shape[1] / m.cfg.patch;
  map.gw = image->shape[2] / m.cfg.patch;
  if (map.gh * map.gw + 1 != n1)
    throw shape_error("attention_map: grid " + std::to_string(map.gh) + "x" +
                      std::to_string(map.gw) + " does not match " +
                      std::to_string(n1) + " tokens");
  map.raw.resize(map.heads);
  map.head_grid.resize(map.heads);
  map.mean_grid.assign(std::size_t(map.gh) * map.gw, 0.f);
  for (int h = 0; h < map.heads; ++h) {
    const T* row = a->data.data() + (std::size_t)h * n1 * n1;  // CLS row first
    auto& raw = map.raw[h];
    raw.assign(row, row + n1);
    double sum = 0;
    for (const float v : raw) {
      if (!(v >= 0.f))
        throw std::runtime_error(
            "numeric error: attention_map: negative attention in head " +
            std::to_string(h));
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-5)
      throw std::runtime_error("numeric error: attention_map: head " +
                               std::to_string(h) + " CLS row sums to " +
                               std::to_string(sum));
    const double patch_mass = sum - raw[0];
    if (!(patch_mass > 0))
      throw std::runtime_error("numeric error: attention_map: head " +
                               std::to_string(h) + " puts no mass on patches");
    auto& grid = map.head_grid[h];
    grid.resize(std::size_t(map.gh) * map.gw);
    for (int i = 0; i < map.gh * map.gw; ++i) {
      grid[i] = float(raw[1 + i] / patch_mass);
      map.mean_grid[i] += grid[i] / float(map.heads);
    }
  }
  return map;
}

// fraction of a display grid's mass inside one quadrant (0..3 = TL,TR,BL,BR)
inline double quadrant_mass(const std::vector<float>& grid, int gh, int gw,
                            int q) {
  if (int(grid.size()) != gh * gw)
    throw shape_error("quadrant_mass: grid size mismatch");
  if (q < 0 || q > 3) throw param_error("quadrant_mass: want quadrant 0..3");
  double m = 0;
  const int hh = gh / 2, hw = gw / 2;
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x)
      if ((y >= hh) == (q >> 1) && (x >= hw) == (q & 1))
        m += grid[std::size_t(y) * gw + x];
  return m;
}

inline std::vector<float> upsample_nn(const std::vector<float>& grid, int gh,
                                      int gw, int out_h, int out_w) {
  if (gh <= 0 || gw <= 0 || out_h <= 0 || out_w <= 0 ||
      int(grid.size()) != gh * gw)
    throw shape_error("upsample_nn: bad grid");
  std::vector<float> out(std::size_t(out_h) * out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      out[std::size_t(y) * out_w + x] =
          grid[std::size_t(y * gh / out_h) * gw + x * gw / out_w];
  return out;
}

// plain-text portable graymap, values scaled so the peak is white
inline void write_pgm(const std::string& path, const std::vector<float>& img,
                      int h, int w) {
  if (h <= 0 || w <= 0 || int(img.size()) != h * w)
    throw shape_error("write_pgm: bad image");
  float peak = 0.f;
  for (const float v : img) peak = std::max(peak, v);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f << "P2\n" << w << ' ' << h << "\n255\n";
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float v = img[std::size_t(y) * w + x];
      const int g = peak > 0 ? int(std::lround(255.0 * v / peak)) : 0;
      f << g << (x + 1 == w ? '\n' : ' ');
    }
  }
  if (!f) throw io_error("write to '" + path + "' failed");
}

// per-head numeric dump; token 0 is the CLS->CLS entry of the raw row
inline void write_attention_csv(const std::string& path,
                                const AttentionMap& map) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f << "head,token,raw\n";
  char buf[64];
  for (int h = 0; h < map.heads; ++h)
    for (int i = 0; i < int(map.raw[h].size()); ++i) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.9g\n", h, i,
                    double(map.raw[h][i]));
      f << buf;
    }
  if (!f) throw io_error("write to '" + path + "' failed");
}

// normalize one raw image into a [1,S,S,3] forward-ready tensor
template <class T>
Tensor<T> normalized_input(const std::vector<float>& image, int size,
                           const std::array<float, 3>& mean,
                           const std::array<float, 3>& stdev) {
  if (int(image.size()) != size * size * 3)
    throw shape_error("normalized_input: image size mismatch");
  Tensor<T> x = make_tensor<T>({1, size, size, 3});
  for (std::size_t i = 0; i < image.size(); ++i)
    x->data[i] = (T(image[i]) - T(mean[i % 3])) / T(stdev[i % 3]);
  return x;
}

// ---------------------------------------------------------------------------
// initialization comparison: identical budget and data order per seed, only
// the backbone init differs. "self-supervised" pretrains first and hands the
// teacher backbone to the fine-tune stage.
// ---------------------------------------------------------------------------

inline const char* const kInitSchemes[] = {"uniform", "xavier",
                                           "truncated-normal",
                                           "self-supervised"};

struct InitCompareRow {
  std::string scheme;
  std::vector<double> top1;  // per seed, order of the seeds argument
  double mean = 0, lo = 0, hi = 0;
};

struct InitCompareHooks {
  std::function<void(const std::string&, std::uint64_t, const DistillMetrics&)>
      ssl_epoch;
  std::function<void(const std::string&, std::uint64_t,
                     const FinetuneMetrics&)>
      ft_epoch;
};

template <class T>
std::vector<InitCompareRow> init_compare(
    const Dataset& data, const std::vector<std::string>& schemes,
    const ViTConfig& vit_cfg, const FinetuneConfig& ft_cfg,
    const DistillConfig& ssl_cfg, const ViewConfig& views,
    const std::vector<std::uint64_t>& seeds,
    const InitCompareHooks& hooks = {}) {
  if (schemes.empty())
    throw validation_error("init_compare: no schemes requested");
  if (seeds.empty()) throw validation_error("init_compare: no seeds");
  for (const auto& s : schemes) {
    const bool known = std::find_if(std::begin(kInitSchemes),
                                    std::end(kInitSchemes), [&](const char* k) {
                                      return s == k;
                                    }) != std::end(kInitSchemes);
    if (!known)
      throw param_error(
          "init_compare: unknown scheme '" + s +
          "' (want uniform | xavier | truncated-normal | self-supervised; "
          "gradinit is not supported)");
  }
  std::vector<InitCompareRow> rows;
  for (const auto& scheme : schemes) {
    InitCompareRow row;
    row.scheme = scheme;
    for (const auto seed : seeds) {
      FinetuneConfig cfg = ft_cfg;
      FinetuneResult<T> res;
      if (scheme == "self-supervised") {
        auto st = pretrain<T>(data, vit_cfg, ssl_cfg, views, seed,
                              [&](const DistillMetrics& m) {
                                if (hooks.ssl_epoch)
                                  hooks.ssl_epoch(scheme, seed, m);
                              });
        const Checkpoint ck = distill_checkpoint(st, "");
        cfg.init = "self-supervised-teacher";
        res = finetune<T>(data, vit_cfg, cfg, &ck, seed,
                          [&](const FinetuneMetrics& m) {
                            if (hooks.ft_epoch) hooks.ft_epoch(scheme, seed, m);
                          });
      } else {
        cfg.init = scheme;
        res = finetune<T>(data, vit_cfg, cfg, nullptr, seed,
                          [&](const FinetuneMetrics& m) {
                            if (hooks.ft_epoch) hooks.ft_epoch(scheme, seed, m);
                          });
      }
      row.top1.push_back(res.final_top1);
    }
    row.lo = *std::min_element(row.top1.begin(), row.top1.end());
    row.hi = *std::max_element(row.top1.begin(), row.top1.end());
    long double sum = 0;
    for (const double v : row.top1) sum += v;
    row.mean = double(sum / row.top1.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

// one row per scheme: mean, min, max, then per-seed top-1 fractions
inline void write_init_compare_csv(const std::string& path,
                                   const std::vector<InitCompareRow>& rows,
                                   const std::vector<std::uint64_t>& seeds) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f << "scheme,mean_top1,min_top1,max_top1";
  for (const auto s : seeds) f << ",top1_s" << s;
  f << '\n';
  char buf[64];
  for (const auto& r : rows) {
    f << r.scheme;
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f", r.mean, r.lo, r.hi);
    f << buf;
    for (const double v : r.top1) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      f << buf;
    }
    f << '\n';
  }
  if (!f) throw io_error("write to '" + path + "' failed");
}

}  // namespace svt
