#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "svt/rng.hpp"
#include "svt/tensor.hpp"

namespace svt {

// HWC float image in [0,1]
struct Image {
  int h = 0, w = 0;
  std::vector<float> px;

  float* at(int y, int x) { return px.data() + ((std::size_t)y * w + x) * 3; }
  const float* at(int y, int x) const {
    return px.data() + ((std::size_t)y * w + x) * 3;
  }
};

inline Image image_from(const std::vector<float>& hwc, int size) {
  if (hwc.size() != (std::size_t)size * size * 3)
    throw shape_error("image_from: " + std::to_string(hwc.size()) +
                      " values for side " + std::to_string(size));
  return {size, size, hwc};
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

// bilinear with half-pixel centers; exact identity when sizes match
inline Image resize_bilinear(const Image& src, int oh, int ow) {
  Image out{oh, ow, std::vector<float>((std::size_t)oh * ow * 3)};
  const float sy = float(src.h) / float(oh), sx = float(src.w) / float(ow);
  for (int y = 0; y < oh; ++y) {
    float fy = (y + 0.5f) * sy - 0.5f;
    fy = std::min(std::max(fy, 0.0f), float(src.h - 1));
    const int y0 = int(fy), y1 = std::min(y0 + 1, src.h - 1);
    const float wy = fy - y0;
    for (int x = 0; x < ow; ++x) {
      float fx = (x + 0.5f) * sx - 0.5f;
      fx = std::min(std::max(fx, 0.0f), float(src.w - 1));
      const int x0 = int(fx), x1 = std::min(x0 + 1, src.w - 1);
      const float wx = fx - x0;
      const float* p00 = src.at(y0, x0);
      const float* p01 = src.at(y0, x1);
      const float* p10 = src.at(y1, x0);
      const float* p11 = src.at(y1, x1);
      float* o = out.at(y, x);
      for (int c = 0; c < 3; ++c)
        o[c] = (1 - wy) * ((1 - wx) * p00[c] + wx * p01[c]) +
               wy * ((1 - wx) * p10[c] + wx * p11[c]);
    }
  }
  return out;
}

inline Image crop(const Image& src, int y0, int x0, int ch, int cw) {
  Image out{ch, cw, std::vector<float>((std::size_t)ch * cw * 3)};
  for (int y = 0; y < ch; ++y)
    std::copy(src.at(y0 + y, x0), src.at(y0 + y, x0) + (std::size_t)cw * 3,
              out.at(y, 0));
  return out;
}

// Uniform-area random crop: area fraction from scale_range, aspect from
// [3/4, 4/3]; accepted only when the rounded box keeps its fraction inside
// the configured range, so every emitted crop obeys it. Ten failed attempts
// fall back to a centered mid-range-area square.
inline Image random_resized_crop(const Image& src,
                                 std::pair<double, double> scale_range,
                                 int out_size, Rng& rng) {
  const auto [smin, smax] = scale_range;
  if (!(smin > 0 && smin <= smax && smax <= 1.0))
    throw param_error("random_resized_crop: scale range (" +
                      std::to_string(smin) + "," + std::to_string(smax) +
                      ") must satisfy 0 < min <= max <= 1");
  const double area = double(src.h) * src.w;
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = rng.uniform(smin, smax) * area;
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const int cw = int(std::lround(std::sqrt(target * aspect)));
    const int ch = int(std::lround(std::sqrt(target / aspect)));
    if (cw < 1 || ch < 1 || cw > src.w || ch > src.h) continue;
    const double frac = double(cw) * ch / area;
    if (frac < smin || frac > smax) continue;
    const int y0 = int(rng.randint(std::uint64_t(src.h - ch + 1)));
    const int x0 = int(rng.randint(std::uint64_t(src.w - cw + 1)));
    return resize_bilinear(crop(src, y0, x0, ch, cw), out_size, out_size);
  }
  const double mid = 0.5 * (smin + smax);
  int side = int(std::lround(std::sqrt(mid * area)));
  side = std::max(1, std::min(side, std::min(src.h, src.w)));
  const int y0 = (src.h - side) / 2, x0 = (src.w - side) / 2;
  return resize_bilinear(crop(src, y0, x0, side, side), out_size, out_size);
}

// ---------------------------------------------------------------------------
// photometric ops
// ---------------------------------------------------------------------------

inline void flip_horizontal(Image& img) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w / 2; ++x)
      for (int c = 0; c < 3; ++c)
        std::swap(img.at(y, x)[c], img.at(y, img.w - 1 - x)[c]);
}

inline void clamp01(Image& img) {
  for (auto& v : img.px) v = std::min(1.0f, std::max(0.0f, v));
}

inline float luminance(const float* p) {
  return 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
}

inline void to_grayscale(Image& img) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float* p = img.at(y, x);
      const float l = luminance(p);
      p[0] = p[1] = p[2] = l;
    }
}

inline void solarize(Image& img, float threshold) {
  for (auto& v : img.px)
    if (v > threshold) v = 1.0f - v;
}

namespace detail {

inline void rgb_to_hsv(const float* p, float& h, float& s, float& v) {
  const float mx = std::max({p[0], p[1], p[2]});
  const float mn = std::min({p[0], p[1], p[2]});
  const float d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0f;
  if (d == 0) {
    h = 0;
    return;
  }
  if (mx == p[0])
    h = std::fmod((p[1] - p[2]) / d, 6.0f);
  else if (mx == p[1])
    h = (p[2] - p[0]) / d + 2.0f;
  else
    h = (p[0] - p[1]) / d + 4.0f;
  h /= 6.0f;
  if (h < 0) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float* p) {
  const float hh = std::fmod(h, 1.0f) * 6.0f;
  const int i = int(hh) % 6;
  const float f = hh - std::floor(hh);
  const float a = v * (1 - s), b = v * (1 - s * f), c = v * (1 - s * (1 - f));
  switch (i) {
    case 0: p[0] = v; p[1] = c; p[2] = a; break;
    case 1: p[0] = b; p[1] = v; p[2] = a; break;
    case 2: p[0] = a; p[1] = v; p[2] = c; break;
    case 3: p[0] = a; p[1] = b; p[2] = v; break;
    case 4: p[0] = c; p[1] = a; p[2] = v; break;
    default: p[0] = v; p[1] = a; p[2] = b; break;
  }
}

}  // namespace detail

inline void shift_hue(Image& img, float delta) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float* p = img.at(y, x);
      float h, s, v;
      detail::rgb_to_hsv(p, h, s, v);
      detail::hsv_to_rgb(h + delta + 1.0f, s, v, p);
    }
}

// brightness/contrast/saturation multiply toward their neutral anchors,
// hue rotates in HSV; applied in that fixed order, then clamped
inline void color_jitter(Image& img, float brightness, float contrast,
                         float saturation, float hue, Rng& rng) {
  const float fb = rng.uniform_f(std::max(0.0f, 1 - brightness), 1 + brightness);
  const float fc = rng.uniform_f(std::max(0.0f, 1 - contrast), 1 + contrast);
  const float fs = rng.uniform_f(std::max(0.0f, 1 - saturation), 1 + saturation);
  const float fh = rng.uniform_f(-hue, hue);

  for (auto& v : img.px) v *= fb;
  double lum_sum = 0;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) lum_sum += luminance(img.at(y, x));
  const float anchor = float(lum_sum / (double(img.h) * img.w));
  for (auto& v : img.px) v = anchor + fc * (v - anchor);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float* p = img.at(y, x);
      const float l = luminance(p);
      for (int c = 0; c < 3; ++c) p[c] = l + fs * (p[c] - l);
    }
  clamp01(img);
  if (fh != 0.0f) shift_hue(img, fh);
  clamp01(img);
}

// separable gaussian, kernel radius ceil(3*sigma), replicated borders
inline void gaussian_blur(Image& img, float sigma) {
  if (sigma <= 0) return;
  const int r = int(std::ceil(3.0f * sigma));
  std::vector<float> k((std::size_t)2 * r + 1);
  float sum = 0;
  for (int i = -r; i <= r; ++i) {
    k[(std::size_t)(i + r)] = std::exp(-0.5f * float(i) * i / (sigma * sigma));
    sum += k[(std::size_t)(i + r)];
  }
  for (auto& v : k) v /= sum;

  Image tmp = img;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float acc[3] = {0, 0, 0};
      for (int i = -r; i <= r; ++i) {
        const int xx = std::min(img.w - 1, std::max(0, x + i));
        const float* p = img.at(y, xx);
        for (int c = 0; c < 3; ++c) acc[c] += k[(std::size_t)(i + r)] * p[c];
      }
      float* o = tmp.at(y, x);
      for (int c = 0; c < 3; ++c) o[c] = acc[c];
    }
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      float acc[3] = {0, 0, 0};
      for (int i = -r; i <= r; ++i) {
        const int yy = std::min(img.h - 1, std::max(0, y + i));
        const float* p = tmp.at(yy, x);
        for (int c = 0; c < 3; ++c) acc[c] += k[(std::size_t)(i + r)] * p[c];
      }
      float* o = img.at(y, x);
      for (int c = 0; c < 3; ++c) o[c] = acc[c];
    }
}

// ---------------------------------------------------------------------------
// the augmentation chain
// ---------------------------------------------------------------------------

struct AugmentPolicy {
  double flip_p = 0.5;
  double jitter_p = 0.8;
  float jitter_brightness = 0.4f, jitter_contrast = 0.4f,
        jitter_saturation = 0.4f, jitter_hue = 0.1f;
  double grayscale_p = 0.2;
  double blur_p = 1.0;
  float blur_sigma_lo = 0.1f, blur_sigma_hi = 2.0f;
  double solarize_p = 0.0;
  float solarize_threshold = 0.5f;
};

// flip, jitter, grayscale, blur, solarize — in that order
inline void augment(Image& img, const AugmentPolicy& pol, Rng& rng) {
  if (rng.bernoulli(pol.flip_p)) flip_horizontal(img);
  if (rng.bernoulli(pol.jitter_p))
    color_jitter(img, pol.jitter_brightness, pol.jitter_contrast,
                 pol.jitter_saturation, pol.jitter_hue, rng);
  if (rng.bernoulli(pol.grayscale_p)) to_grayscale(img);
  if (rng.bernoulli(pol.blur_p))
    gaussian_blur(img, rng.uniform_f(pol.blur_sigma_lo, pol.blur_sigma_hi));
  if (rng.bernoulli(pol.solarize_p)) solarize(img, pol.solarize_threshold);
  clamp01(img);
}

// ---------------------------------------------------------------------------
// multi-crop view generation
// ---------------------------------------------------------------------------

struct ViewConfig {
  int n_global = 2;
  int n_local = 8;
  std::pair<double, double> global_scale{0.7, 1.0};
  std::pair<double, double> local_scale{0.2, 0.5};
  int global_out = 32;
  int local_out = 16;
  AugmentPolicy base;          // shared rates; blur/solarize split below
  double blur_p_global1 = 1.0, blur_p_global2 = 0.1, blur_p_local = 0.5;
  double solarize_p_global2 = 0.2;

  void validate() const {
    if (n_global != 2)
      throw param_error("views: exactly 2 global views are supported");
    if (n_local < 1) throw param_error("views: need at least 1 local view");
    auto check_range = [](std::pair<double, double> r, const char* name) {
      if (!(r.first > 0 && r.first < r.second && r.second <= 1.0))
        throw param_error(std::string("views: ") + name +
                          " scale range must satisfy 0 < min < max <= 1");
    };
    check_range(global_scale, "global");
    check_range(local_scale, "local");
    if (global_out != 2 * local_out)
      throw param_error(
          "views: local/global view area must be 1:4 (global side " +
          std::to_string(global_out) + " vs local side " +
          std::to_string(local_out) + ")");
    if (local_out < 1) throw param_error("views: output sizes must be positive");
  }
};

inline ViewConfig cifar_views() { return ViewConfig{}; }

inline ViewConfig tiny_imagenet_views() {
  ViewConfig v;
  v.global_scale = {0.5, 1.0};
  v.local_scale = {0.2, 0.4};
  v.global_out = 64;
  v.local_out = 32;
  return v;
}

struct ViewBatch {
  std::vector<Image> globals, locals;
  int source_id = 0;
};

inline ViewBatch generate_views(const Image& src, const ViewConfig& cfg,
                                Rng& rng, int source_id = 0) {
  cfg.validate();
  ViewBatch out;
  out.source_id = source_id;
  for (int g = 0; g < cfg.n_global; ++g) {
    Image v = random_resized_crop(src, cfg.global_scale, cfg.global_out, rng);
    AugmentPolicy pol = cfg.base;
    pol.blur_p = g == 0 ? cfg.blur_p_global1 : cfg.blur_p_global2;
    pol.solarize_p = g == 0 ? 0.0 : cfg.solarize_p_global2;
    augment(v, pol, rng);
    out.globals.push_back(std::move(v));
  }
  for (int l = 0; l < cfg.n_local; ++l) {
    Image v = random_resized_crop(src, cfg.local_scale, cfg.local_out, rng);
    AugmentPolicy pol = cfg.base;
    pol.blur_p = cfg.blur_p_local;
    pol.solarize_p = 0.0;
    augment(v, pol, rng);
    out.locals.push_back(std::move(v));
  }
  return out;
}

}  // namespace svt
