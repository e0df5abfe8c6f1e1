#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "svt/checkpoint.hpp"
#include "svt/data.hpp"
#include "svt/metrics.hpp"
#include "svt/ops.hpp"
#include "svt/optim.hpp"
#include "svt/views.hpp"
#include "svt/vit.hpp"

namespace svt {

// ---------------------------------------------------------------------------
// classifier head: one linear map token_dim -> k
// ---------------------------------------------------------------------------

template <class T>
struct Classifier {
  Tensor<T> w, b;

  Params<T> params() { return {{"head.w", w}, {"head.b", b}}; }
};

template <class T>
Classifier<T> make_classifier(int dim, int k, Rng& rng) {
  if (dim < 1 || k < 2)
    throw param_error("classifier: want dim >= 1 and k >= 2");
  Classifier<T> c;
  c.w = make_tensor<T>({k, dim}, true);
  for (auto& v : c.w->data) v = T(rng.trunc_normal(0.02));
  c.b = make_tensor<T>({k}, true);
  return c;
}

// ---------------------------------------------------------------------------
// initialization sources
// ---------------------------------------------------------------------------

enum class InitSource { ssl_teacher, ssl_student, uniform, xavier, trunc_normal };

inline InitSource parse_init_source(const std::string& s) {
  if (s == "self-supervised" || s == "self-supervised-teacher")
    return InitSource::ssl_teacher;
  if (s == "self-supervised-student") return InitSource::ssl_student;
  if (s == "uniform") return InitSource::uniform;
  if (s == "xavier") return InitSource::xavier;
  if (s == "truncated-normal" || s == "trunc-normal")
    return InitSource::trunc_normal;
  throw param_error("unknown init source '" + s + "'");
}

// copy backbone tensors out of a stage-1 checkpoint, bit for bit
template <class T>
void load_backbone(const Checkpoint& ck, ViT<T>& vit,
                   const std::string& source = "teacher") {
  if (source != "teacher" && source != "student")
    throw param_error("backbone source must be 'teacher' or 'student', got '" +
                      source + "'");
  auto ps = vit.params();
  load_into(ck, ps, source + ".");
}

// ---------------------------------------------------------------------------
// targets and batch surgery
// ---------------------------------------------------------------------------

// (1-eps)*onehot + eps/k
template <class T>
Tensor<T> smooth_labels(const std::vector<int>& labels, int k, T eps) {
  if (k < 2) throw param_error("smooth_labels: want k >= 2");
  if (eps < T(0) || eps >= T(1))
    throw param_error("label smoothing must lie in [0,1), got " +
                      std::to_string(double(eps)));
  auto y = make_tensor<T>({int(labels.size()), k});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw validation_error("smooth_labels: label " +
                             std::to_string(labels[i]) + " outside " +
                             std::to_string(k) + " classes");
    T* row = y->ptr() + i * k;
    for (int j = 0; j < k; ++j) row[j] = eps / T(k);
    row[labels[i]] = T(1) - eps + eps / T(k);
  }
  return y;
}

namespace detail {

// Beta(alpha, alpha) via Johnk's rejection; exact for any alpha > 0
inline double beta_symmetric(Rng& rng, double alpha) {
  if (alpha <= 0) throw param_error("mixing alpha must be > 0");
  for (int it = 0; it < 200; ++it) {
    const double u = std::pow(rng.uniform(), 1.0 / alpha);
    const double v = std::pow(rng.uniform(), 1.0 / alpha);
    if (u + v > 0.0 && u + v <= 1.0) return u / (u + v);
  }
  return 0.5;  // acceptance failing 200 times is numerically impossible
}

struct Box {
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;
};

// rectangle of area ratio (1-lambda), centered uniformly, clipped to the image
inline Box cut_box(int h, int w, double lambda, Rng& rng) {
  const double r = std::sqrt(1.0 - lambda);
  const int ch = int(h * r), cw = int(w * r);
  const int cy = int(rng.randint(std::uint64_t(h)));
  const int cx = int(rng.randint(std::uint64_t(w)));
  Box b;
  b.y0 = std::max(0, cy - ch / 2);
  b.y1 = std::min(h, cy + (ch + 1) / 2);
  b.x0 = std::max(0, cx - cw / 2);
  b.x1 = std::min(w, cx + (cw + 1) / 2);
  return b;
}

}  // namespace detail

// rows i <- lambda*row(i) + (1-lambda)*row(perm[i]), images and labels alike
template <class T>
void mixup_batch(Tensor<T>& x, Tensor<T>& y, const std::vector<int>& perm,
                 T lambda) {
  if (lambda < T(0) || lambda > T(1))
    throw param_error("mixup lambda must lie in [0,1]");
  const int B = x->shape.empty() ? 0 : x->shape[0];
  if (y->shape.size() != 2 || y->shape[0] != B || int(perm.size()) != B)
    throw shape_error("mixup_batch: batch sizes disagree");
  const std::vector<T> x0 = x->data, y0 = y->data;
  const std::size_t xs = x->size() / B, ys = (std::size_t)y->shape[1];
  for (int i = 0; i < B; ++i) {
    const int j = perm[(std::size_t)i];
    if (j < 0 || j >= B) throw param_error("mixup_batch: bad permutation");
    for (std::size_t e = 0; e < xs; ++e)
      x->data[i * xs + e] =
          lambda * x0[i * xs + e] + (T(1) - lambda) * x0[(std::size_t)j * xs + e];
    for (std::size_t e = 0; e < ys; ++e)
      y->data[i * ys + e] =
          lambda * y0[i * ys + e] + (T(1) - lambda) * y0[(std::size_t)j * ys + e];
  }
}

// paste one random box from row perm[i] into row i; labels are mixed with the
// exact replaced-pixel fraction. Returns that label weight lambda'.
template <class T>
double cutmix_batch(Tensor<T>& x, Tensor<T>& y, const std::vector<int>& perm,
                    double lambda, Rng& rng) {
  if (lambda < 0.0 || lambda > 1.0)
    throw param_error("cutmix lambda must lie in [0,1]");
  if (x->shape.size() != 4 || y->shape.size() != 2 ||
      x->shape[0] != y->shape[0] || int(perm.size()) != x->shape[0])
    throw shape_error("cutmix_batch: want [B,H,W,C] images and [B,k] labels");
  const int B = x->shape[0], H = x->shape[1], W = x->shape[2], C = x->shape[3];
  const auto box = detail::cut_box(H, W, lambda, rng);
  const long replaced = long(box.y1 - box.y0) * (box.x1 - box.x0);
  const double lambda_p = 1.0 - double(replaced) / (double(H) * W);

  const std::vector<T> x0 = x->data, y0 = y->data;
  const std::size_t xs = (std::size_t)H * W * C, ys = (std::size_t)y->shape[1];
  for (int i = 0; i < B; ++i) {
    const int j = perm[(std::size_t)i];
    if (j < 0 || j >= B) throw param_error("cutmix_batch: bad permutation");
    for (int yy = box.y0; yy < box.y1; ++yy) {
      const std::size_t off = ((std::size_t)yy * W + box.x0) * C;
      const std::size_t n = (std::size_t)(box.x1 - box.x0) * C;
      std::copy_n(x0.data() + (std::size_t)j * xs + off, n,
                  x->data.data() + (std::size_t)i * xs + off);
    }
    for (std::size_t e = 0; e < ys; ++e)
      y->data[i * ys + e] = T(lambda_p) * y0[i * ys + e] +
                            T(1.0 - lambda_p) * y0[(std::size_t)j * ys + e];
  }
  return lambda_p;
}

// with probability p, fill a box covering 2-33% of the pixels with noise
inline bool random_erase(Image& img, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0)
    throw param_error("erase probability must lie in [0,1]");
  if (rng.uniform() >= p) return false;
  const double area = double(img.h) * img.w;
  int eh = 0, ew = 0;
  for (int attempt = 0; attempt < 10 && eh == 0; ++attempt) {
    const double frac = 0.02 + rng.uniform() * (0.33 - 0.02);
    const double aspect =
        std::exp(std::log(0.3) + rng.uniform() * std::log(3.3 / 0.3));
    const int th = int(std::lround(std::sqrt(frac * area * aspect)));
    const int tw = int(std::lround(std::sqrt(frac * area / aspect)));
    if (th < 1 || tw < 1 || th > img.h || tw > img.w) continue;
    const double real = double(th) * tw / area;
    if (real < 0.02 || real > 0.33) continue;
    eh = th;
    ew = tw;
  }
  if (eh == 0) {  // fallback: square holding ~10% of the pixels
    eh = ew = std::max(1, int(std::lround(std::sqrt(0.1 * area))));
    eh = std::min(eh, img.h);
    ew = std::min(ew, img.w);
  }
  const int y0 = int(rng.randint(std::uint64_t(img.h - eh + 1)));
  const int x0 = int(rng.randint(std::uint64_t(img.w - ew + 1)));
  for (int y = y0; y < y0 + eh; ++y)
    for (int x = x0; x < x0 + ew; ++x) {
      float* px = img.at(y, x);
      for (int c = 0; c < 3; ++c) px[c] = float(rng.uniform());
    }
  return true;
}

// crop of the zero-padded image at offset (oy, ox), original size
inline Image pad_crop(const Image& src, int pad, int oy, int ox) {
  if (pad < 0 || oy < 0 || ox < 0 || oy > 2 * pad || ox > 2 * pad)
    throw param_error("pad_crop: offsets must lie in [0, 2*pad]");
  Image out{src.h, src.w, std::vector<float>(src.px.size(), 0.0f)};
  for (int y = 0; y < src.h; ++y) {
    const int sy = y + oy - pad;
    if (sy < 0 || sy >= src.h) continue;
    for (int x = 0; x < src.w; ++x) {
      const int sx = x + ox - pad;
      if (sx < 0 || sx >= src.w) continue;
      const float* s = src.at(sy, sx);
      float* d = out.at(y, x);
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];
    }
  }
  return out;
}

inline Image pad_crop_flip(const Image& src, int pad, Rng& rng) {
  const int oy = int(rng.randint(std::uint64_t(2 * pad + 1)));
  const int ox = int(rng.randint(std::uint64_t(2 * pad + 1)));
  Image out = pad_crop(src, pad, oy, ox);
  if (rng.uniform() < 0.5) flip_horizontal(out);
  return out;
}

// ---------------------------------------------------------------------------
// stage-2 training loop
// ---------------------------------------------------------------------------

struct FinetuneConfig {
  int epochs = 100;
  int batch = 256;
  double lr = 0.002;
  double weight_decay = 0.05;
  double label_smoothing = 0.1;
  double mixup_alpha = 0.8;
  double cutmix_alpha = 1.0;
  double mix_prob = 0.5;       // chance a batch gets mixup or cutmix
  double erase_prob = 0.25;
  bool augment = true;         // pad-crop-flip + random erasing
  int pad = 4;
  std::string init = "self-supervised-teacher";

  void validate() const {
    if (epochs < 0 || batch < 1) throw param_error("finetune: bad epoch/batch");
    if (lr <= 0) throw param_error("finetune: lr must be > 0");
    if (weight_decay < 0)
      throw param_error("finetune: weight decay must be >= 0");
    if (label_smoothing < 0 || label_smoothing >= 1)
      throw param_error("finetune: label smoothing must lie in [0,1)");
    if (mixup_alpha <= 0 || cutmix_alpha <= 0)
      throw param_error("finetune: mixing alphas must be > 0");
    if (mix_prob < 0 || mix_prob > 1 || erase_prob < 0 || erase_prob > 1)
      throw param_error("finetune: probabilities must lie in [0,1]");
    if (pad < 0) throw param_error("finetune: pad must be >= 0");
    parse_init_source(init);
  }
};

struct FinetuneMetrics {
  int epoch = 0;
  double train_loss = 0, test_top1 = 0, lr = 0;
};

inline void write_finetune_csv(const std::string& path,
                               const std::vector<FinetuneMetrics>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f << "epoch,train_loss,test_top1,lr\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g\n", r.epoch,
                  r.train_loss, r.test_top1, r.lr);
    f << buf;
  }
}

template <class T>
struct FinetuneResult {
  ViT<T> vit;
  Classifier<T> head;
  std::vector<FinetuneMetrics> metrics;
  double final_top1 = 0, best_top1 = 0;
  int best_epoch = -1;
  Checkpoint best;  // snapshot at the best test accuracy

  Params<T> params() {
    auto ps = vit.params();
    for (auto& p : head.params()) ps.push_back(p);
    return ps;
  }
};

// clean batched test-set pass
template <class T>
double evaluate_top1(ViT<T>& model, Classifier<T>& head,
                     const std::vector<Sample>& set,
                     const std::array<float, 3>& mean,
                     const std::array<float, 3>& stdev, int size,
                     int batch = 256) {
  if (set.empty()) throw validation_error("top1: empty evaluation set");
  NoGrad<T> ng;
  long correct = 0;
  std::vector<int> idx;
  for (std::size_t start = 0; start < set.size(); start += (std::size_t)batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(set.size(), start + batch); ++i)
      idx.push_back(int(i));
    auto x = make_batch(set, idx, size, mean, stdev);
    auto logits = linear(svt::forward(model, x).cls, head.w, head.b);
    const auto labels = labels_of(set, idx);
    correct += std::lround(top1(logits, labels) * double(idx.size()));
  }
  return double(correct) / double(set.size());
}

// Stage 2: transplant (or draw) a backbone, attach a fresh classifier, train
// with label smoothing and per-batch mixup/cutmix under a cosine lr schedule.
template <class T>
FinetuneResult<T> finetune(const Dataset& data, const ViTConfig& vit_cfg,
                           const FinetuneConfig& cfg, const Checkpoint* ssl,
                           std::uint64_t seed,
                           const std::function<void(const FinetuneMetrics&)>&
                               on_epoch = nullptr) {
  static_assert(std::is_same_v<T, float>, "training runs at f32");
  cfg.validate();
  vit_cfg.validate();
  if (data.train.empty()) throw validation_error("finetune: empty train split");
  if (data.test.empty()) throw validation_error("finetune: empty test split");
  if (data.classes < 2) throw validation_error("finetune: want >= 2 classes");

  Rng root(seed);
  Rng init_rng = root.derive(1);
  FinetuneResult<T> res;
  switch (parse_init_source(cfg.init)) {
    case InitSource::ssl_teacher:
    case InitSource::ssl_student: {
      if (!ssl)
        throw usage_error("finetune: init '" + cfg.init +
                          "' needs a stage-1 checkpoint");
      res.vit = make_vit<T>(vit_cfg);
      const bool teacher = parse_init_source(cfg.init) == InitSource::ssl_teacher;
      load_backbone(*ssl, res.vit, teacher ? "teacher" : "student");
      break;
    }
    case InitSource::uniform:
      res.vit = make_vit<T>(vit_cfg, Init::uniform, init_rng);
      break;
    case InitSource::xavier:
      res.vit = make_vit<T>(vit_cfg, Init::xavier, init_rng);
      break;
    case InitSource::trunc_normal:
      res.vit = make_vit<T>(vit_cfg, Init::trunc_normal, init_rng);
      break;
  }
  Rng head_rng = root.derive(2);
  res.head = make_classifier<T>(vit_cfg.dim, data.classes, head_rng);

  auto params = res.params();
  const int S = data.image_size;
  auto snapshot = [&](int epoch, double acc) {
    char meta[96];
    std::snprintf(meta, sizeof meta, "{\"epoch\":%d,\"test_top1\":%.6f}",
                  epoch, acc);
    return checkpoint_from(params, meta);
  };

  if (cfg.epochs == 0) {
    res.final_top1 = res.best_top1 =
        evaluate_top1(res.vit, res.head, data.test, data.mean, data.stdev, S);
    res.best = snapshot(-1, res.best_top1);
    return res;
  }

  const int B = std::min<int>(cfg.batch, int(data.train.size()));
  const long steps_per_epoch = long(data.train.size()) / B;
  const long total_steps = steps_per_epoch * cfg.epochs;
  auto lr_sched = Schedule::cosine(cfg.lr, 1e-6, total_steps);
  auto opt = OptimizerState<T>::init(params, cfg.lr, cfg.weight_decay);

  std::vector<int> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::vector<int> perm((std::size_t)B);

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = root.derive(2000 + std::uint64_t(epoch));
    shuffle(order, shuffle_rng);

    double loss_sum = 0, lr = 0;
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      lr = lr_sched.value(step);

      auto xb = make_tensor<T>({B, S, S, 3});
      std::vector<int> labels((std::size_t)B);
      for (int i = 0; i < B; ++i) {
        const int idx = order[(std::size_t)(s * B + i)];
        const Sample& smp = data.train[(std::size_t)idx];
        labels[(std::size_t)i] = smp.label;
        Image im = image_from(smp.image, S);
        if (cfg.augment) {
          Rng ar = root.derive(0xf17e0000u + std::uint64_t(epoch) * 1000003u +
                               std::uint64_t(idx));
          im = pad_crop_flip(im, cfg.pad, ar);
          random_erase(im, cfg.erase_prob, ar);
        }
        T* dst = xb->ptr() + (std::size_t)i * im.px.size();
        for (std::size_t e = 0; e < im.px.size(); ++e) {
          const int c = int(e % 3);
          dst[e] = (im.px[e] - data.mean[(std::size_t)c]) /
                   data.stdev[(std::size_t)c];
        }
      }
      auto yb = smooth_labels(labels, data.classes, T(cfg.label_smoothing));

      // one of {mixup, cutmix, none} per batch
      Rng mr = root.derive(0x313c0000u + std::uint64_t(epoch) * 1000003u +
                           std::uint64_t(s));
      if (mr.uniform() < cfg.mix_prob) {
        for (int i = 0; i < B; ++i) perm[(std::size_t)i] = i;
        shuffle(perm, mr);
        if (mr.uniform() < 0.5)
          mixup_batch(xb, yb, perm,
                      T(detail::beta_symmetric(mr, cfg.mixup_alpha)));
        else
          cutmix_batch(xb, yb, perm,
                       detail::beta_symmetric(mr, cfg.cutmix_alpha), mr);
      }

      auto logits = linear(svt::forward(res.vit, xb).cls, res.head.w,
                           res.head.b);
      auto loss = cross_entropy(logits, yb);
      const double loss_v = double(loss->data[0]);
      if (!std::isfinite(loss_v))
        throw std::runtime_error(
            "numeric error: non-finite finetune loss at epoch " +
            std::to_string(epoch) + " step " + std::to_string(s));

      zero_grad(params);
      backward(loss);
      adam_step(params, opt, lr, cfg.weight_decay);
      loss_sum += loss_v;
    }

    FinetuneMetrics row;
    row.epoch = epoch;
    row.train_loss = loss_sum / double(steps_per_epoch);
    row.test_top1 =
        evaluate_top1(res.vit, res.head, data.test, data.mean, data.stdev, S);
    row.lr = lr;
    res.metrics.push_back(row);
    if (row.test_top1 > res.best_top1 || res.best_epoch < 0) {
      res.best_top1 = row.test_top1;
      res.best_epoch = epoch;
      res.best = snapshot(epoch, row.test_top1);
    }
    if (on_epoch) on_epoch(row);
  }
  res.final_top1 = res.metrics.back().test_top1;
  return res;
}

}  // namespace svt
