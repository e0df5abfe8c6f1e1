#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "svt/checkpoint.hpp"
#include "svt/data.hpp"
#include "svt/ops.hpp"
#include "svt/optim.hpp"
#include "svt/views.hpp"
#include "svt/vit.hpp"

namespace svt {

// ---------------------------------------------------------------------------
// projection head: in -> hidden -> hidden -> bottleneck (GELU between),
// unit-normalized bottleneck, then a bias-free map to k outputs
// ---------------------------------------------------------------------------

template <class T>
struct ProjHead {
  int in_dim = 0, hidden = 1024, bottleneck = 256, k = 1024;
  Tensor<T> w1, b1, w2, b2, w3, b3, w_out;

  Params<T> params() {
    return {{"fc1.w", w1}, {"fc1.b", b1}, {"fc2.w", w2},   {"fc2.b", b2},
            {"fc3.w", w3}, {"fc3.b", b3}, {"out.w", w_out}};
  }
};

template <class T>
ProjHead<T> make_head(int in_dim, int hidden, int bottleneck, int k,
                      Rng& rng) {
  if (in_dim < 1 || hidden < 1 || bottleneck < 1 || k < 2)
    throw param_error("projection head: dimensions must be positive, k >= 2");
  ProjHead<T> h;
  h.in_dim = in_dim;
  h.hidden = hidden;
  h.bottleneck = bottleneck;
  h.k = k;
  auto draw = [&](Shape s) {
    auto t = make_tensor<T>(std::move(s), true);
    for (auto& v : t->data) v = T(rng.trunc_normal(0.02));
    return t;
  };
  auto zeros = [&](Shape s) { return make_tensor<T>(std::move(s), true); };
  h.w1 = draw({hidden, in_dim});
  h.b1 = zeros({hidden});
  h.w2 = draw({hidden, hidden});
  h.b2 = zeros({hidden});
  h.w3 = draw({bottleneck, hidden});
  h.b3 = zeros({bottleneck});
  h.w_out = draw({k, bottleneck});
  return h;
}

template <class T>
Tensor<T> head_forward(ProjHead<T>& h, const Tensor<T>& x) {
  auto z = linear(gelu(linear(gelu(linear(x, h.w1, h.b1)), h.w2, h.b2)),
                  h.w3, h.b3);
  return linear(l2_normalize(z), h.w_out);
}

// ---------------------------------------------------------------------------
// distributions
// ---------------------------------------------------------------------------

// softmax((logits - center) / tau_t), produced gradient-free
template <class T>
Tensor<T> teacher_distribution(const Tensor<T>& logits, const Tensor<T>& center,
                               T tau_t) {
  if (tau_t <= T(0))
    throw param_error("teacher temperature must be > 0, got " +
                      std::to_string(double(tau_t)));
  if (logits->shape.size() != 2 || center->shape != Shape{logits->shape[1]})
    throw shape_error("teacher_distribution: logits " +
                      shape_str(logits->shape) + " vs center " +
                      shape_str(center->shape));
  NoGrad<T> ng;
  return softmax(add_rows(logits, scale(center, T(-1))), 1, tau_t);
}

template <class T>
Tensor<T> student_log_distribution(const Tensor<T>& logits, T tau_s) {
  return log_softmax(logits, tau_s);
}

// Symmetrized view-prediction loss: every teacher global paired with every
// student view except itself (2*(1+n_local) pairs), mean of the pair terms.
// literal=true keeps only the first teacher global's pairs, as Eq. 1 prints.
template <class T>
Tensor<T> distill_loss(const std::vector<Tensor<T>>& teacher_globals,
                       const std::vector<Tensor<T>>& student_globals,
                       const std::vector<Tensor<T>>& student_locals,
                       bool literal = false) {
  if (teacher_globals.size() != 2 || student_globals.size() != 2)
    throw validation_error("distill_loss: want 2 teacher and 2 student "
                           "globals, got " +
                           std::to_string(teacher_globals.size()) + "/" +
                           std::to_string(student_globals.size()));
  if (student_locals.empty())
    throw validation_error("distill_loss: no local views");
  const Shape& s = teacher_globals[0]->shape;
  for (const auto& list : {teacher_globals, student_globals, student_locals})
    for (const auto& t : list)
      if (t->shape != s)
        throw validation_error("distill_loss: mixed shapes " + shape_str(s) +
                               " vs " + shape_str(t->shape));

  Tensor<T> total;
  int pairs = 0;
  const std::size_t n_teacher = literal ? 1 : 2;
  for (std::size_t g = 0; g < n_teacher; ++g) {
    for (std::size_t v = 0; v < student_globals.size(); ++v) {
      if (v == g) continue;
      auto term = soft_cross_entropy_logprobs(teacher_globals[g],
                                              student_globals[v]);
      total = total ? add(total, term) : term;
      ++pairs;
    }
    for (const auto& local : student_locals) {
      auto term = soft_cross_entropy_logprobs(teacher_globals[g], local);
      total = total ? add(total, term) : term;
      ++pairs;
    }
  }
  return scale(total, T(1) / T(pairs));
}

// center' = m*center + (1-m)*rowmean(logits); logits stack all global views
template <class T>
void update_center(Tensor<T>& center, const Tensor<T>& teacher_logits, T m) {
  if (m < T(0) || m >= T(1))
    throw param_error("center momentum must lie in [0,1), got " +
                      std::to_string(double(m)));
  if (teacher_logits->shape.size() != 2 ||
      center->shape != Shape{teacher_logits->shape[1]})
    throw shape_error("update_center: logits " +
                      shape_str(teacher_logits->shape) + " vs center " +
                      shape_str(center->shape));
  const int B = teacher_logits->shape[0], K = teacher_logits->shape[1];
  for (int j = 0; j < K; ++j) {
    T mean = 0;
    for (int i = 0; i < B; ++i)
      mean += teacher_logits->data[(std::size_t)i * K + j];
    mean /= T(B);
    center->data[(std::size_t)j] =
        m * center->data[(std::size_t)j] + (T(1) - m) * mean;
  }
}

// theta_t <- lambda*theta_t + (1-lambda)*theta_s, applied tensorwise
template <class T>
void ema_update(Params<T>& teacher, const Params<T>& student, T lambda) {
  if (lambda < T(0) || lambda > T(1))
    throw param_error("ema lambda must lie in [0,1], got " +
                      std::to_string(double(lambda)));
  if (teacher.size() != student.size())
    throw shape_error("ema_update: " + std::to_string(teacher.size()) +
                      " teacher tensors vs " + std::to_string(student.size()));
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto& t = teacher[i].t;
    const auto& st = student[i].t;
    if (t->shape != st->shape)
      throw shape_error("ema_update: '" + teacher[i].name + "' is " +
                        shape_str(t->shape) + " vs student " +
                        shape_str(st->shape));
    if constexpr (std::is_same_v<T, float>)
      kern::active().axpby(t->size(), T(1) - lambda, st->ptr(), lambda,
                           t->ptr());
    else
      kern::ref::axpby(t->size(), T(1) - lambda, st->ptr(), lambda, t->ptr());
  }
}

template <class T>
T mean_row_entropy(const Tensor<T>& probs) {
  const int B = probs->shape[0], K = probs->shape[1];
  double h = 0;
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < K; ++j) {
      const double p = probs->data[(std::size_t)i * K + j];
      if (p > 0) h -= p * std::log(p);
    }
  return T(h / B);
}

// ---------------------------------------------------------------------------
// stage-1 training loop
// ---------------------------------------------------------------------------

struct DistillConfig {
  int epochs = 100;
  int batch = 64;
  int warmup_epochs = 10;
  double base_lr_per_256 = 0.0005;
  double weight_decay = 0.04;
  double tau_s = 0.1;
  double tau_t_lo = 0.04, tau_t_hi = 0.07;
  int tau_t_warmup_epochs = 30;
  int k_dim = 1024;
  int head_hidden = 1024;
  int head_bottleneck = 256;
  double center_momentum = 0.9;
  double ema_lo = 0.996;
  double grad_clip = 0.0;      // 0 disables
  int checkpoint_every = 0;    // epochs between periodic checkpoints; 0 = off
  bool symmetrized = true;

  void validate() const {
    if (epochs < 0 || batch < 1) throw param_error("distill: bad epoch/batch");
    if (tau_s <= 0 || tau_t_lo <= 0 || tau_t_hi <= 0)
      throw param_error("distill: temperatures must be > 0");
    if (epochs > 0 && warmup_epochs >= epochs)
      throw param_error("distill: warmup epochs " +
                        std::to_string(warmup_epochs) +
                        " must be < total epochs " + std::to_string(epochs));
    if (k_dim < 2 || head_hidden < 1 || head_bottleneck < 1)
      throw param_error("distill: bad head dimensions");
    if (center_momentum < 0 || center_momentum >= 1)
      throw param_error("distill: center momentum must lie in [0,1)");
    if (ema_lo < 0 || ema_lo > 1)
      throw param_error("distill: ema floor must lie in [0,1]");
  }
};

struct DistillMetrics {
  int epoch = 0;
  double loss = 0, teacher_entropy = 0, lr = 0, lambda = 0, tau_t = 0;
  bool collapse_warning = false;
};

inline void write_distill_csv(const std::string& path,
                              const std::vector<DistillMetrics>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f << "epoch,loss,teacher_entropy,lr,lambda,tau_t,collapse_warning\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g,%.8g,%.8g,%d\n", r.epoch,
                  r.loss, r.teacher_entropy, r.lr, r.lambda, r.tau_t,
                  int(r.collapse_warning));
    f << buf;
  }
}

template <class T>
struct DistillState {
  ViT<T> student, teacher;
  ProjHead<T> student_head, teacher_head;
  Tensor<T> center;
  std::vector<DistillMetrics> metrics;

  Params<T> student_params() {
    auto ps = student.params();
    for (auto& p : student_head.params())
      ps.push_back({"head." + p.name, p.t});
    return ps;
  }
  Params<T> teacher_params() {
    auto ps = teacher.params();
    for (auto& p : teacher_head.params())
      ps.push_back({"head." + p.name, p.t});
    return ps;
  }
};

namespace detail {

// stack view images (already in [0,1]) into a normalized [N,S,S,3] batch
inline Tensor<float> stack_views(const std::vector<const Image*>& views,
                                 const std::array<float, 3>& mean,
                                 const std::array<float, 3>& stdev) {
  const int N = int(views.size()), S = views[0]->h;
  auto t = make_tensor<float>({N, S, S, 3});
  for (int i = 0; i < N; ++i) {
    const auto& px = views[(std::size_t)i]->px;
    float* dst = t->ptr() + (std::size_t)i * px.size();
    for (std::size_t j = 0; j < px.size(); ++j) {
      const int c = int(j % 3);
      dst[j] = (px[j] - mean[c]) / stdev[c];
    }
  }
  return t;
}

}  // namespace detail

// snapshot the full stage-1 state as a checkpoint
template <class T>
Checkpoint distill_checkpoint(DistillState<T>& st, const std::string& meta) {
  static_assert(std::is_same_v<T, float>, "checkpoints are f32");
  Params<T> all;
  for (auto& p : st.student.params()) all.push_back({"student." + p.name, p.t});
  for (auto& p : st.student_head.params())
    all.push_back({"student.head." + p.name, p.t});
  for (auto& p : st.teacher.params()) all.push_back({"teacher." + p.name, p.t});
  for (auto& p : st.teacher_head.params())
    all.push_back({"teacher.head." + p.name, p.t});
  all.push_back({"center", st.center});
  return checkpoint_from(all, meta);
}

// Stage 1: per step, views per image -> teacher processes globals only,
// student processes all views; loss, student Adam step, EMA teacher update,
// center update, in that order. Schedules: lr and lambda per step, tau_t
// per epoch. Returns full state; writes nothing (callers persist).
template <class T>
DistillState<T> pretrain(const Dataset& data, const ViTConfig& vit_cfg,
                         const DistillConfig& cfg, const ViewConfig& views,
                         std::uint64_t seed,
                         const std::function<void(const DistillMetrics&)>&
                             on_epoch = nullptr) {
  static_assert(std::is_same_v<T, float>, "training runs at f32");
  cfg.validate();
  views.validate();
  vit_cfg.validate();
  if (data.train.empty()) throw validation_error("pretrain: empty train split");

  Rng root(seed);
  Rng init_rng = root.derive(1);
  DistillState<T> st;
  st.student = make_vit<T>(vit_cfg, Init::trunc_normal, init_rng);
  st.student_head = make_head<T>(vit_cfg.dim, cfg.head_hidden,
                                 cfg.head_bottleneck, cfg.k_dim, init_rng);
  // teacher starts as an exact copy and never sees gradients
  Rng teacher_rng = root.derive(1);
  st.teacher = make_vit<T>(vit_cfg, Init::trunc_normal, teacher_rng);
  st.teacher_head = make_head<T>(vit_cfg.dim, cfg.head_hidden,
                                 cfg.head_bottleneck, cfg.k_dim, teacher_rng);
  for (auto& p : st.teacher_params()) p.t->requires_grad = false;
  st.center = make_tensor<T>({cfg.k_dim});

  if (cfg.epochs == 0) return st;

  const int B = std::min<int>(cfg.batch, int(data.train.size()));
  const long steps_per_epoch = long(data.train.size()) / B;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const double peak_lr = lr_for_batch(cfg.batch, cfg.base_lr_per_256);
  auto lr_sched = Schedule::warmup_cosine(0.0, peak_lr, 1e-6,
                                          cfg.warmup_epochs * steps_per_epoch,
                                          total_steps);
  auto lambda_sched = Schedule::cosine(cfg.ema_lo, 1.0, total_steps);
  auto tau_sched = Schedule::linear_warmup(
      cfg.tau_t_lo, cfg.tau_t_hi,
      std::min(cfg.tau_t_warmup_epochs, cfg.epochs), cfg.epochs);

  auto params = st.student_params();
  auto teacher = st.teacher_params();
  auto opt = OptimizerState<T>::init(params, peak_lr, cfg.weight_decay);

  std::vector<int> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);

  const double collapse_floor = 0.1 * std::log(double(cfg.k_dim));
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = root.derive(1000 + std::uint64_t(epoch));
    shuffle(order, shuffle_rng);
    const double tau_epoch = tau_sched.value(epoch);
    const T tau_t = T(tau_epoch);

    double loss_sum = 0, entropy_sum = 0;
    DistillMetrics row;
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      const double lr = lr_sched.value(step);
      const T lambda = T(lambda_sched.value(step));

      // per-sample derived streams: worker layout can never change views
      std::vector<ViewBatch> batches;
      batches.reserve((std::size_t)B);
      for (int i = 0; i < B; ++i) {
        const int idx = order[(std::size_t)(s * B + i)];
        Rng vr = root.derive(0x5eed0000u + std::uint64_t(epoch) * 1000003u +
                             std::uint64_t(idx));
        batches.push_back(generate_views(image_from(data.train[(std::size_t)idx].image,
                                                    data.image_size),
                                         views, vr, idx));
      }

      // view-major stacking: rows [g*B + i] hold global g of image i
      std::vector<const Image*> gviews, lviews;
      for (int g = 0; g < views.n_global; ++g)
        for (int i = 0; i < B; ++i) gviews.push_back(&batches[(std::size_t)i].globals[(std::size_t)g]);
      for (int l = 0; l < views.n_local; ++l)
        for (int i = 0; i < B; ++i) lviews.push_back(&batches[(std::size_t)i].locals[(std::size_t)l]);
      auto g_batch = detail::stack_views(gviews, data.mean, data.stdev);
      auto l_batch = detail::stack_views(lviews, data.mean, data.stdev);

      // teacher: globals only, gradient-free
      Tensor<T> t_logits;
      std::vector<Tensor<T>> t_dists;
      {
        NoGrad<T> ng;
        auto cls = svt::forward(st.teacher, g_batch).cls;
        t_logits = head_forward(st.teacher_head, cls);
        for (int g = 0; g < views.n_global; ++g)
          t_dists.push_back(teacher_distribution(
              slice(t_logits, 0, g * B, B), st.center, tau_t));
      }

      // student: all views
      auto s_g_logits = head_forward(st.student_head,
                                     svt::forward(st.student, g_batch).cls);
      auto s_l_logits = head_forward(st.student_head,
                                     svt::forward(st.student, l_batch).cls);
      std::vector<Tensor<T>> s_globals, s_locals;
      for (int g = 0; g < views.n_global; ++g)
        s_globals.push_back(student_log_distribution(
            slice(s_g_logits, 0, g * B, B), T(cfg.tau_s)));
      for (int l = 0; l < views.n_local; ++l)
        s_locals.push_back(student_log_distribution(
            slice(s_l_logits, 0, l * B, B), T(cfg.tau_s)));

      auto loss = distill_loss(t_dists, s_globals, s_locals, !cfg.symmetrized);
      const double loss_v = double(loss->data[0]);
      if (!std::isfinite(loss_v))
        throw std::runtime_error(
            "numeric error: non-finite pretrain loss at epoch " +
            std::to_string(epoch) + " step " + std::to_string(s));

      zero_grad(params);
      backward(loss);
      if (cfg.grad_clip > 0) clip_grad_norm(params, T(cfg.grad_clip));
      adam_step(params, opt, lr, cfg.weight_decay);
      ema_update(teacher, params, lambda);
      update_center(st.center, t_logits, T(cfg.center_momentum));

      loss_sum += loss_v;
      for (auto& d : t_dists) entropy_sum += double(mean_row_entropy(d));
      row.lr = lr;
      row.lambda = double(lambda);
    }

    row.epoch = epoch;
    row.loss = loss_sum / double(steps_per_epoch);
    row.teacher_entropy =
        entropy_sum / double(steps_per_epoch * views.n_global);
    row.tau_t = tau_epoch;
    row.collapse_warning = row.teacher_entropy < collapse_floor;
    st.metrics.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return st;
}

}  // namespace svt
