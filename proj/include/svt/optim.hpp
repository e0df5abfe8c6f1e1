#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "svt/tensor.hpp"

namespace svt {

// named learnable tensor; names are the checkpoint/lookup keys
template <class T>
struct Param {
  std::string name;
  Tensor<T> t;
};

template <class T>
using Params = std::vector<Param<T>>;

template <class T>
void zero_grad(Params<T>& params) {
  for (auto& p : params) p.t->grad.clear();
}

template <class T>
struct OptimizerState {
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Slot> slots;  // index-aligned with the params list
  long step = 0;
  double base_lr = 0.0;
  double weight_decay = 0.0;

  static OptimizerState init(const Params<T>& params, double base_lr,
                             double weight_decay) {
    OptimizerState s;
    s.base_lr = base_lr;
    s.weight_decay = weight_decay;
    s.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      s.slots[i].m.assign(params[i].t->size(), T(0));
      s.slots[i].v.assign(params[i].t->size(), T(0));
    }
    return s;
  }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// Bias-corrected Adam with decoupled weight decay:
//   p <- p - lr * (mhat / (sqrt(vhat) + eps) + wd * p)
// A missing grad buffer counts as a zero gradient (moments still decay and
// weight decay still applies). Non-finite gradients abort, naming the
// parameter. state.step advances by exactly 1 per call.
template <class T>
void adam_step(Params<T>& params, OptimizerState<T>& state, double lr,
               double weight_decay) {
  if (params.size() != state.slots.size())
    throw usage_error("adam_step: optimizer state holds " +
                      std::to_string(state.slots.size()) +
                      " slots for " + std::to_string(params.size()) +
                      " parameters");
  state.step += 1;
  const double bc1 = 1.0 / (1.0 - std::pow(kAdamBeta1, state.step));
  const double bc2 = 1.0 / (1.0 - std::pow(kAdamBeta2, state.step));
  static const std::vector<T> kEmpty;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& slot = state.slots[i];
    if (slot.m.size() != p.t->size())
      throw shape_error("adam_step: moment buffers for parameter '" + p.name +
                        "' have stale size");
    const std::vector<T>* g = &p.t->grad;
    std::vector<T> zeros;
    if (g->empty()) {
      zeros.assign(p.t->size(), T(0));
      g = &zeros;
    } else {
      bool finite;
      if constexpr (std::is_same_v<T, float>)
        finite = kern::active().all_finite(g->size(), g->data());
      else
        finite = kern::ref::all_finite(g->size(), g->data());
      if (!finite)
        throw std::runtime_error(
            "numeric error: non-finite gradient in parameter '" + p.name +
            "'");
    }
    if constexpr (std::is_same_v<T, float>)
      kern::active().adam(p.t->size(), p.t->ptr(), g->data(), slot.m.data(),
                          slot.v.data(), static_cast<float>(lr),
                          static_cast<float>(kAdamBeta1),
                          static_cast<float>(kAdamBeta2),
                          static_cast<float>(kAdamEps),
                          static_cast<float>(weight_decay),
                          static_cast<float>(bc1), static_cast<float>(bc2));
    else
      kern::ref::adam(p.t->size(), p.t->ptr(), g->data(), slot.m.data(),
                      slot.v.data(), T(lr), T(kAdamBeta1), T(kAdamBeta2),
                      T(kAdamEps), T(weight_decay), T(bc1), T(bc2));
  }
}

// global-norm gradient clipping; no-op when the norm is under the cap
template <class T>
T clip_grad_norm(Params<T>& params, T max_norm) {
  if (max_norm <= T(0)) throw param_error("clip_grad_norm: cap must be > 0");
  double sq = 0;
  for (auto& p : params)
    for (auto g : p.t->grad) sq += double(g) * g;
  const T norm = T(std::sqrt(sq));
  if (norm > max_norm) {
    const T s = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.t->grad) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

struct Schedule {
  enum class Kind { constant, linear_warmup, cosine, warmup_cosine };
  Kind kind = Kind::constant;
  double start = 0.0;
  double peak = 0.0;
  double final_value = 0.0;
  long warmup_steps = 0;
  long total_steps = 0;

  static Schedule constant(double v, long total) {
    return {Kind::constant, v, v, v, 0, total};
  }
  static Schedule linear_warmup(double start, double peak, long warmup,
                                long total) {
    return {Kind::linear_warmup, start, peak, peak, warmup, total};
  }
  static Schedule cosine(double peak, double final_value, long total) {
    return {Kind::cosine, peak, peak, final_value, 0, total};
  }
  static Schedule warmup_cosine(double start, double peak, double final_value,
                                long warmup, long total) {
    return {Kind::warmup_cosine, start, peak, final_value, warmup, total};
  }

  // endpoints are exact: value(0)=start, value(warmup)=peak, value(total)=final
  double value(long step) const {
    if (step < 0 || step > total_steps)
      throw param_error("schedule: step " + std::to_string(step) +
                        " outside [0, " + std::to_string(total_steps) + "]");
    switch (kind) {
      case Kind::constant:
        return peak;
      case Kind::linear_warmup: {
        if (step >= warmup_steps || warmup_steps == 0) return peak;
        return start + (peak - start) * double(step) / double(warmup_steps);
      }
      case Kind::cosine:
        return cosine_part(step, 0, peak);
      case Kind::warmup_cosine: {
        if (step < warmup_steps)
          return start + (peak - start) * double(step) / double(warmup_steps);
        return cosine_part(step, warmup_steps, peak);
      }
    }
    return peak;
  }

 private:
  double cosine_part(long step, long from, double top) const {
    const long span = total_steps - from;
    if (step == from) return top;
    if (step >= total_steps || span <= 0) return final_value;
    const double u = double(step - from) / double(span);
    return final_value +
           (top - final_value) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * u));
  }
};

// lr scaling law used by the trainers: base 0.0005 per 256 samples per batch
inline double lr_for_batch(int batch_size, double base_per_256 = 0.0005) {
  return base_per_256 * double(batch_size) / 256.0;
}

}  // namespace svt
