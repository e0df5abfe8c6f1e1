#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "svt/kernels.hpp"
#include "svt/kernels_ref.hpp"

namespace svt {

// Error taxonomy: message prefixes are part of the contract and are matched
// by tests ("shape error", "parameter error", "validation error",
// "usage error", "io error").
inline std::runtime_error shape_error(const std::string& msg) {
  return std::runtime_error("shape error: " + msg);
}
inline std::runtime_error param_error(const std::string& msg) {
  return std::runtime_error("parameter error: " + msg);
}
inline std::runtime_error validation_error(const std::string& msg) {
  return std::runtime_error("validation error: " + msg);
}
inline std::runtime_error usage_error(const std::string& msg) {
  return std::runtime_error("usage error: " + msg);
}
inline std::runtime_error io_error(const std::string& msg) {
  return std::runtime_error("io error: " + msg);
}

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// When true, every op verifies its output is finite and throws otherwise.
// Off by default (it adds a full pass over each activation); trainers check
// the loss and parameters instead, tests flip it on.
inline bool& finite_checks() {
  static bool on = false;
  return on;
}

template <class T>
struct TensorT;

template <class T>
using Tensor = std::shared_ptr<TensorT<T>>;

template <class T>
struct TensorT {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty = not yet touched by backward (means zero)
  bool requires_grad = false;

  // set when the tensor is the output of a recorded differentiable op
  std::function<void()> backward_fn;

  std::size_t size() const { return data.size(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // allocate-and-zero on first touch
  std::vector<T>& grad_buf() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
Tensor<T> make_tensor(Shape shape, bool requires_grad = false) {
  auto t = std::make_shared<TensorT<T>>();
  t->shape = std::move(shape);
  t->data.assign(numel(t->shape), T(0));
  t->requires_grad = requires_grad;
  return t;
}

template <class T>
Tensor<T> make_tensor(Shape shape, std::vector<T> data,
                      bool requires_grad = false) {
  auto t = std::make_shared<TensorT<T>>();
  t->shape = std::move(shape);
  if (data.size() != numel(t->shape))
    throw shape_error("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(t->shape));
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

// Ordered record of differentiable op outputs, one per thread. Creation
// order is a topological order, so walking it backward visits each op once
// with all downstream contributions already accumulated.
template <class T>
struct Tape {
  std::vector<Tensor<T>> nodes;
  bool recording = true;

  static Tape& instance() {
    thread_local Tape tape;
    return tape;
  }

  void record(const Tensor<T>& t) { nodes.push_back(t); }
  void clear() { nodes.clear(); }
};

// Scoped "stop recording" guard (teacher forward, evaluation).
template <class T>
struct NoGrad {
  bool prev;
  NoGrad() : prev(Tape<T>::instance().recording) {
    Tape<T>::instance().recording = false;
  }
  ~NoGrad() { Tape<T>::instance().recording = prev; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

template <class T>
bool grad_enabled_for(const std::vector<Tensor<T>>& inputs) {
  if (!Tape<T>::instance().recording) return false;
  for (const auto& t : inputs)
    if (t && (t->requires_grad || t->backward_fn)) return true;
  return false;
}

// Registers `out` as produced by a differentiable op over `inputs` with the
// given backward closure. No-op when recording is off or nothing upstream
// needs gradients.
template <class T>
void record_op(const std::vector<Tensor<T>>& inputs, const Tensor<T>& out,
               std::function<void()> backward_fn) {
  if (finite_checks()) {
    bool ok;
    if constexpr (std::is_same_v<T, float>)
      ok = kern::active().all_finite(out->size(), out->ptr());
    else
      ok = kern::ref::all_finite(out->size(), out->ptr());
    if (!ok)
      throw std::runtime_error(
          "numeric error: non-finite value in op output " +
          shape_str(out->shape));
  }
  if (!grad_enabled_for(inputs)) return;
  out->backward_fn = std::move(backward_fn);
  Tape<T>::instance().record(out);
}

// Reverse-mode sweep from a scalar loss. Every requires_grad tensor that is
// reachable from `loss` receives its total derivative; the tape is cleared
// afterwards whether or not the sweep throws.
template <class T>
void backward(const Tensor<T>& loss) {
  auto& tape = Tape<T>::instance();
  if (loss->size() != 1) {
    tape.clear();
    throw usage_error("backward requires a scalar loss, got " +
                      shape_str(loss->shape));
  }
  loss->grad_buf()[0] = T(1);
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    auto& node = *it;
    if (!node->backward_fn) continue;
    if (!node->grad.empty()) node->backward_fn();
    node->backward_fn = nullptr;  // each op runs exactly once
  }
  tape.clear();
}

}  // namespace svt
