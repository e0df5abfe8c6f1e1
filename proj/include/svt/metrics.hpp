#pragma once

#include <vector>

#include "svt/tensor.hpp"

namespace svt {

// ties resolve toward the lower class index
template <class T>
int argmax_row(const T* p, int k) {
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

// fraction of rows whose top logit hits the label
template <class T>
double top1(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits->shape.size() != 2)
    throw shape_error("top1: want [B,k] logits, got " +
                      shape_str(logits->shape));
  const int B = logits->shape[0], k = logits->shape[1];
  if (B == 0) throw validation_error("top1: empty evaluation set");
  if (int(labels.size()) != B)
    throw shape_error("top1: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(B) + " rows");
  long correct = 0;
  for (int i = 0; i < B; ++i)
    correct += argmax_row(logits->ptr() + std::size_t(i) * k, k) == labels[i];
  return double(correct) / B;
}

// unweighted mean of per-set error percentages
inline double mce(const std::vector<double>& per_set_error_pct) {
  if (per_set_error_pct.empty())
    throw validation_error("mce: no corruption sets");
  long double s = 0;
  for (double e : per_set_error_pct) s += (long double)e;
  return double(s / (long double)per_set_error_pct.size());
}

}  // namespace svt
