#include "svt/kernels.hpp"
#include "svt/kernels_ref.hpp"

namespace svt::kern {

const Kernels& scalar_table() {
  static const Kernels k = {
      "scalar",
      &ref::gemm<float>,
      &ref::add<float>,
      &ref::sub<float>,
      &ref::mul<float>,
      &ref::axpby<float>,
      &ref::dot<float>,
      &ref::sum<float>,
      &ref::max<float>,
      &ref::all_finite<float>,
      &ref::vexp<float>,
      &ref::gelu<float>,
      &ref::gelu_grad<float>,
      &ref::softmax_row<float>,
      &ref::adam<float>,
  };
  return k;
}

}  // namespace svt::kern
