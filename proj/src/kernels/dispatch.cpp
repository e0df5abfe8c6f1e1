#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

#include "svt/kernels.hpp"

namespace svt::kern {

const Kernels& scalar_table();
#if defined(SVT_X86)
const Kernels& avx2_table();
const Kernels& avx512_table();
#endif

namespace {

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
#if defined(SVT_X86)
    case Isa::avx2:
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    case Isa::avx512:
      return __builtin_cpu_supports("avx512f") &&
             __builtin_cpu_supports("avx512vl") &&
             __builtin_cpu_supports("avx512bw") &&
             __builtin_cpu_supports("avx512dq");
#endif
    default:
      return false;
  }
}

Isa pick_initial() {
  if (const char* env = std::getenv("SVT_ISA")) {
    for (Isa isa : {Isa::scalar, Isa::avx2, Isa::avx512}) {
      if (std::strcmp(env, isa_name(isa)) == 0) {
        if (!cpu_supports(isa))
          throw std::runtime_error(std::string("SVT_ISA=") + env +
                                   " requested but not supported by this CPU");
        return isa;
      }
    }
    throw std::runtime_error(std::string("unknown SVT_ISA value: ") + env);
  }
  if (cpu_supports(Isa::avx512)) return Isa::avx512;
  if (cpu_supports(Isa::avx2)) return Isa::avx2;
  return Isa::scalar;
}

Isa g_active = []() { return pick_initial(); }();

}  // namespace

const char* isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
    case Isa::avx512:
      return "avx512";
  }
  return "?";
}

bool isa_supported(Isa isa) { return cpu_supports(isa); }

const Kernels& table(Isa isa) {
  switch (isa) {
#if defined(SVT_X86)
    case Isa::avx2:
      return avx2_table();
    case Isa::avx512:
      return avx512_table();
#endif
    default:
      return scalar_table();
  }
}

const Kernels& active() { return table(g_active); }

Isa active_isa() { return g_active; }

void force_isa(Isa isa) {
  if (!cpu_supports(isa))
    throw std::runtime_error(std::string("ISA not supported on this CPU: ") +
                             isa_name(isa));
  g_active = isa;
}

}  // namespace svt::kern
