#include "kgcg/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kgcg::kernels {

namespace {
bool g_parallel = true;
}

bool parallel_enabled() {
#ifdef _OPENMP
  return g_parallel;
#else
  return false;
#endif
}

void set_parallel(bool on) { g_parallel = on; }

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace kgcg::kernels
