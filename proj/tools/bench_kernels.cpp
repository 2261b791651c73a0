#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "kgcg/kernels.hpp"
#include "kgcg/rng.hpp"

// Times the serial reference kernels against the OpenMP variants and checks
// that they agree bitwise (they share the inner reduction order).

using namespace kgcg;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::vector<float> random_matrix(size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> m(n);
  for (float& v : m) v = static_cast<float>(rng.uniform_signed(1.0));
  return m;
}

template <class Fn>
double time_best_of(int reps, Fn fn) {
  double best = 1e30;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now_ms();
    fn();
    best = std::min(best, now_ms() - t0);
  }
  return best;
}

struct Case {
  size_t m, k, n;
};

}  // namespace

int main() {
  std::printf("threads: %d\n", kernels::thread_count());
  std::printf("%22s %12s %12s %9s %8s\n", "case", "serial ms", "omp ms", "speedup", "equal");
  const Case cases[] = {{64, 64, 64},    {128, 128, 128},  {256, 256, 256},
                        {512, 512, 512}, {1024, 256, 256}, {256, 1024, 256}};
  bool all_equal = true;
  for (const Case& c : cases) {
    const auto a = random_matrix(c.m * c.k, 1);
    const auto b = random_matrix(c.k * c.n, 2);
    std::vector<float> out_serial(c.m * c.n), out_omp(c.m * c.n);
    const int reps = c.m * c.n * c.k > (size_t(1) << 24) ? 3 : 10;
    const double t_serial = time_best_of(reps, [&] {
      kernels::matmul_serial(a.data(), b.data(), out_serial.data(), c.m, c.k, c.n);
    });
    const double t_omp = time_best_of(reps, [&] {
      kernels::matmul_omp(a.data(), b.data(), out_omp.data(), c.m, c.k, c.n);
    });
    const bool equal =
        std::memcmp(out_serial.data(), out_omp.data(), out_serial.size() * sizeof(float)) == 0;
    all_equal = all_equal && equal;
    char label[64];
    std::snprintf(label, sizeof label, "%zux%zux%zu", c.m, c.k, c.n);
    std::printf("%22s %12.3f %12.3f %8.2fx %8s\n", label, t_serial, t_omp,
                t_omp > 0 ? t_serial / t_omp : 0.0, equal ? "yes" : "NO");
  }
  if (!all_equal) {
    std::printf("serial and parallel kernels disagree\n");
    return 1;
  }
  return 0;
}
