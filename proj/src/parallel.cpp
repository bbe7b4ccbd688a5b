#include "ssf/parallel.hpp"

#include <omp.h>

#include "ssf/errors.hpp"

namespace ssf {

void set_thread_count(int threads) {
  SSF_REQUIRE(threads >= 1, "thread count must be >= 1");
  omp_set_num_threads(threads);
}

int thread_count() { return omp_get_max_threads(); }

}  // namespace ssf
