#pragma once

namespace ssf {

// Caps internal parallelism. Every kernel partitions work so that each output
// element is reduced in a fixed order; results do not depend on this value.
void set_thread_count(int threads);
int thread_count();

}  // namespace ssf
