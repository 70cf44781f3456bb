#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace bsm::detail {

// Every op allocates fresh buffers of up to a few MB. With glibc's defaults
// each of those is an mmap/munmap pair and every page faults on first touch,
// which costs more than the arithmetic at training sizes. Keeping freed
// memory in the heap lets later ops reuse it.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace bsm::detail
