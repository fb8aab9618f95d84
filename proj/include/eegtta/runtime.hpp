#pragma once

namespace eegtta {

// Keeps large tensor buffers on the heap instead of fresh mmap'd pages; the adaptation loop
// allocates and frees multi-megabyte buffers every step and page faults dominate otherwise.
// No-op on non-glibc platforms. Call once at startup.
void configure_allocator();

}  // namespace eegtta
