#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // Training allocates and frees many multi-megabyte buffers per step; keep
    // them on the heap instead of fresh zeroed pages.
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
    return surgecast::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
