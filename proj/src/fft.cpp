#include "fft.hpp"

#include <cstring>
#include <mutex>
#include <new>

#include <fftw3.h>

namespace reconfair::detail {

namespace {

// FFTW planning is not thread-safe; execution is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct Buffer {
  explicit Buffer(std::size_t n)
      : ptr(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n))) {
    if (!ptr) throw std::bad_alloc();
  }
  ~Buffer() { fftw_free(ptr); }
  Buffer(const Buffer&) = delete;
  Buffer& operator=(const Buffer&) = delete;
  fftw_complex* ptr;
};

void run(std::complex<double>* data, int rank, const int* dims, std::size_t n, bool inverse) {
  // Buffers from fftw_malloc have fixed alignment, so the chosen codelets
  // (and therefore the bits of the result) do not vary between runs.
  Buffer buf(n);
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft(rank, dims, buf.ptr, buf.ptr, inverse ? FFTW_BACKWARD : FFTW_FORWARD,
                         FFTW_ESTIMATE);
  }
  std::memcpy(buf.ptr, data, sizeof(fftw_complex) * n);
  fftw_execute(plan);
  std::memcpy(static_cast<void*>(data), buf.ptr, sizeof(fftw_complex) * n);
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(plan);
}

}  // namespace

void fft2d(ComplexGrid& grid, bool inverse) {
  if (grid.empty()) return;
  const int dims[2] = {static_cast<int>(grid.rows()), static_cast<int>(grid.cols())};
  run(grid.values().data(), 2, dims, grid.size(), inverse);
}

void fft1d(std::vector<std::complex<double>>& data, bool inverse) {
  if (data.empty()) return;
  const int dims[1] = {static_cast<int>(data.size())};
  run(data.data(), 1, dims, data.size(), inverse);
}

}  // namespace reconfair::detail
