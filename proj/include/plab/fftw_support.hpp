#pragma once

#include <fftw3.h>

#include <cstddef>
#include <mutex>
#include <new>
#include <utility>
#include <vector>

namespace plab {

/// FFTW planning is not thread-safe; every planner call takes this lock.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

template <class T>
class FftwBuffer {
 public:
  explicit FftwBuffer(std::size_t n) : size_(n) {
    data_ = static_cast<T*>(fftw_malloc(sizeof(T) * (n == 0 ? 1 : n)));
    if (!data_) throw std::bad_alloc();
  }
  ~FftwBuffer() { fftw_free(data_); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  FftwBuffer(FftwBuffer&& other) noexcept
      : data_(std::exchange(other.data_, nullptr)), size_(std::exchange(other.size_, 0)) {}

  T* data() { return data_; }
  const T* data() const { return data_; }
  std::size_t size() const { return size_; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

 private:
  T* data_;
  std::size_t size_;
};

using FftwRealBuffer = FftwBuffer<double>;
using FftwComplexBuffer = FftwBuffer<fftw_complex>;

class FftwPlan {
 public:
  static FftwPlan dft(const std::vector<int>& dims, fftw_complex* in, fftw_complex* out, int sign) {
    std::lock_guard lock(fftw_planner_mutex());
    return FftwPlan(fftw_plan_dft(static_cast<int>(dims.size()), dims.data(), in, out, sign,
                                  FFTW_ESTIMATE));
  }
  static FftwPlan r2c(const std::vector<int>& dims, double* in, fftw_complex* out) {
    std::lock_guard lock(fftw_planner_mutex());
    return FftwPlan(
        fftw_plan_dft_r2c(static_cast<int>(dims.size()), dims.data(), in, out, FFTW_ESTIMATE));
  }
  static FftwPlan c2r(const std::vector<int>& dims, fftw_complex* in, double* out) {
    std::lock_guard lock(fftw_planner_mutex());
    return FftwPlan(
        fftw_plan_dft_c2r(static_cast<int>(dims.size()), dims.data(), in, out, FFTW_ESTIMATE));
  }

  ~FftwPlan() {
    if (plan_) {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
  }
  FftwPlan(const FftwPlan&) = delete;
  FftwPlan& operator=(const FftwPlan&) = delete;
  FftwPlan(FftwPlan&& other) noexcept : plan_(std::exchange(other.plan_, nullptr)) {}
  FftwPlan& operator=(FftwPlan&& other) noexcept {
    std::swap(plan_, other.plan_);
    return *this;
  }

  void execute() const { fftw_execute(plan_); }

 private:
  explicit FftwPlan(fftw_plan p) : plan_(p) {}
  fftw_plan plan_ = nullptr;
};

}  // namespace plab
