#pragma once

#include <algorithm>
#include <bit>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iostream>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace agr {

using TokenId = std::int32_t;
using Shape = std::vector<std::size_t>;

/// Allocator with 64-byte alignment. Eigen's vectorized loops peel elements
/// until a packet boundary, so the summation order depends on the address
/// modulo the packet size; aligned buffers keep results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// What happens when a primitive produces NaN or Inf.
enum class NanPolicy { kThrow, kWarn, kIgnore };

namespace detail {
inline std::atomic<NanPolicy>& nan_policy_storage() {
  static std::atomic<NanPolicy> policy{NanPolicy::kThrow};
  return policy;
}
}  // namespace detail

inline NanPolicy nan_policy() { return detail::nan_policy_storage().load(std::memory_order_relaxed); }
inline void set_nan_policy(NanPolicy policy) { detail::nan_policy_storage().store(policy); }

/// Restores the previous NaN policy on scope exit.
class ScopedNanPolicy {
 public:
  explicit ScopedNanPolicy(NanPolicy policy) : saved_(nan_policy()) { set_nan_policy(policy); }
  ~ScopedNanPolicy() { set_nan_policy(saved_); }
  ScopedNanPolicy(const ScopedNanPolicy&) = delete;
  ScopedNanPolicy& operator=(const ScopedNanPolicy&) = delete;

 private:
  NanPolicy saved_;
};

/// Dense row-major n-dimensional array. A rank-0 tensor holds one scalar.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::span<const T> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                       " elements but " + std::to_string(data_.size()) + " values were given");
    }
  }

  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), std::span<const T>(data)) {}
  Tensor(Shape shape, std::initializer_list<T> data)
      : Tensor(std::move(shape), std::span<const T>(data.begin(), data.size())) {}

  static Tensor scalar(T value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Size of the trailing axis; 1 for scalars.
  std::size_t last_dim() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept { return last_dim() == 0 ? 0 : numel() / last_dim(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  AlignedVector<T>& storage() noexcept { return data_; }
  const AlignedVector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * last_dim(), last_dim()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * last_dim(), last_dim());
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }

  void reshape(Shape shape) {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const noexcept {
    if constexpr (std::is_floating_point_v<T>) {
      // Non-finite values have an all-ones exponent. Integer test so the loop
      // vectorizes.
      using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      constexpr Bits kExp = static_cast<Bits>(sizeof(T) == 4 ? 0x7F800000ull : 0x7FF0000000000000ull);
      Bits bad = 0;
      for (T v : data_) bad |= static_cast<Bits>((std::bit_cast<Bits>(v) & kExp) == kExp);
      return bad == 0;
    } else {
      return true;
    }
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  AlignedVector<T> data_;
};

/// Applies the active NaN policy to a freshly produced tensor.
template <typename T>
void check_finite(const Tensor<T>& t, std::string_view where) {
  const NanPolicy policy = nan_policy();
  if (policy == NanPolicy::kIgnore || t.all_finite()) return;
  std::string msg = "non-finite value produced by " + std::string(where) + " (shape " + shape_str(t.shape()) + ")";
  if (policy == NanPolicy::kThrow) throw NonFiniteError(msg);
  static std::atomic<int> warned{0};
  if (warned.fetch_add(1) < 8) std::cerr << "warning: " << msg << '\n';
}

}  // namespace agr
