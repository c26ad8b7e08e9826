#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace psnet {

/// Dense row-major tensor of rank 1..5. Small fixed-capacity shape keeps
/// indexing allocation-free; storage is a contiguous std::vector.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::initializer_list<int> dims) { reshape(dims); }
  explicit Tensor(const std::vector<int>& dims) { reshape(dims); }

  void reshape(std::initializer_list<int> dims) {
    reshape(std::vector<int>(dims));
  }

  void reshape(const std::vector<int>& dims) {
    if (dims.empty() || dims.size() > 5)
      throw std::invalid_argument("tensor rank must be 1..5");
    rank_ = static_cast<int>(dims.size());
    size_t total = 1;
    for (int i = 0; i < rank_; ++i) {
      if (dims[i] < 0) throw std::invalid_argument("negative tensor dim");
      dims_[i] = dims[i];
      total *= static_cast<size_t>(dims[i]);
    }
    for (int i = rank_; i < 5; ++i) dims_[i] = 1;
    strides_[rank_ - 1] = 1;
    for (int i = rank_ - 2; i >= 0; --i)
      strides_[i] = strides_[i + 1] * static_cast<size_t>(dims_[i + 1]);
    data_.assign(total, T(0));
  }

  int rank() const { return rank_; }
  int dim(int i) const { return dims_[i]; }
  std::vector<int> dims() const {
    return std::vector<int>(dims_.begin(), dims_.begin() + rank_);
  }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  T& at(int a) { return data_[static_cast<size_t>(a)]; }
  const T& at(int a) const { return data_[static_cast<size_t>(a)]; }
  T& at(int a, int b) { return data_[a * strides_[0] + b]; }
  const T& at(int a, int b) const { return data_[a * strides_[0] + b]; }
  T& at(int a, int b, int c) {
    return data_[a * strides_[0] + b * strides_[1] + c];
  }
  const T& at(int a, int b, int c) const {
    return data_[a * strides_[0] + b * strides_[1] + c];
  }
  T& at(int a, int b, int c, int d) {
    return data_[a * strides_[0] + b * strides_[1] + c * strides_[2] + d];
  }
  const T& at(int a, int b, int c, int d) const {
    return data_[a * strides_[0] + b * strides_[1] + c * strides_[2] + d];
  }
  T& at(int a, int b, int c, int d, int e) {
    return data_[a * strides_[0] + b * strides_[1] + c * strides_[2] +
                 d * strides_[3] + e];
  }
  const T& at(int a, int b, int c, int d, int e) const {
    return data_[a * strides_[0] + b * strides_[1] + c * strides_[2] +
                 d * strides_[3] + e];
  }

  size_t stride(int i) const { return strides_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor<T>& other) const {
    if (rank_ != other.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (dims_[i] != other.dims_[i]) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(dims());
    for (size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  int rank_ = 0;
  std::array<int, 5> dims_{1, 1, 1, 1, 1};
  std::array<size_t, 5> strides_{0, 0, 0, 0, 0};
  std::vector<T> data_;
};

// IEEE 754 binary16 conversions, used for the reduced-precision tensor
// container. Round-to-nearest-even on encode.
inline uint16_t float_to_half(float f) {
  uint32_t x;
  std::memcpy(&x, &f, 4);
  uint32_t sign = (x >> 16) & 0x8000u;
  int32_t exp = static_cast<int32_t>((x >> 23) & 0xFF) - 127 + 15;
  uint32_t mant = x & 0x7FFFFFu;
  if (((x >> 23) & 0xFF) == 0xFF) {  // inf/nan
    return static_cast<uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0));
  }
  if (exp >= 0x1F) return static_cast<uint16_t>(sign | 0x7C00u);  // overflow
  if (exp <= 0) {
    if (exp < -10) return static_cast<uint16_t>(sign);  // underflow to 0
    mant |= 0x800000u;
    int shift = 14 - exp;
    uint32_t half_mant = mant >> shift;
    uint32_t rem = mant & ((1u << shift) - 1);
    uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1))) ++half_mant;
    return static_cast<uint16_t>(sign | half_mant);
  }
  uint32_t half_mant = mant >> 13;
  uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1))) {
    ++half_mant;
    if (half_mant == 0x400u) {
      half_mant = 0;
      ++exp;
      if (exp >= 0x1F) return static_cast<uint16_t>(sign | 0x7C00u);
    }
  }
  return static_cast<uint16_t>(sign | (static_cast<uint32_t>(exp) << 10) |
                               half_mant);
}

inline float half_to_float(uint16_t h) {
  uint32_t sign = (static_cast<uint32_t>(h) & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1Fu;
  uint32_t mant = h & 0x3FFu;
  uint32_t x;
  if (exp == 0) {
    if (mant == 0) {
      x = sign;
    } else {  // subnormal
      exp = 127 - 15 + 1;
      while (!(mant & 0x400u)) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      x = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    x = sign | 0x7F800000u | (mant << 13);
  } else {
    x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  float f;
  std::memcpy(&f, &x, 4);
  return f;
}

}  // namespace psnet
