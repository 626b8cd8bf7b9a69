#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <vector>

#include "mrcnet/common.hpp"

namespace mrc {

// Extents are (N, C, H, W), row-major, W fastest.
using Shape = std::array<i64, 4>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[" << s[0] << "," << s[1] << "," << s[2] << "," << s[3] << "]";
  return os.str();
}

inline i64 shape_numel(const Shape& s) { return s[0] * s[1] * s[2] * s[3]; }

// Dense 4-D tensor. An extent of 0 is legal and denotes an empty tensor;
// every op accepts empty inputs and produces the contract-shaped empty output.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  Tensor() : shape_{0, 0, 0, 0} {}

  explicit Tensor(Shape s, T fill = T(0)) : shape_(s) {
    for (i64 e : s) {
      if (e < 0) throw ShapeError("negative tensor extent in " + shape_str(s));
    }
    data_.assign(static_cast<size_t>(shape_numel(s)), fill);
  }

  Tensor(i64 n, i64 c, i64 h, i64 w, T fill = T(0)) : Tensor(Shape{n, c, h, w}, fill) {}

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.shape_); }

  const Shape& shape() const { return shape_; }
  i64 n() const { return shape_[0]; }
  i64 c() const { return shape_[1]; }
  i64 h() const { return shape_[2]; }
  i64 w() const { return shape_[3]; }
  i64 extent(Axis a) const { return shape_[static_cast<int>(a)]; }
  i64 numel() const { return static_cast<i64>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  i64 index(i64 n, i64 c, i64 h, i64 w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  T& at(i64 n, i64 c, i64 h, i64 w) { return data_[index(n, c, h, w)]; }
  const T& at(i64 n, i64 c, i64 h, i64 w) const { return data_[index(n, c, h, w)]; }
  T& operator[](i64 i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](i64 i) const { return data_[static_cast<size_t>(i)]; }

  // Same buffer reinterpreted under a new shape with equal element count.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) {
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                       " changes element count");
    }
    Tensor out;
    out.shape_ = s;
    out.data_ = data_;
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool bitwise_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

#ifndef NDEBUG
template <typename T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw Error(std::string("non-finite output produced by ") + op);
}
#else
template <typename T>
inline void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

// --- serialization -----------------------------------------------------
//
// Little-endian binary framing: magic "MRCT", u32 version, u32 dtype tag
// (0 = f32, 1 = f64), 4 x u64 extents, then the raw buffer.

inline constexpr u32 kTensorFormatVersion = 1;

template <typename T>
constexpr u32 dtype_tag() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else return 1;
}

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

inline void write_u32(std::ostream& os, u32 v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, u64 v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline u32 read_u32(std::istream& is) {
  u32 v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("truncated stream while reading u32");
  return v;
}
inline u64 read_u64(std::istream& is) {
  u64 v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw IoError("truncated stream while reading u64");
  return v;
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("MRCT", 4);
  detail::write_u32(os, kTensorFormatVersion);
  detail::write_u32(os, dtype_tag<T>());
  for (i64 e : t.shape()) detail::write_u64(os, static_cast<u64>(e));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw IoError("failed to write tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MRCT", 4) != 0) throw IoError("bad tensor magic");
  u32 version = detail::read_u32(is);
  if (version != kTensorFormatVersion)
    throw IoError("unsupported tensor format version " + std::to_string(version));
  u32 tag = detail::read_u32(is);
  if (tag != dtype_tag<T>())
    throw IoError("tensor dtype tag " + std::to_string(tag) +
                  " does not match the requested element type");
  Shape s;
  for (auto& e : s) e = static_cast<i64>(detail::read_u64(is));
  Tensor<T> t(s);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!is) throw IoError("truncated tensor payload");
  return t;
}

}  // namespace mrc
