// SPDX-FileCopyrightText: (c) 2026 The wsdlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <unistd.h>

#include "wsdlab/common.hpp"

namespace wsdlab {

// One named parameter tensor inside the flat vector.
struct SegmentSpec {
  std::string name;
  size_t offset = 0;
  size_t rows = 0;
  size_t cols = 0;

  size_t size() const { return rows * cols; }
  bool operator==(const SegmentSpec&) const = default;
};

// Ordered, named slices over a flat parameter vector. The layout is a pure
// function of the model configuration, so two runs with the same config agree
// on every offset.
class WeightLayout {
 public:
  size_t add(const std::string& name, size_t rows, size_t cols) {
    if (index_.count(name)) throw std::invalid_argument("duplicate segment: " + name);
    index_[name] = segments_.size();
    segments_.push_back({name, total_, rows, cols});
    total_ += rows * cols;
    return segments_.size() - 1;
  }

  const SegmentSpec& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no segment named " + name);
    return segments_[it->second];
  }

  const std::vector<SegmentSpec>& segments() const { return segments_; }
  size_t total_size() const { return total_; }

  bool operator==(const WeightLayout& other) const {
    return segments_ == other.segments_;
  }

 private:
  std::vector<SegmentSpec> segments_;
  std::map<std::string, size_t> index_;
  size_t total_ = 0;
};

using LayoutPtr = std::shared_ptr<const WeightLayout>;

// Flat, ordered parameter (or gradient, or moment) vector with named views.
template <typename T>
struct WeightVector {
  LayoutPtr layout;
  std::vector<T> values;

  WeightVector() = default;
  explicit WeightVector(LayoutPtr l) : layout(std::move(l)), values(layout->total_size(), T{0}) {}

  size_t size() const { return values.size(); }

  Eigen::Map<RowMat<T>> matrix(const std::string& name) {
    const auto& seg = layout->at(name);
    return {values.data() + seg.offset, static_cast<Eigen::Index>(seg.rows),
            static_cast<Eigen::Index>(seg.cols)};
  }
  Eigen::Map<const RowMat<T>> matrix(const std::string& name) const {
    const auto& seg = layout->at(name);
    return {values.data() + seg.offset, static_cast<Eigen::Index>(seg.rows),
            static_cast<Eigen::Index>(seg.cols)};
  }
  std::span<T> segment(const SegmentSpec& seg) { return {values.data() + seg.offset, seg.size()}; }
  std::span<const T> segment(const SegmentSpec& seg) const {
    return {values.data() + seg.offset, seg.size()};
  }

  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> array() {
    return {values.data(), static_cast<Eigen::Index>(values.size())};
  }
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> array() const {
    return {values.data(), static_cast<Eigen::Index>(values.size())};
  }

  template <typename U>
  WeightVector<U> cast() const {
    WeightVector<U> out(layout);
    for (size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
    return out;
  }
};

inline void require_same_layout(const LayoutPtr& a, const LayoutPtr& b) {
  if (!a || !b || !(*a == *b)) throw std::invalid_argument("weight layouts differ");
}

// flatten / unflatten: the flat vector is the storage, so flatten is a copy of
// the values and unflatten writes a per-tensor map back through the layout.
template <typename T>
std::vector<T> flatten(const WeightVector<T>& w) {
  return w.values;
}

template <typename T>
WeightVector<T> unflatten(LayoutPtr layout, const std::vector<T>& flat) {
  if (flat.size() != layout->total_size()) {
    throw std::invalid_argument("unflatten: value count does not match layout");
  }
  WeightVector<T> w(std::move(layout));
  w.values = flat;
  return w;
}

template <typename T>
std::map<std::string, RowMat<T>> to_tensors(const WeightVector<T>& w) {
  std::map<std::string, RowMat<T>> out;
  for (const auto& seg : w.layout->segments()) out[seg.name] = w.matrix(seg.name);
  return out;
}

template <typename T>
WeightVector<T> from_tensors(LayoutPtr layout, const std::map<std::string, RowMat<T>>& tensors) {
  WeightVector<T> w(std::move(layout));
  for (const auto& seg : w.layout->segments()) {
    const auto it = tensors.find(seg.name);
    if (it == tensors.end()) throw std::invalid_argument("missing tensor: " + seg.name);
    if (static_cast<size_t>(it->second.rows()) != seg.rows ||
        static_cast<size_t>(it->second.cols()) != seg.cols) {
      throw std::invalid_argument("tensor shape mismatch: " + seg.name);
    }
    w.matrix(seg.name) = it->second;
  }
  return w;
}

namespace detail {

inline void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <typename I>
void put_int(std::string& out, I v) {
  put_bytes(out, &v, sizeof(v));
}

inline void put_string(std::string& out, const std::string& s) {
  put_int<uint32_t>(out, static_cast<uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  void read(void* p, size_t n) {
    if (pos_ + n > data_.size()) throw std::runtime_error("truncated file");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <typename I>
  I read_int() {
    I v;
    read(&v, sizeof(v));
    return v;
  }
  std::string read_string() {
    const auto n = read_int<uint32_t>();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const char> data_;
  size_t pos_ = 0;
};

}  // namespace detail

// On-disk layout table shared by checkpoints and optimizer-state files.
inline void serialize_layout(std::string& out, const WeightLayout& layout) {
  detail::put_int<uint32_t>(out, static_cast<uint32_t>(layout.segments().size()));
  for (const auto& seg : layout.segments()) {
    detail::put_string(out, seg.name);
    detail::put_int<uint64_t>(out, seg.offset);
    detail::put_int<uint64_t>(out, seg.rows);
    detail::put_int<uint64_t>(out, seg.cols);
  }
}

inline WeightLayout deserialize_layout(detail::ByteReader& in) {
  WeightLayout layout;
  const auto n = in.read_int<uint32_t>();
  for (uint32_t i = 0; i < n; ++i) {
    const std::string name = in.read_string();
    const auto offset = in.read_int<uint64_t>();
    const auto rows = in.read_int<uint64_t>();
    const auto cols = in.read_int<uint64_t>();
    const size_t idx = layout.add(name, rows, cols);
    if (layout.segments()[idx].offset != offset) throw std::runtime_error("bad layout table");
  }
  return layout;
}

inline void serialize_values_f32(std::string& out, std::span<const float> values) {
  detail::put_int<uint64_t>(out, values.size());
  detail::put_bytes(out, values.data(), values.size() * sizeof(float));
}

inline std::vector<float> deserialize_values_f32(detail::ByteReader& in) {
  const auto n = in.read_int<uint64_t>();
  std::vector<float> values(n);
  in.read(values.data(), n * sizeof(float));
  return values;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

// Write-then-rename keeps concurrent writers of the same content-addressed
// file from ever exposing a torn file.
inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  static std::atomic<uint64_t> counter{0};
  const auto tmp = path.string() + ".tmp." + std::to_string(counter.fetch_add(1)) + "." +
                   std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string content_id(const std::string& bytes) {
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace wsdlab
