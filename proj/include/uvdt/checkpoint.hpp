// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container: named tensors with shapes plus a free-form
// metadata string, versioned by the leading magic line.
#pragma once

#include "uvdt/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace uvdt {

inline constexpr const char* kCheckpointMagic = "UVDT-CKPT-1\n";

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
  const uint32_t n = read_pod<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("checkpoint: truncated string");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& tensors,
                            const std::string& meta = "") {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, static_cast<std::streamsize>(std::strlen(kCheckpointMagic)));
  detail::write_str(os, meta);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::write_str(os, name);
    detail::write_pod<uint8_t>(os, sizeof(real) == 8 ? 0 : 1);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape().size()));
    for (int64_t d : t.shape()) detail::write_pod<int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.values().size() * sizeof(real)));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

struct Checkpoint {
  std::string meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& at(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError("checkpoint: missing tensor '" + name + "'");
  }
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  std::string magic(std::strlen(kCheckpointMagic), '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!is || magic != kCheckpointMagic)
    throw IoError("checkpoint: bad magic in " + path);
  Checkpoint ck;
  ck.meta = detail::read_str(is);
  const uint32_t count = detail::read_pod<uint32_t>(is);
  ck.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = detail::read_str(is);
    const uint8_t dtype = detail::read_pod<uint8_t>(is);
    const uint32_t ndim = detail::read_pod<uint32_t>(is);
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = detail::read_pod<int64_t>(is);
    const size_t n = static_cast<size_t>(shape_numel(shape));
    std::vector<real> vals(n);
    if (dtype == (sizeof(real) == 8 ? 0 : 1)) {
      is.read(reinterpret_cast<char*>(vals.data()),
              static_cast<std::streamsize>(n * sizeof(real)));
    } else if (dtype == 0) {  // file holds f64, runtime is f32
      std::vector<double> tmp(n);
      is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 8));
      for (size_t k = 0; k < n; ++k) vals[k] = static_cast<real>(tmp[k]);
    } else {  // file holds f32, runtime is f64
      std::vector<float> tmp(n);
      is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 4));
      for (size_t k = 0; k < n; ++k) vals[k] = static_cast<real>(tmp[k]);
    }
    if (!is) throw IoError("checkpoint: truncated tensor data for '" + name + "'");
    ck.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(vals)));
  }
  return ck;
}

}  // namespace uvdt
