// Copyright 2026 The cwnm Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "cwnm/error.hpp"

// Little-endian byte buffers for the tensor and sparse-weight file formats.

namespace cwnm::detail {

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write to '" + path + "' failed");
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(is), {});
}

template <class T>
T byteswap_if_big(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class ByteWriter {
 public:
  void magic(std::string_view m) { buf_.insert(buf_.end(), m.begin(), m.end()); }

  template <class T>
  void put(T v) {
    v = byteswap_if_big(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  void put_floats(std::span<const float> vs) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* p = reinterpret_cast<const char*>(vs.data());
      buf_.insert(buf_.end(), p, p + vs.size_bytes());
    } else {
      for (float f : vs) put(f);
    }
  }

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}

  void expect_magic(std::string_view m) {
    need(m.size(), "magic");
    if (std::string_view(buf_).substr(pos_, m.size()) != m)
      throw FormatError("bad magic: expected '" + std::string(m) + "'");
    pos_ += m.size();
  }

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_big(v);
  }

  void get_floats(std::span<float> out, const char* what) {
    need(out.size_bytes(), what);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), buf_.data() + pos_, out.size_bytes());
      pos_ += out.size_bytes();
    } else {
      for (float& f : out) f = get<float>(what);
    }
  }

  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n)
      throw FormatError(std::string("truncated payload while reading ") + what);
  }

  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace cwnm::detail
