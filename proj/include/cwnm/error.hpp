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

#include <stdexcept>
#include <string>

namespace cwnm {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unsupported file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Extents that do not agree (tensor dims, geometry, tile/strip shapes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Illegal pruning or kernel parameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class E = ShapeError>
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

}  // namespace detail
}  // namespace cwnm
