// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/error.hpp"

namespace a3kv {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kContract: return "contract violation";
    case ErrorKind::kNotFound: return "not found";
    case ErrorKind::kIntegrity: return "integrity error";
    case ErrorKind::kIncompatible: return "incompatible chunks";
    case ErrorKind::kIo: return "I/O error";
  }
  return "error";
}

}  // namespace a3kv
