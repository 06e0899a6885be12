// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace a3kv {

enum class ErrorKind {
  kConfig,        // invalid model/policy/CLI configuration
  kInput,         // malformed request data (empty question, out-of-vocab id)
  kShape,         // tensor dimensions disagree
  kContract,      // caller broke an operation precondition
  kNotFound,      // chunk id absent from the store
  kIntegrity,     // stored bytes fail magic/version/digest checks
  kIncompatible,  // chunks produced by different models
  kIo,            // filesystem failure
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define A3KV_CHECK(cond, kind, msg)              \
  do {                                           \
    if (!(cond)) throw ::a3kv::Error((kind), (msg)); \
  } while (0)

}  // namespace a3kv
