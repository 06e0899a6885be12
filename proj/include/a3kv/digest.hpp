// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace a3kv {

using Digest = std::array<std::uint8_t, 32>;

std::string to_hex(const Digest& d);
// Throws Error(kInput) unless given exactly 64 hex digits.
Digest digest_from_hex(std::string_view hex);

// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::uint8_t> bytes);
  Sha256& update(const void* data, std::size_t size);
  Digest finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

Digest sha256(std::span<const std::uint8_t> bytes);

}  // namespace a3kv
