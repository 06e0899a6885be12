// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Byte-level tokenizer: ids 0..255 are raw bytes, 256 is BOS, 257 is EOS.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace a3kv {

inline constexpr std::uint32_t kBosToken = 256;
inline constexpr std::uint32_t kEosToken = 257;
inline constexpr int kByteVocabSize = 258;

std::vector<std::uint32_t> encode_bytes(std::string_view text);
// Special ids are dropped; ids above 257 throw kInput.
std::string decode_bytes(std::span<const std::uint32_t> ids);

// Whitespace/comma separated decimal ids, e.g. "5 17,3".
std::vector<std::uint32_t> parse_token_list(std::string_view text);

}  // namespace a3kv
