// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/tokenizer.hpp"

#include <charconv>

#include "a3kv/error.hpp"

namespace a3kv {

std::vector<std::uint32_t> encode_bytes(std::string_view text) {
  std::vector<std::uint32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string decode_bytes(std::span<const std::uint32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (std::uint32_t id : ids) {
    A3KV_CHECK(id <= kEosToken, ErrorKind::kInput,
               "token id " + std::to_string(id) + " is not a byte token");
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

std::vector<std::uint32_t> parse_token_list(std::string_view text) {
  std::vector<std::uint32_t> ids;
  std::size_t i = 0;
  auto sep = [](char c) { return c == ' ' || c == ',' || c == '\n' || c == '\t' || c == '\r'; };
  while (i < text.size()) {
    if (sep(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !sep(text[j])) ++j;
    std::uint32_t v = 0;
    const auto [ptr, ec] = std::from_chars(text.data() + i, text.data() + j, v);
    A3KV_CHECK(ec == std::errc() && ptr == text.data() + j, ErrorKind::kInput,
               "invalid token id '" + std::string(text.substr(i, j - i)) + "'");
    ids.push_back(v);
    i = j;
  }
  return ids;
}

}  // namespace a3kv
