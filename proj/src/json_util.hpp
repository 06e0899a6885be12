// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>

#include <json.hpp>

namespace a3kv::detail {

// Parses a JSON document; syntax errors become Error(kConfig) naming the line
// and column of the offending byte.
nlohmann::json parse_json(std::string_view text, std::string_view what);

std::string read_text_file(const std::string& path);

}  // namespace a3kv::detail
