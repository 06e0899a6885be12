// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "json_util.hpp"

#include <fstream>
#include <sstream>

#include "a3kv/error.hpp"

namespace a3kv::detail {

nlohmann::json parse_json(std::string_view text, std::string_view what) {
  try {
    return nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    // e.byte is 1-based and points just past the offending character.
    std::size_t line = 1, column = 1;
    const std::size_t stop = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < stop; ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    std::ostringstream msg;
    msg << what << ": parse error at line " << line << ", column " << column
        << ": " << e.what();
    throw Error(ErrorKind::kConfig, msg.str());
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  A3KV_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace a3kv::detail
