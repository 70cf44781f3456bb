#pragma once

// Value parsing for `key = value` configuration entries.

#include "bsm/errors.hpp"
#include "bsm/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace bsm::detail {

Index parse_index(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
/// Comma-separated numbers, surrounding blanks allowed.
std::vector<double> parse_doubles(const std::string& key, const std::string& value);
std::string trim(const std::string& s);

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Throws FormatError on a line without '=' or a repeated key.
std::map<std::string, std::string> parse_entries(const std::string& text, const std::string& origin);

}  // namespace bsm::detail
