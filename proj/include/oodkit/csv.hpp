#pragma once

#include <string>
#include <vector>

namespace oodkit {

// RFC 4180 subset: comma separated, fields optionally double-quoted with ""
// as an escaped quote, LF or CRLF line ends. Blank lines are skipped.
// Malformed quoting is FormatError.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

// Quotes a field when it contains a comma, quote or line break.
std::string csv_field(const std::string& s);

// Strict number parse for CSV cells; "nan" is accepted. Otherwise SchemaError.
double parse_csv_double(const std::string& cell, const std::string& what);

}  // namespace oodkit
