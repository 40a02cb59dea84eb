#include "oodkit/csv.hpp"

#include <cmath>
#include <cstdlib>

#include "oodkit/errors.hpp"

namespace oodkit {

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, field_started = false;
    std::size_t line = 1;

    auto end_row = [&] {
        if (field_started || !row.empty()) {
            row.push_back(std::move(field));
            rows.push_back(std::move(row));
        }
        row.clear();
        field.clear();
        field_started = false;
    };

    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                    if (i + 1 < text.size() && text[i + 1] != ',' && text[i + 1] != '\n' && text[i + 1] != '\r')
                        throw FormatError("CSV line " + std::to_string(line) + ": text after closing quote");
                }
            } else {
                if (ch == '\n') ++line;
                field += ch;
            }
            continue;
        }
        switch (ch) {
            case ',':
                row.push_back(std::move(field));
                field.clear();
                field_started = true;
                break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') break;
                throw FormatError("CSV line " + std::to_string(line) + ": bare carriage return");
            case '\n':
                end_row();
                ++line;
                break;
            case '"':
                if (!field.empty()) throw FormatError("CSV line " + std::to_string(line) + ": quote inside field");
                quoted = true;
                field_started = true;
                break;
            default:
                field += ch;
                field_started = true;
        }
    }
    if (quoted) throw FormatError("CSV ends inside a quoted field");
    end_row();
    return rows;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    out += '"';
    return out;
}

double parse_csv_double(const std::string& cell, const std::string& what) {
    if (cell == "nan") return NAN;
    if (cell.empty()) throw SchemaError(what + " is empty");
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end != cell.c_str() + cell.size() || !std::isfinite(v))
        throw SchemaError(what + " is not a finite number: '" + cell + "'");
    return v;
}

}  // namespace oodkit
