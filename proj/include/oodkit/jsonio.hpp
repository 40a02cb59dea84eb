#pragma once

#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "oodkit/errors.hpp"

namespace oodkit {

// Parses `text` rejecting duplicate object keys, which the parser would
// otherwise resolve silently to the last value. Malformed JSON is
// FormatError, a duplicate key SchemaError.
template <class Json = nlohmann::json>
Json parse_strict_json(const std::string& text, const std::string& what) {
    std::vector<std::set<std::string>> open;
    std::string duplicate;
    typename Json::parser_callback_t cb = [&](int, typename Json::parse_event_t ev, Json& parsed) {
        switch (ev) {
            case Json::parse_event_t::object_start: open.emplace_back(); break;
            case Json::parse_event_t::object_end:
                if (!open.empty()) open.pop_back();
                break;
            case Json::parse_event_t::key:
                if (!open.empty() && !open.back().insert(parsed.template get<std::string>()).second &&
                    duplicate.empty())
                    duplicate = parsed.template get<std::string>();
                break;
            default: break;
        }
        return true;
    };
    Json j;
    try {
        j = Json::parse(text, cb);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + " is not valid JSON: " + e.what());
    }
    if (!duplicate.empty()) throw SchemaError("duplicate key '" + duplicate + "' in " + what);
    return j;
}

}  // namespace oodkit
