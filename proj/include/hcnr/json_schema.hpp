#pragma once

// Minimal JSON-Schema validator for the report schemas shipped in schemas/.
//
// Supported keywords: type (string or list), enum, const, required,
// properties, additionalProperties (boolean or schema), items, minItems,
// minimum, maximum. Anything else is ignored. Returns the list of violations
// as "path: message" strings; empty means valid.

#include <string>
#include <vector>

#include "json.hpp"

namespace hcnr {

namespace detail {

inline bool json_type_matches(const nlohmann::json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "number") return v.is_number();
    if (t == "integer") {
        if (v.is_number_integer()) return true;
        return v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long long>(v.get<double>()));
    }
    return false;
}

inline void validate_node(const nlohmann::json& v, const nlohmann::json& s, const std::string& path,
                          std::vector<std::string>& errors) {
    if (!s.is_object()) return;
    if (s.contains("type")) {
        const auto& t = s["type"];
        bool ok = false;
        if (t.is_string()) ok = json_type_matches(v, t.get<std::string>());
        else
            for (const auto& x : t) ok = ok || json_type_matches(v, x.get<std::string>());
        if (!ok) {
            errors.push_back(path + ": expected type " + t.dump() + ", got " + v.type_name());
            return;
        }
    }
    if (s.contains("enum")) {
        bool ok = false;
        for (const auto& e : s["enum"]) ok = ok || e == v;
        if (!ok) errors.push_back(path + ": value " + v.dump() + " not in enum " + s["enum"].dump());
    }
    if (s.contains("const") && s["const"] != v)
        errors.push_back(path + ": expected constant " + s["const"].dump() + ", got " + v.dump());
    if (v.is_number()) {
        if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>())
            errors.push_back(path + ": " + v.dump() + " is below minimum " + s["minimum"].dump());
        if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>())
            errors.push_back(path + ": " + v.dump() + " is above maximum " + s["maximum"].dump());
    }
    if (v.is_object()) {
        if (s.contains("required"))
            for (const auto& r : s["required"])
                if (!v.contains(r.get<std::string>()))
                    errors.push_back(path + ": missing required property '" + r.get<std::string>() + "'");
        const nlohmann::json props = s.value("properties", nlohmann::json::object());
        for (const auto& [k, child] : v.items()) {
            if (props.contains(k)) {
                validate_node(child, props[k], path + "." + k, errors);
            } else if (s.contains("additionalProperties")) {
                const auto& ap = s["additionalProperties"];
                if (ap.is_boolean() && !ap.get<bool>())
                    errors.push_back(path + ": unexpected property '" + k + "'");
                else if (ap.is_object())
                    validate_node(child, ap, path + "." + k, errors);
            }
        }
    }
    if (v.is_array()) {
        if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>())
            errors.push_back(path + ": fewer than " + s["minItems"].dump() + " items");
        if (s.contains("items"))
            for (std::size_t i = 0; i < v.size(); ++i)
                validate_node(v[i], s["items"], path + "[" + std::to_string(i) + "]", errors);
    }
}

}  // namespace detail

inline std::vector<std::string> validate_json(const nlohmann::json& value, const nlohmann::json& schema) {
    std::vector<std::string> errors;
    detail::validate_node(value, schema, "$", errors);
    return errors;
}

}  // namespace hcnr
