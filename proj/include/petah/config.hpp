#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "petah/errors.hpp"

// Flat `key = value` configuration text with optional [section] headers.
// Blank lines and #-comments are skipped; later duplicates win. Section ""
// holds top-level keys.

namespace petah {

struct ConfigFile {
    std::map<std::string, std::map<std::string, std::string>> sections;

    bool has(const std::string& section, const std::string& key) const;
    const std::string& get(const std::string& section, const std::string& key) const;  // ValueError if absent
    std::string get_or(const std::string& section, const std::string& key, const std::string& fallback) const;
    void set(const std::string& section, const std::string& key, const std::string& value);

    // Typed views of a value; ValueError names the key on a parse failure.
    std::int64_t get_int(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key) const;
    bool get_bool(const std::string& section, const std::string& key) const;
    std::vector<int> get_int_list(const std::string& section, const std::string& key) const;  // comma-separated

    std::int64_t get_int_or(const std::string& section, const std::string& key, std::int64_t fallback) const;
    double get_double_or(const std::string& section, const std::string& key, double fallback) const;
    bool get_bool_or(const std::string& section, const std::string& key, bool fallback) const;
};

ConfigFile parse_config_text(const std::string& text);  // ValueError with line number on malformed input
std::string config_text(const ConfigFile& cfg);         // canonical rendering, sections sorted
ConfigFile load_config(const std::string& path);        // IoError when unreadable

}  // namespace petah
