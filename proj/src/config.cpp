#include "petah/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace petah {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& section, const std::string& key, const std::string& value,
                            const char* want) {
    std::ostringstream msg;
    msg << "config: key '" << key << "'";
    if (!section.empty()) msg << " in [" << section << "]";
    msg << " holds '" << value << "', expected " << want;
    throw ValueError(msg.str());
}

}  // namespace

bool ConfigFile::has(const std::string& section, const std::string& key) const {
    const auto s = sections.find(section);
    return s != sections.end() && s->second.count(key) != 0;
}

const std::string& ConfigFile::get(const std::string& section, const std::string& key) const {
    const auto s = sections.find(section);
    if (s != sections.end()) {
        const auto k = s->second.find(key);
        if (k != s->second.end()) return k->second;
    }
    std::ostringstream msg;
    msg << "config: missing key '" << key << "'";
    if (!section.empty()) msg << " in [" << section << "]";
    throw ValueError(msg.str());
}

std::string ConfigFile::get_or(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
    return has(section, key) ? get(section, key) : fallback;
}

void ConfigFile::set(const std::string& section, const std::string& key, const std::string& value) {
    sections[section][key] = value;
}

std::int64_t ConfigFile::get_int(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    errno = 0;
    char* end = nullptr;
    const long long parsed = std::strtoll(v.c_str(), &end, 10);
    if (errno != 0 || end == v.c_str() || *end != '\0') bad_value(section, key, v, "an integer");
    return parsed;
}

double ConfigFile::get_double(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    errno = 0;
    char* end = nullptr;
    const double parsed = std::strtod(v.c_str(), &end);
    if (errno != 0 || end == v.c_str() || *end != '\0') bad_value(section, key, v, "a number");
    return parsed;
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key) const {
    std::string v = get(section, key);
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(section, key, get(section, key), "a boolean");
}

std::vector<int> ConfigFile::get_int_list(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    std::vector<int> out;
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        const std::string t = trim(item);
        errno = 0;
        char* end = nullptr;
        const long parsed = std::strtol(t.c_str(), &end, 10);
        if (errno != 0 || end == t.c_str() || *end != '\0') bad_value(section, key, v, "a comma-separated int list");
        out.push_back(static_cast<int>(parsed));
    }
    if (out.empty()) bad_value(section, key, v, "a comma-separated int list");
    return out;
}

std::int64_t ConfigFile::get_int_or(const std::string& section, const std::string& key,
                                    std::int64_t fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
}

double ConfigFile::get_double_or(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
}

bool ConfigFile::get_bool_or(const std::string& section, const std::string& key, bool fallback) const {
    return has(section, key) ? get_bool(section, key) : fallback;
}

ConfigFile parse_config_text(const std::string& text) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        line_no += 1;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) {
                throw ValueError("config: malformed section header at line " + std::to_string(line_no));
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) {
                throw ValueError("config: empty section name at line " + std::to_string(line_no));
            }
            cfg.sections[section];  // a section may stay empty
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValueError("config: expected 'key = value' at line " + std::to_string(line_no));
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ValueError("config: empty key at line " + std::to_string(line_no));
        cfg.sections[section][key] = value;
    }
    return cfg;
}

std::string config_text(const ConfigFile& cfg) {
    std::ostringstream out;
    const auto emit = [&out](const std::map<std::string, std::string>& kv) {
        for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
    };
    const auto top = cfg.sections.find("");
    if (top != cfg.sections.end()) emit(top->second);
    for (const auto& [name, kv] : cfg.sections) {
        if (name.empty()) continue;
        out << "[" << name << "]\n";
        emit(kv);
    }
    return out.str();
}

ConfigFile load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

}  // namespace petah
