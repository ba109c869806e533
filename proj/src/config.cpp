#include "difflab/config.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace difflab {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::string real_to_str(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

Config Config::parse(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    std::string current;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3) {
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": malformed section header '" + t + "'");
            }
            current = trim(t.substr(1, t.size() - 2));
            if (current.empty()) {
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": empty section name");
            }
            // touch the section so empty sections survive a round trip
            cfg.set_str(current, "", "");
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value, got '" + t + "'");
        }
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": empty key");
        }
        if (current.empty()) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": key '" + key + "' outside any [section]");
        }
        cfg.set_str(current, key, value);
    }
    return cfg;
}

Config Config::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

std::string Config::serialize() const {
    std::ostringstream out;
    for (const Section& sec : sections_) {
        out << '[' << sec.first << "]\n";
        for (const auto& kv : sec.second) {
            if (kv.first.empty()) continue;  // section-touch placeholder
            out << kv.first << " = " << kv.second << '\n';
        }
        out << '\n';
    }
    return out.str();
}

void Config::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file: " + path);
    out << serialize();
    if (!out) throw ConfigError("write failed: " + path);
}

const std::string* Config::find(const std::string& section,
                                const std::string& key) const {
    for (const Section& sec : sections_) {
        if (sec.first != section) continue;
        for (const auto& kv : sec.second) {
            if (kv.first == key) return &kv.second;
        }
    }
    return nullptr;
}

bool Config::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

std::string Config::get_str(const std::string& section, const std::string& key) const {
    const std::string* v = find(section, key);
    if (!v) throw ConfigError("missing config entry [" + section + "] " + key);
    return *v;
}

std::string Config::get_str(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
    const std::string* v = find(section, key);
    return v ? *v : fallback;
}

long Config::get_int(const std::string& section, const std::string& key) const {
    const std::string s = get_str(section, key);
    char* end = nullptr;
    long v = std::strtol(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0') {
        throw ConfigError("config entry [" + section + "] " + key +
                          " is not an integer: '" + s + "'");
    }
    return v;
}

long Config::get_int(const std::string& section, const std::string& key,
                     long fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
}

double Config::get_real(const std::string& section, const std::string& key) const {
    const std::string s = get_str(section, key);
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') {
        throw ConfigError("config entry [" + section + "] " + key +
                          " is not a number: '" + s + "'");
    }
    return v;
}

double Config::get_real(const std::string& section, const std::string& key,
                        double fallback) const {
    return has(section, key) ? get_real(section, key) : fallback;
}

bool Config::get_bool(const std::string& section, const std::string& key) const {
    const std::string s = get_str(section, key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config entry [" + section + "] " + key +
                      " is not a boolean: '" + s + "'");
}

bool Config::get_bool(const std::string& section, const std::string& key,
                      bool fallback) const {
    return has(section, key) ? get_bool(section, key) : fallback;
}

void Config::set_str(const std::string& section, const std::string& key,
                     const std::string& value) {
    for (Section& sec : sections_) {
        if (sec.first != section) continue;
        for (auto& kv : sec.second) {
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        }
        sec.second.emplace_back(key, value);
        return;
    }
    // new sections always start with a placeholder entry so configs built
    // programmatically compare equal to their parse(serialize()) round trip
    Entries entries{{std::string(), std::string()}};
    if (!key.empty()) entries.emplace_back(key, value);
    sections_.emplace_back(section, std::move(entries));
}

void Config::set_int(const std::string& section, const std::string& key, long value) {
    set_str(section, key, std::to_string(value));
}

void Config::set_real(const std::string& section, const std::string& key, double value) {
    set_str(section, key, real_to_str(value));
}

void Config::set_bool(const std::string& section, const std::string& key, bool value) {
    set_str(section, key, value ? "true" : "false");
}

std::vector<std::string> Config::sections() const {
    std::vector<std::string> out;
    out.reserve(sections_.size());
    for (const Section& sec : sections_) out.push_back(sec.first);
    return out;
}

std::vector<std::string> Config::keys(const std::string& section) const {
    std::vector<std::string> out;
    for (const Section& sec : sections_) {
        if (sec.first != section) continue;
        for (const auto& kv : sec.second) {
            if (!kv.first.empty()) out.push_back(kv.first);
        }
    }
    return out;
}

}  // namespace difflab
