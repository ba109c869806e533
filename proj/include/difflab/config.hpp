#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace difflab {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Ordered INI-style key/value store used for run configs and model manifests.
// Sections and keys keep insertion order so serialize() round-trips losslessly
// through parse().
class Config {
  public:
    static Config parse(const std::string& text);
    static Config load(const std::string& path);

    std::string serialize() const;
    void save(const std::string& path) const;

    bool has(const std::string& section, const std::string& key) const;

    std::string get_str(const std::string& section, const std::string& key) const;
    std::string get_str(const std::string& section, const std::string& key,
                        const std::string& fallback) const;
    long get_int(const std::string& section, const std::string& key) const;
    long get_int(const std::string& section, const std::string& key, long fallback) const;
    double get_real(const std::string& section, const std::string& key) const;
    double get_real(const std::string& section, const std::string& key,
                    double fallback) const;
    bool get_bool(const std::string& section, const std::string& key) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

    void set_str(const std::string& section, const std::string& key,
                 const std::string& value);
    void set_int(const std::string& section, const std::string& key, long value);
    void set_real(const std::string& section, const std::string& key, double value);
    void set_bool(const std::string& section, const std::string& key, bool value);

    std::vector<std::string> sections() const;
    std::vector<std::string> keys(const std::string& section) const;

    bool operator==(const Config& other) const { return sections_ == other.sections_; }

  private:
    using Entries = std::vector<std::pair<std::string, std::string>>;
    using Section = std::pair<std::string, Entries>;

    const std::string* find(const std::string& section, const std::string& key) const;

    std::vector<Section> sections_;
};

}  // namespace difflab
