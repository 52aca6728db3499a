#pragma once

#include <map>
#include <string>
#include <vector>

namespace zsad {

// INI-style configuration: [section] headers, key = value lines, '#' comments.
// Keys are addressed as "section.key"; --set overrides use the same dotted
// form. Unknown keys are kept (round-tripped) so configs stay hot-swappable.
class Config {
public:
    Config() = default;
    static Config load(const std::string& path);
    static Config parse(const std::string& text);
    void save(const std::string& path) const;
    std::string dump() const;            // canonical text form
    std::string content_hash() const;    // sha256 of the canonical dump

    bool has(const std::string& dotted_key) const;
    std::string get_str(const std::string& dotted_key, const std::string& fallback) const;
    std::string require_str(const std::string& dotted_key) const;
    int get_int(const std::string& dotted_key, int fallback) const;
    double get_double(const std::string& dotted_key, double fallback) const;
    bool get_bool(const std::string& dotted_key, bool fallback) const;
    std::vector<std::string> get_list(const std::string& dotted_key,
                                      const std::vector<std::string>& fallback) const;

    void set(const std::string& dotted_key, const std::string& value);
    // parses "section.key=value"
    void apply_override(const std::string& assignment);

private:
    std::map<std::string, std::string> values_;  // dotted key -> raw string
};

}  // namespace zsad
