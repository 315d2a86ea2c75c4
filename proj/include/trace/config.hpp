#pragma once

#include <map>
#include <string>
#include <vector>

#include "trace/common.hpp"

namespace trace {

// Flat key = value configuration. Every key has a documented default; unknown
// keys are rejected so typos cannot silently fall back. emit() prints the
// complete effective configuration (defaults included) in sorted order, and
// the config hash is the FNV-1a of that text, so every artifact records
// exactly what produced it.
struct RunConfig {
    std::map<std::string, std::string> values;

    RunConfig();

    struct KeyInfo {
        const char* def;
        const char* doc;
    };
    static const std::map<std::string, KeyInfo>& schema();

    void set(const std::string& key, const std::string& value);
    void apply_overrides(const std::vector<std::string>& assignments);  // "key=value"

    const std::string& get_str(const std::string& key) const;
    int get_int(const std::string& key) const;
    double get_f(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<double> get_list(const std::string& key) const;

    static RunConfig from_text(const std::string& text);
    static RunConfig from_file(const std::string& path);

    std::string emit() const;
    uint64_t hash() const { return fnv1a64(emit()); }
};

}  // namespace trace
