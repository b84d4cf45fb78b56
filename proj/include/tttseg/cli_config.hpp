#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "tttseg/errors.hpp"

namespace tttseg::cli {

// One JSON config object per subcommand plus dotted-path overrides. Unknown
// keys are hard errors, not warnings.

nlohmann::json load_config(const std::string& path);  // empty path -> {}

// assignment: "key=value" or "nested.key=value". The value is parsed as JSON
// when possible, otherwise taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

void require_known_keys(const nlohmann::json& config, const std::vector<std::string>& allowed,
                        const std::string& command);

// Typed getters with defaults.
double get_num(const nlohmann::json& c, const std::string& key, double fallback);
std::int64_t get_int(const nlohmann::json& c, const std::string& key, std::int64_t fallback);
std::string get_str(const nlohmann::json& c, const std::string& key, const std::string& fallback);
bool get_bool(const nlohmann::json& c, const std::string& key, bool fallback);
std::string require_str(const nlohmann::json& c, const std::string& key, const std::string& command);

}  // namespace tttseg::cli
