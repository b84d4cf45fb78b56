#include "tttseg/cli_config.hpp"

#include <algorithm>
#include <fstream>

namespace tttseg::cli {

nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + ": config must be a JSON object");
  return j;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;  // bare strings are strings
  }
  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty path segment");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (!node->is_object() && !node->is_null()) {
      throw ConfigError("override key '" + key + "' descends into a non-object");
    }
    start = dot + 1;
  }
}

void require_known_keys(const nlohmann::json& config, const std::vector<std::string>& allowed,
                        const std::string& command) {
  for (const auto& [key, value] : config.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(command + ": unknown config key '" + key + "'");
    }
  }
}

double get_num(const nlohmann::json& c, const std::string& key, double fallback) {
  if (!c.contains(key)) return fallback;
  if (!c.at(key).is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return c.at(key).get<double>();
}

std::int64_t get_int(const nlohmann::json& c, const std::string& key, std::int64_t fallback) {
  if (!c.contains(key)) return fallback;
  if (!c.at(key).is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
  return c.at(key).get<std::int64_t>();
}

std::string get_str(const nlohmann::json& c, const std::string& key, const std::string& fallback) {
  if (!c.contains(key)) return fallback;
  if (!c.at(key).is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return c.at(key).get<std::string>();
}

bool get_bool(const nlohmann::json& c, const std::string& key, bool fallback) {
  if (!c.contains(key)) return fallback;
  if (!c.at(key).is_boolean()) throw ConfigError("config key '" + key + "' must be a boolean");
  return c.at(key).get<bool>();
}

std::string require_str(const nlohmann::json& c, const std::string& key, const std::string& command) {
  if (!c.contains(key)) throw ConfigError(command + ": missing required config key '" + key + "'");
  return get_str(c, key, "");
}

}  // namespace tttseg::cli
