#pragma once

// Flat "section.key" settings read from an INI file, overridable from the
// command line. Every key a consumer reads is marked; leftovers are reported
// so typos do not silently fall back to defaults.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "marrow/error.hpp"

namespace marrow {

class Settings {
 public:
  static Settings parse(const std::string& text, const std::string& origin = "config") {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    Settings s;
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError(origin + ": key '" + section + "' must live inside a [section]");
      for (const auto& [key, value] : body) s.values_[section + "." + key] = value.get_value<std::string>();
    }
    return s;
  }

  static Settings load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  /// "section.key" = value; later calls win.
  void set(const std::string& key, const std::string& value) {
    if (key.find('.') == std::string::npos || key.front() == '.' || key.back() == '.')
      throw ConfigError("setting '" + key + "' must have the form section.key");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return used_.insert(key), fallback;
    const auto raw = get(key, "");
    try {
      std::size_t used = 0;
      const double v = std::stod(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("setting " + key + " = '" + raw + "' is not a number");
    }
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    if (!has(key)) return used_.insert(key), fallback;
    const auto raw = get(key, "");
    try {
      std::size_t used = 0;
      const long long v = std::stoll(raw, &used);
      if (used != raw.size() || v < 0) throw std::invalid_argument(raw);
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("setting " + key + " = '" + raw + "' is not a non-negative integer");
    }
  }

  std::uint64_t get_seed(const std::string& key, std::uint64_t fallback) const {
    return static_cast<std::uint64_t>(get_size(key, static_cast<std::size_t>(fallback)));
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return used_.insert(key), fallback;
    const auto raw = get(key, "");
    if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
    if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
    throw ConfigError("setting " + key + " = '" + raw + "' is not a boolean");
  }

  /// Comma-separated list; empty entries are dropped.
  std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    if (!has(key)) return used_.insert(key), fallback;
    std::vector<std::string> out;
    std::stringstream ss(get(key, ""));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
      if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
  }

  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const {
    if (!has(key)) return used_.insert(key), fallback;
    std::vector<double> out;
    for (const auto& s : get_list(key, {})) {
      try {
        out.push_back(std::stod(s));
      } catch (const std::exception&) {
        throw ConfigError("setting " + key + " has a non-numeric entry '" + s + "'");
      }
    }
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) const {
    if (!has(key)) return used_.insert(key), fallback;
    std::vector<std::size_t> out;
    for (double v : get_doubles(key, {})) {
      if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
        throw ConfigError("setting " + key + " must list non-negative integers");
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  /// Keys present but never read.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace marrow
