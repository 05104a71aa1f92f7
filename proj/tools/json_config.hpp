#pragma once

// CLI11 config formatter for JSON files. Nested objects select subcommands,
// arrays become multi-value inputs, and the reserved "resolved" key is
// ignored on input (it carries the expanded configuration for reference).

#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace tvae_cli {

class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    return options_json(app, default_also).dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(input);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    std::vector<CLI::ConfigItem> items;
    collect(j, {}, items);
    return items;
  }

  /// Option values of `app` and its selected subcommands.
  static nlohmann::json options_json(const CLI::App* app, bool default_also) {
    nlohmann::json out = nlohmann::json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
      const std::string& name = opt->get_lnames().front();
      if (name == "help" || name == "config") continue;
      if (opt->count() == 0 && (!default_also || opt->get_default_str().empty())) continue;
      if (opt->get_type_size() == 0) {
        out[name] = opt->count() > 0 ? opt->as<bool>() : opt->get_default_str() == "true";
      } else if (opt->count() > 0 && (opt->get_expected_max() > 1 || opt->results().size() > 1)) {
        out[name] = opt->results();
      } else {
        out[name] = opt->count() > 0 ? opt->results().front() : opt->get_default_str();
      }
    }
    for (const CLI::App* sub : app->get_subcommands()) out[sub->get_name()] = options_json(sub, default_also);
    return out;
  }

 private:
  static void collect(const nlohmann::json& j, std::vector<std::string> parents,
                      std::vector<CLI::ConfigItem>& items) {
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (parents.empty() && key == "resolved") continue;
      if (value.is_object()) {
        auto p = parents;
        p.push_back(key);
        // marks the subcommand as present
        items.push_back({parents, key, {}});
        items.back().name = "++";
        items.back().parents = p;
        collect(value, p, items);
        items.push_back({p, "--", {}});
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
  }

  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }
};

}  // namespace tvae_cli
