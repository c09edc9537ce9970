#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "latentad/errors.hpp"

namespace latentad {

// Declarative experiment configuration: one flat key/value map ("vqvae.epochs"
// -> 12). Precedence, lowest to highest: profile defaults, config file,
// LATENTAD_* environment variables (dots spelled "__"), explicit --set pairs.
class Config {
public:
    static Config profile_defaults(const std::string& profile); // "desk" | "paper" | "paper_large"

    void merge_file(const std::string& path);
    void merge_env(const std::string& prefix = "LATENTAD_");
    void merge_kv(const std::string& key, const std::string& raw_value);

    bool has(const std::string& key) const { return values_.contains(key); }

    template <class T>
    T get(const std::string& key) const {
        if (!values_.contains(key)) throw ConfigError("missing config key: " + key);
        try {
            return values_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key has wrong type: " + key);
        }
    }

    template <class T>
    T get_or(const std::string& key, const T& fallback) const {
        if (!values_.contains(key)) return fallback;
        return get<T>(key);
    }

    void set(const std::string& key, nlohmann::json value) { values_[key] = std::move(value); }

    const nlohmann::json& resolved() const { return values_; }
    std::string dump() const { return values_.dump(2) + "\n"; }

    // Comma-separated ordering spec list, e.g. "raster:0,raster:1".
    std::vector<std::string> ordering_specs() const;

private:
    nlohmann::json values_ = nlohmann::json::object();
};

} // namespace latentad
