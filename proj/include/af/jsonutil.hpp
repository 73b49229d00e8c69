#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace af {

// Configuration problems carry the JSON path of the offending key so the
// CLI can print line/key diagnostics and exit with the config error code.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// View over a JSON object that tracks which keys were consumed. finish()
// rejects anything left over, so hyperparameter typos never pass silently.
class StrictJson {
public:
    StrictJson(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(path_ + ": expected a JSON object");
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    template <class T>
    void get(const char* key, T& target) {
        if (!j_.contains(key)) {
            return;
        }
        seen_.insert(key);
        try {
            target = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path_ + "." + key + ": " + e.what());
        }
    }

    template <class T>
    void require(const char* key, T& target) {
        if (!j_.contains(key)) {
            throw ConfigError(path_ + ": missing required key '" + std::string(key) + "'");
        }
        get(key, target);
    }

    const nlohmann::json* child(const char* key) {
        if (!j_.contains(key)) {
            return nullptr;
        }
        seen_.insert(key);
        return &j_.at(key);
    }

    std::string path(const char* key) const { return path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (seen_.find(it.key()) == seen_.end()) {
                throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
            }
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace af
