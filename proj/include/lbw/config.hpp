// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>

#include "json.hpp"
#include "lbw/error.hpp"

namespace lbw {

/// Flat `key = value` text config. `#` starts a comment; blank lines ignored.
class KvConfig {
public:
    static KvConfig parse(const std::string& text) {
        KvConfig c;
        std::istringstream in(text);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                if (b == std::string::npos) return std::string();
                const auto e = s.find_last_not_of(" \t\r");
                return s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            LBW_REQUIRE(eq != std::string::npos, ErrorCode::parse_error,
                        "config line " + std::to_string(line_no) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            LBW_REQUIRE(!key.empty(), ErrorCode::parse_error, "config line " + std::to_string(line_no) + ": empty key");
            c.values_[key] = trim(line.substr(eq + 1));
        }
        return c;
    }

    static KvConfig load(const std::string& path) {
        std::ifstream in(path);
        LBW_REQUIRE(in.good(), ErrorCode::io_error, "cannot open config " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    template <class V>
    void set(const std::string& key, V value) {
        std::ostringstream os;
        os.precision(17);
        os << value;
        values_[key] = os.str();
    }

    template <class V>
    V get(const std::string& key, V fallback) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if constexpr (std::is_same_v<V, std::string>) {
            return it->second;
        } else if constexpr (std::is_same_v<V, bool>) {
            const auto& s = it->second;
            if (s == "1" || s == "true" || s == "yes") return true;
            if (s == "0" || s == "false" || s == "no") return false;
            throw Error(ErrorCode::parse_error, "config key " + key + ": expected a boolean");
        } else {
            V v{};
            const auto& s = it->second;
            const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
            LBW_REQUIRE(res.ec == std::errc{} && res.ptr == s.data() + s.size(), ErrorCode::parse_error,
                        "config key " + key + ": bad value '" + s + "'");
            return v;
        }
    }

    std::string dump() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

/// One JSON object per line.
class MetricsLog {
public:
    MetricsLog() = default;
    explicit MetricsLog(const std::string& path) : out_(path, std::ios::trunc) {
        LBW_REQUIRE(out_.good(), ErrorCode::io_error, "cannot write metrics log " + path);
    }

    void write(const nlohmann::json& record) {
        if (out_.is_open()) out_ << record.dump() << '\n' << std::flush;
    }

private:
    std::ofstream out_;
};

}  // namespace lbw
