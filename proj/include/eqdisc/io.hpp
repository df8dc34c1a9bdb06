#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eqdisc/types.hpp"

namespace eqdisc {

/// Write-then-rename so interrupted runs never leave truncated files.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        out << content;
        out.flush();
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw invalid_input_error("cannot open: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline std::string iso_timestamp() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

/// Provenance record written next to every run's outputs.
struct RunManifest {
    std::string config_hash;
    std::string tool_version;
    std::uint64_t master_seed = 0;
    std::string started_at;
    std::string finished_at;
    std::vector<std::pair<std::string, double>> stage_seconds;
    std::vector<std::string> outputs;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = "eqdisc-manifest-v1";
        j["config_hash"] = config_hash;
        j["tool_version"] = tool_version;
        j["master_seed"] = master_seed;
        j["started_at"] = started_at;
        j["finished_at"] = finished_at;
        for (const auto& [stage, seconds] : stage_seconds) j["stage_seconds"][stage] = seconds;
        j["outputs"] = outputs;
        return j;
    }
};

} // namespace eqdisc
