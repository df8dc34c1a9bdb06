#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "eqdisc/mlp.hpp"
#include "eqdisc/types.hpp"

namespace eqdisc {

inline constexpr const char* kCheckpointFormat = "eqdisc-checkpoint-v1";

inline nlohmann::json checkpoint_to_json(const MLPSpec& spec, const ParamVector& params) {
    if (params.size() != spec.param_count())
        throw invalid_input_error("checkpoint: parameter vector length mismatch");
    nlohmann::json j;
    j["format"] = kCheckpointFormat;
    j["input_dim"] = spec.input_dim;
    j["hidden"] = spec.hidden;
    j["output_dim"] = spec.output_dim;
    j["activation"] = "gelu_tanh";
    j["params"] = params;
    return j;
}

inline std::pair<MLPSpec, ParamVector> checkpoint_from_json(const nlohmann::json& j) {
    if (!j.contains("format") || j.at("format").get<std::string>() != kCheckpointFormat)
        throw invalid_input_error("checkpoint: missing or unsupported format tag");
    MLPSpec spec;
    spec.input_dim = j.at("input_dim").get<std::size_t>();
    spec.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    spec.output_dim = j.at("output_dim").get<std::size_t>();
    ParamVector params = j.at("params").get<ParamVector>();
    if (params.size() != spec.param_count())
        throw invalid_input_error("checkpoint: parameter count does not match the stated shape");
    return {spec, params};
}

inline void save_checkpoint(const std::string& path, const MLPSpec& spec,
                            const ParamVector& params) {
    std::ofstream out(path);
    if (!out) throw invalid_input_error("cannot open checkpoint for writing: " + path);
    out << checkpoint_to_json(spec, params).dump(2) << "\n";
}

inline std::pair<MLPSpec, ParamVector> load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw invalid_input_error("cannot open checkpoint: " + path);
    nlohmann::json j;
    in >> j;
    return checkpoint_from_json(j);
}

} // namespace eqdisc
