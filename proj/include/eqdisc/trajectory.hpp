#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "eqdisc/types.hpp"

namespace eqdisc {

/// Time-indexed samples of system state. Times are strictly increasing;
/// fixed-rate producers construct them as t0 + k*dt (multiplication, no
/// accumulation drift).
struct Trajectory {
    std::vector<double> times;
    std::vector<Vec> states;
    std::size_t dim = 0;

    std::size_t size() const { return times.size(); }

    void validate() const {
        if (times.size() != states.size())
            throw invalid_input_error("trajectory: times/states length mismatch");
        for (std::size_t i = 0; i < states.size(); ++i) {
            if (states[i].size() != dim)
                throw invalid_input_error("trajectory: state dimension mismatch at sample " +
                                          std::to_string(i));
            if (i > 0 && !(times[i] > times[i - 1]))
                throw invalid_input_error("trajectory: times not strictly increasing");
        }
    }
};

/// Full-precision decimal rendering (17 significant digits round-trips doubles).
inline std::string format_full(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

/// CSV with header "t,x0,x1,...".
inline std::string trajectory_to_csv(const Trajectory& traj) {
    std::ostringstream out;
    out << "t";
    for (std::size_t c = 0; c < traj.dim; ++c) out << ",x" << c;
    out << "\n";
    for (std::size_t i = 0; i < traj.size(); ++i) {
        out << format_full(traj.times[i]);
        for (std::size_t c = 0; c < traj.dim; ++c) out << "," << format_full(traj.states[i][c]);
        out << "\n";
    }
    return out.str();
}

inline Trajectory trajectory_from_csv(std::istream& in) {
    Trajectory traj;
    std::string line;
    if (!std::getline(in, line)) throw invalid_input_error("trajectory csv: empty input");
    std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (cols < 2 || line.substr(0, 1) != "t")
        throw invalid_input_error("trajectory csv: bad header: " + line);
    traj.dim = cols - 1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        if (!std::getline(row, cell, ',')) throw invalid_input_error("trajectory csv: bad row");
        traj.times.push_back(std::stod(cell));
        Vec state;
        state.reserve(traj.dim);
        while (std::getline(row, cell, ',')) state.push_back(std::stod(cell));
        if (state.size() != traj.dim)
            throw invalid_input_error("trajectory csv: row width mismatch");
        traj.states.push_back(std::move(state));
    }
    traj.validate();
    return traj;
}

inline Trajectory trajectory_from_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw invalid_input_error("cannot open trajectory csv: " + path);
    return trajectory_from_csv(in);
}

} // namespace eqdisc
