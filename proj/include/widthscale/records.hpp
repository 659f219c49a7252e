#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "widthscale/errors.hpp"

namespace widthscale {

// Long-format metric row; (run_id, width, seed, step, metric) is unique.
struct MetricRow {
    std::string run_id;
    int width = 0;
    std::uint64_t seed = 0;
    long step = 0;
    std::string metric;
    double value = 0.0;

    friend bool operator==(const MetricRow& a, const MetricRow& b) {
        return a.run_id == b.run_id && a.width == b.width && a.seed == b.seed
               && a.step == b.step && a.metric == b.metric && a.value == b.value;
    }
};

struct RunRecord {
    std::vector<MetricRow> rows;

    void add(std::string run_id, int width, std::uint64_t seed, long step, std::string metric,
             double value) {
        rows.push_back({std::move(run_id), width, seed, step, std::move(metric), value});
    }

    void append(RunRecord other) {
        rows.insert(rows.end(), std::make_move_iterator(other.rows.begin()),
                    std::make_move_iterator(other.rows.end()));
    }

    // stable output order regardless of how cells were scheduled
    void sort_rows() {
        std::sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
            return std::tie(a.run_id, a.width, a.seed, a.step, a.metric)
                   < std::tie(b.run_id, b.width, b.seed, b.step, b.metric);
        });
    }
};

// 17 significant digits round-trip doubles exactly.
inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_csv(const std::string& path, const RunRecord& rec) {
    std::ofstream out(path, std::ios::binary);  // LF line endings on all platforms
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "run_id,width,seed,step,metric,value\n";
    for (const auto& r : rec.rows) {
        out << r.run_id << ',' << r.width << ',' << r.seed << ',' << r.step << ',' << r.metric
            << ',' << format_g17(r.value) << '\n';
    }
    if (!out) throw IoError("write failed for " + path);
}

inline RunRecord read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ": empty file");
    RunRecord rec;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        MetricRow r;
        std::string field;
        std::getline(ss, r.run_id, ',');
        std::getline(ss, field, ',');
        r.width = std::stoi(field);
        std::getline(ss, field, ',');
        r.seed = std::stoull(field);
        std::getline(ss, field, ',');
        r.step = std::stol(field);
        std::getline(ss, r.metric, ',');
        std::getline(ss, field, ',');
        r.value = std::stod(field);
        rec.rows.push_back(std::move(r));
    }
    return rec;
}

}  // namespace widthscale
