// Score report shapes shared by the pointing and text metrics.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace pjx {

struct MetricReport {
    std::string metric;
    std::size_t n = 0;
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t excluded_count = 0;
    bool single_instance = false;
    bool available = true;  // false for declared-but-unimplemented metrics
    std::vector<std::pair<std::string, double>> per_instance;
};

// Mean and standard error (sample std / sqrt(n)); n == 1 is flagged and gets
// a standard error of 0 by convention.
inline MetricReport summarize(std::string metric, std::vector<std::pair<std::string, double>> values,
                              std::size_t excluded = 0) {
    MetricReport r;
    r.metric = std::move(metric);
    r.per_instance = std::move(values);
    r.n = r.per_instance.size();
    r.excluded_count = excluded;
    if (r.n == 0) return r;
    double sum = 0.0;
    for (const auto& [id, v] : r.per_instance) sum += v;
    r.mean = sum / static_cast<double>(r.n);
    if (r.n == 1) {
        r.single_instance = true;
        return r;
    }
    double sq = 0.0;
    for (const auto& [id, v] : r.per_instance) sq += (v - r.mean) * (v - r.mean);
    const double sample_std = std::sqrt(sq / static_cast<double>(r.n - 1));
    r.std_error = sample_std / std::sqrt(static_cast<double>(r.n));
    return r;
}

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& [id, v] : r.per_instance) per.push_back({{"id", id}, {"value", v}});
    nlohmann::json j{{"metric", r.metric},
                     {"n", r.n},
                     {"mean", r.mean},
                     {"std_error", r.std_error},
                     {"excluded_count", r.excluded_count},
                     {"per_instance", per}};
    if (r.single_instance) j["single_instance"] = true;
    if (!r.available) j["available"] = false;
    return j;
}

}  // namespace pjx
