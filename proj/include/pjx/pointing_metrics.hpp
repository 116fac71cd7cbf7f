// Visual-pointing evaluation: exact Earth Mover's Distance between grid
// distributions, Spearman rank correlation, grid resampling, and the
// random-point / uniform-map baselines.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pjx/common.hpp"
#include "pjx/report.hpp"
#include "pjx/tensor.hpp"

namespace pjx {

// Published full-scale results for this architecture, kept for orientation;
// desk-scale runs are not expected to reproduce them.
namespace reference_scores {
inline constexpr double kPointingEmdVqa = 2.64;
inline constexpr double kPointingEmdAct = 2.54;
inline constexpr double kPointingRankVqa = 0.3423;
inline constexpr double kPointingRankAct = 0.3933;
}  // namespace reference_scores

namespace detail {

inline std::vector<double> unit_mass_or_throw(const Tensor& t, const char* which) {
    const double total = t.sum();
    if (std::fabs(total - 1.0) > 1e-6)
        throw ContractError(std::string("emd: ") + which + " mass is " + std::to_string(total) +
                            ", expected 1 within 1e-6");
    std::vector<double> out(t.values());
    for (double& v : out) v /= total;
    return out;
}

}  // namespace detail

// Exact optimal-transport cost between two unit-mass grids under Euclidean
// distance between cell centers. Shared mass at a cell is settled in place
// first (free under a metric ground cost); the remainder is solved by
// successive shortest paths with node potentials on the bipartite graph of
// nonzero supply and demand cells.
inline double emd(const Tensor& p, const Tensor& q, double cell_spacing = 1.0) {
    if (p.ndim() != 2 || q.ndim() != 2 || !p.same_shape(q))
        throw ShapeError("emd: grids must share a rank-2 shape, got " + shape_str(p.shape()) +
                         " vs " + shape_str(q.shape()));
    std::vector<double> pv = detail::unit_mass_or_throw(p, "first grid");
    std::vector<double> qv = detail::unit_mass_or_throw(q, "second grid");

    const std::size_t cols = p.extent(1);
    constexpr double kMassTol = 1e-15;

    struct Cell {
        std::size_t row, col;
        double mass;
    };
    std::vector<Cell> supply, demand;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double diff = pv[i] - qv[i];
        if (diff > kMassTol)
            supply.push_back({i / cols, i % cols, diff});
        else if (diff < -kMassTol)
            demand.push_back({i / cols, i % cols, -diff});
    }
    if (supply.empty() || demand.empty()) return 0.0;

    const std::size_t ns = supply.size(), nd = demand.size(), v = ns + nd;
    std::vector<double> cost(ns * nd);
    for (std::size_t i = 0; i < ns; ++i)
        for (std::size_t j = 0; j < nd; ++j) {
            const double dr = static_cast<double>(supply[i].row) - static_cast<double>(demand[j].row);
            const double dc = static_cast<double>(supply[i].col) - static_cast<double>(demand[j].col);
            cost[i * nd + j] = cell_spacing * std::sqrt(dr * dr + dc * dc);
        }

    std::vector<double> flow(ns * nd, 0.0);
    std::vector<double> potential(v, 0.0);
    std::vector<double> dist(v);
    std::vector<char> settled(v);
    std::vector<std::int32_t> parent(v);  // supply node feeding this demand / demand behind this supply
    const double inf = std::numeric_limits<double>::infinity();

    double supply_left = 0.0, demand_left = 0.0;
    for (const Cell& c : supply) supply_left += c.mass;
    for (const Cell& c : demand) demand_left += c.mass;

    // the two sides agree to ~1e-15 after renormalization; leftover dust below
    // this threshold contributes < 1e-10 to the cost on any grid in range
    constexpr double kStopTol = 1e-12;
    while (supply_left > kStopTol && demand_left > kStopTol) {
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(settled.begin(), settled.end(), 0);
        std::fill(parent.begin(), parent.end(), -1);
        for (std::size_t i = 0; i < ns; ++i)
            if (supply[i].mass > kMassTol) dist[i] = 0.0;

        std::size_t reached = v;
        while (true) {
            std::size_t u = v;
            double best = inf;
            for (std::size_t n = 0; n < v; ++n)
                if (!settled[n] && dist[n] < best) {
                    best = dist[n];
                    u = n;
                }
            if (u == v) break;  // nothing reachable
            settled[u] = 1;
            if (u >= ns && demand[u - ns].mass > kMassTol) {
                reached = u;
                break;
            }
            if (u < ns) {
                // forward residual arcs to every demand
                for (std::size_t j = 0; j < nd; ++j) {
                    const std::size_t w = ns + j;
                    if (settled[w]) continue;
                    const double rc = cost[u * nd + j] + potential[u] - potential[w];
                    if (dist[u] + rc < dist[w]) {
                        dist[w] = dist[u] + rc;
                        parent[w] = static_cast<std::int32_t>(u);
                    }
                }
            } else {
                // backward residual arcs along existing flow
                const std::size_t j = u - ns;
                for (std::size_t i = 0; i < ns; ++i) {
                    if (settled[i] || flow[i * nd + j] <= kMassTol) continue;
                    const double rc = -cost[i * nd + j] + potential[u] - potential[i];
                    if (dist[u] + rc < dist[i]) {
                        dist[i] = dist[u] + rc;
                        parent[i] = static_cast<std::int32_t>(u);
                    }
                }
            }
        }
        if (reached == v)
            throw ContractError("emd: remaining demand unreachable; mass imbalance of " +
                                std::to_string(supply_left));

        // bottleneck along the alternating path
        double bottleneck = demand[reached - ns].mass;
        std::size_t node = reached;
        while (parent[node] >= 0) {
            const std::size_t prev = static_cast<std::size_t>(parent[node]);
            if (node >= ns)
                ;  // forward arc, unbounded capacity
            else
                bottleneck = std::min(bottleneck, flow[node * nd + (prev - ns)]);
            node = prev;
        }
        bottleneck = std::min(bottleneck, supply[node].mass);

        node = reached;
        while (parent[node] >= 0) {
            const std::size_t prev = static_cast<std::size_t>(parent[node]);
            if (node >= ns)
                flow[prev * nd + (node - ns)] += bottleneck;
            else
                flow[node * nd + (prev - ns)] -= bottleneck;
            node = prev;
        }
        supply[node].mass -= bottleneck;
        demand[reached - ns].mass -= bottleneck;
        supply_left -= bottleneck;
        demand_left -= bottleneck;

        const double horizon = dist[reached];
        for (std::size_t n = 0; n < v; ++n) potential[n] += std::min(dist[n], horizon);
    }

    double total = 0.0;
    for (std::size_t i = 0; i < ns; ++i)
        for (std::size_t j = 0; j < nd; ++j) total += flow[i * nd + j] * cost[i * nd + j];
    return total;
}

// Closed-form 1-D transport cost at unit spacing: sum of absolute CDF
// differences. Independent check of the flow solver.
inline double emd_1d_oracle(const Tensor& p, const Tensor& q) {
    if (p.size() != q.size())
        throw ShapeError("emd_1d_oracle: lengths " + std::to_string(p.size()) + " vs " +
                         std::to_string(q.size()));
    const std::vector<double> pv = detail::unit_mass_or_throw(p, "first vector");
    const std::vector<double> qv = detail::unit_mass_or_throw(q, "second vector");
    double cdf = 0.0, total = 0.0;
    for (std::size_t i = 0; i + 1 < pv.size(); ++i) {
        cdf += pv[i] - qv[i];
        total += std::fabs(cdf);
    }
    return total;
}

// Midranks: ties share the average of the ranks they cover (1-based).
inline std::vector<double> midranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

// Spearman correlation with midranks over the flattened grids. A constant
// grid has zero rank variance and no defined correlation.
inline std::optional<double> rank_correlation(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError("rank_correlation: shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::vector<double> ra = midranks(a.values());
    const std::vector<double> rb = midranks(b.values());
    const double n = static_cast<double>(ra.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return sab / std::sqrt(saa * sbb);
}

// Area-weighted pooling to a target x target grid followed by renormalization
// to unit mass. The identity at native resolution is exact. Cell overlaps are
// computed in integer units of N*target so fractions are reproducible.
inline Tensor resample(const Tensor& grid, std::size_t target = 14) {
    if (grid.ndim() != 2)
        throw ShapeError("resample: expected rank-2 grid, got " + shape_str(grid.shape()));
    if (target < 1) throw ContractError("resample: target must be >= 1");
    const std::size_t rows = grid.extent(0), cols = grid.extent(1);
    if (rows == target && cols == target) return grid;

    auto overlaps = [target](std::size_t in_cells) {
        // overlaps[r][i] = fraction of input cell r covered by output cell i
        std::vector<std::vector<double>> f(in_cells, std::vector<double>(target, 0.0));
        for (std::size_t r = 0; r < in_cells; ++r) {
            const std::size_t lo = r * target, hi = (r + 1) * target;  // units of 1/(in*target)
            for (std::size_t i = 0; i < target; ++i) {
                const std::size_t olo = i * in_cells, ohi = (i + 1) * in_cells;
                const std::size_t a = std::max(lo, olo), b = std::min(hi, ohi);
                if (b > a) f[r][i] = static_cast<double>(b - a) / static_cast<double>(target);
            }
        }
        return f;
    };
    const auto frow = overlaps(rows);
    const auto fcol = overlaps(cols);

    Tensor out({target, target});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double m = grid.at(r, c);
            if (m == 0.0) continue;
            for (std::size_t i = 0; i < target; ++i) {
                if (frow[r][i] == 0.0) continue;
                for (std::size_t j = 0; j < target; ++j)
                    if (fcol[c][j] != 0.0) out.at(i, j) += m * frow[r][i] * fcol[c][j];
            }
        }
    const double total = out.sum();
    if (total > 0.0)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] /= total;
    return out;
}

inline Tensor baseline_uniform(std::size_t n, std::size_t m) {
    return Tensor({n, m}, 1.0 / static_cast<double>(n * m));
}

inline Tensor baseline_random_point(std::size_t n, std::size_t m, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t({n, m});
    t[rng.index(n * m)] = 1.0;
    return t;
}

struct PointingScore {
    MetricReport emd;
    MetricReport rank_correlation;
};

// Scores aligned prediction/ground-truth pairs: both maps are rescaled to
// target x target, then EMD and Spearman are computed per instance. Instances
// with an undefined correlation are excluded from that aggregate and counted.
inline PointingScore score_pointing(const std::map<std::string, Tensor>& predictions,
                                    const std::map<std::string, Tensor>& ground_truths,
                                    double cell_spacing = 1.0, std::size_t target = 14) {
    std::string missing;
    for (const auto& [id, t] : predictions)
        if (!ground_truths.count(id)) missing += missing.empty() ? id : ", " + id;
    for (const auto& [id, t] : ground_truths)
        if (!predictions.count(id)) missing += missing.empty() ? id : ", " + id;
    if (!missing.empty())
        throw ContractError("score_pointing: ids without a counterpart: " + missing);

    std::vector<std::pair<std::string, double>> emd_values, rank_values;
    std::size_t rank_excluded = 0;
    for (const auto& [id, pred] : predictions) {
        const Tensor p = resample(pred, target);
        const Tensor gt = resample(ground_truths.at(id), target);
        emd_values.emplace_back(id, emd(p, gt, cell_spacing));
        if (const auto rc = rank_correlation(p, gt))
            rank_values.emplace_back(id, *rc);
        else
            ++rank_excluded;
    }
    PointingScore score;
    score.emd = summarize("EMD", std::move(emd_values));
    score.rank_correlation = summarize("RankCorrelation", std::move(rank_values), rank_excluded);
    return score;
}

}  // namespace pjx
