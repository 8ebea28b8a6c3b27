#include <splatground/hungarian.hpp>

#include <cmath>
#include <limits>

namespace sg::losses {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path assignment with dual potentials (1-based arrays,
// column 0 is the virtual source). Returns row match per column.
std::vector<int> solve_lap(const std::vector<double>& cost, int k, int m) {
    std::vector<double> u(static_cast<size_t>(k) + 1, 0), v(static_cast<size_t>(m) + 1, 0);
    std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
    for (int i = 1; i <= k; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(m) + 1, kInf);
        std::vector<char> used(static_cast<size_t>(m) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            int i0 = p[static_cast<size_t>(j0)];
            int j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                double cur = cost[static_cast<size_t>((i0 - 1) * m + (j - 1))] -
                             u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    return p;
}

double assignment_cost(const std::vector<double>& cost, int m, const std::vector<int>& sigma) {
    double t = 0;
    for (size_t i = 0; i < sigma.size(); ++i)
        t += cost[i * static_cast<size_t>(m) + static_cast<size_t>(sigma[i])];
    return t;
}

std::vector<int> sigma_from_lap(const std::vector<int>& p, int k, int m) {
    std::vector<int> sigma(static_cast<size_t>(k), -1);
    for (int j = 1; j <= m; ++j)
        if (p[static_cast<size_t>(j)] != 0) sigma[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
    return sigma;
}

double best_cost_of(const std::vector<double>& cost, int k, int m) {
    return assignment_cost(cost, m, sigma_from_lap(solve_lap(cost, k, m), k, m));
}

} // namespace

MatchResult hungarian_assign(const std::vector<double>& cost, int k, int m) {
    op_check(k <= m, "hungarian_assign", "K=" + std::to_string(k) + " exceeds m=" + std::to_string(m));
    op_check(static_cast<int>(cost.size()) == k * m, "hungarian_assign", "cost matrix size mismatch");
    for (double c : cost) op_check(std::isfinite(c), "hungarian_assign", "non-finite cost entry");

    MatchResult result;
    if (k == 0) {
        for (int j = 0; j < m; ++j) result.unmatched.push_back(j);
        return result;
    }

    std::vector<int> sigma = sigma_from_lap(solve_lap(cost, k, m), k, m);
    double best = assignment_cost(cost, m, sigma);

    if (k * m <= 2048) {
        // canonicalize to the lexicographically smallest optimal assignment:
        // fix rows in order, taking the lowest column that still permits an
        // optimal completion
        const double tol = 1e-9 * (1.0 + std::abs(best));
        std::vector<char> used(static_cast<size_t>(m), 0);
        double fixed = 0;
        for (int i = 0; i < k; ++i) {
            const int rows_left = k - i - 1;
            for (int j = 0; j < m; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                double remaining = 0;
                if (rows_left > 0) {
                    std::vector<double> sub;
                    sub.reserve(static_cast<size_t>(rows_left) * static_cast<size_t>(m - 1));
                    std::vector<int> cols;
                    for (int jj = 0; jj < m; ++jj)
                        if (!used[static_cast<size_t>(jj)] && jj != j) cols.push_back(jj);
                    for (int ii = i + 1; ii < k; ++ii)
                        for (int jj : cols)
                            sub.push_back(cost[static_cast<size_t>(ii * m + jj)]);
                    remaining = best_cost_of(sub, rows_left, static_cast<int>(cols.size()));
                }
                if (fixed + cost[static_cast<size_t>(i * m + j)] + remaining <= best + tol) {
                    sigma[static_cast<size_t>(i)] = j;
                    used[static_cast<size_t>(j)] = 1;
                    fixed += cost[static_cast<size_t>(i * m + j)];
                    break;
                }
            }
        }
        best = assignment_cost(cost, m, sigma);
    }

    result.assignment = sigma;
    result.total_cost = best;
    std::vector<char> taken(static_cast<size_t>(m), 0);
    for (int j : sigma) taken[static_cast<size_t>(j)] = 1;
    for (int j = 0; j < m; ++j)
        if (!taken[static_cast<size_t>(j)]) result.unmatched.push_back(j);
    return result;
}

} // namespace sg::losses
