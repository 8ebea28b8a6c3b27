#pragma once

#include <vector>

#include <splatground/tensor.hpp>

namespace sg::losses {

// Injective assignment of K ground-truth instances to m >= K proposals.
struct MatchResult {
    std::vector<int> assignment; // size K: instance i -> proposal assignment[i]
    std::vector<int> unmatched;  // proposal indices left unassigned, ascending
    double total_cost = 0;
};

// Minimum-cost assignment on a row-major K x m matrix (K <= m), shortest
// augmenting path with potentials. Ties are broken toward the
// lexicographically smallest assignment (lowest proposal index first); the
// tie canonicalization is skipped for K*m > 2048 where it would dominate
// runtime and float costs make exact ties vanishingly rare.
MatchResult hungarian_assign(const std::vector<double>& cost, int k, int m);

} // namespace sg::losses
