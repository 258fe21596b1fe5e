#pragma once

// Reference implementations used to check the library: plain loops built
// directly from the definitions, sharing no code with the routines they
// check.

#include <cstddef>
#include <vector>

#include "cdd/denoiser.hpp"
#include "cdd/schedule.hpp"

namespace cdd::oracle {

using Matrix = std::vector<std::vector<double>>;

Matrix naive_matmul(const Matrix& a, const Matrix& b);

// Q_t assembled from the linear cumulative schedule, entry [to][from].
Matrix step_matrix(const ScheduleConfig& cfg, int t);
// Q_t ... Q_1 by repeated multiplication; identity at t = 0.
Matrix cumulative_matrix(const ScheduleConfig& cfg, int t);

// q(x_{t-1} | x_t, x0) by enumerating x_{t-1} with the brute-force matrices.
std::vector<double> posterior(const ScheduleConfig& cfg, int xt, int x0, int t);

double kl(const std::vector<double>& p, const std::vector<double>& q);

// exp(mean_i KL(p_i || mean p)) over one split.
double inception_score(const Matrix& rows);

// Exact sum over t of E_{x_t ~ q(x_t | x0)} of the per-step bound term of
// `model`, enumerating every corrupted state.
double exhaustive_bound(const Denoiser& model, const NoiseSchedule& s,
                        const std::vector<int>& x0, int cond);

}  // namespace cdd::oracle
