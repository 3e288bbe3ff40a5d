#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmrg/corpus.hpp"
#include "mmrg/denoiser.hpp"
#include "mmrg/merge_core.hpp"
#include "mmrg/schedule.hpp"

namespace mmrg {

// Mean inter-frame L2 distance divided by sqrt(d).
double motion_degree(const latent_video& v);

// Mean cosine similarity of frames 1..f-1 to frame 0.
double consistency(const latent_video& v);

// Cosine between the decoded net bump displacement (last - first frame) and
// the commanded direction; 0 when the decoded displacement vanishes.
double control_adherence(const latent_video& v, motion_command command);

struct sample_metrics {
    double motion_degree = 0.0;
    double consistency = 0.0;
    double control_adherence = 0.0;
};

sample_metrics measure(const latent_video& v, motion_command command);

struct eval_report {
    double motion_degree = 0.0;
    double consistency = 0.0;
    double control_adherence = 0.0;
    int n_samples = 0;
    std::vector<uint64_t> seed_set;
};

uint64_t seed_hash(std::span<const uint64_t> seeds);

// Produces sample i for the given condition and seed.
using sample_fn = std::function<latent_video(const cond_embedding& cond, uint64_t seed)>;

struct eval_plan {
    std::vector<motion_command> commands = {moving_commands.begin(), moving_commands.end()};
    magnitude_class magnitude = magnitude_class::low;
    std::vector<uint64_t> seeds;
    int threads = 1;
};

// Sample i uses commands[i % commands.size()] and seeds[i]. Per-sample work
// may run on worker threads; aggregation is in seed order.
eval_report eval_samples(const sample_fn& sample, int dim, const eval_plan& plan);

eval_report eval_model(const param_set& theta, const noise_schedule& sched, const eval_plan& plan, int steps,
                       double cfg_scale);

std::vector<uint64_t> seed_range(uint64_t first, int n);

struct taylor_report {
    std::vector<double> alpha_grid;
    std::vector<double> predicted;  // alpha * <grad D, delta>
    std::vector<double> measured;   // D(theta + alpha delta) - D(theta)
    double gamma_hat = 0.0;         // <delta, grad D> / |grad D|^2
    double cosine_alignment = 0.0;  // cos(delta, grad D)
    bool cosine_defined = true;
    double gradient_norm = 0.0;
    double d_at_theta = 0.0;
};

// Scalar objective over a flat parameter vector; must be deterministic.
using objective_fn = std::function<double(std::span<const double>)>;

// Central finite-difference gradient, one probe pair per coordinate.
std::vector<double> fd_gradient(const objective_fn& objective, std::span<const double> x, double step,
                                int threads = 1);

// First-order check of D along `delta` around theta, both flattened over the
// delta's names in lexicographic order.
taylor_report taylor_check(std::span<const double> theta, std::span<const double> delta, const objective_fn& D,
                           const std::vector<double>& alpha_grid, double fd_step = 1e-4, int threads = 1);

// Map-level form: flattens theta_pre over the delta's names, then calls
// `D(flat)` where `flat` follows the same order.
taylor_report taylor_check(const tensor_map& theta_pre, const delta_map& delta, const objective_fn& D,
                           const std::vector<double>& alpha_grid, double fd_step = 1e-4, int threads = 1);

std::vector<double> flatten(const tensor_map& m, const std::vector<std::string>& names);
std::vector<double> flatten(const delta_map& m);

} // namespace mmrg
