#pragma once

#include <string>
#include <vector>

#include "mmrg/linalg.hpp"

namespace mmrg {

enum class schedule_kind { linear_beta, cosine };

schedule_kind parse_schedule_kind(const std::string& s);
std::string to_string(schedule_kind kind);

// Cumulative signal coefficients: alpha_bar[0] = 1 > alpha_bar[1] > ... > alpha_bar[T] > 0.
struct noise_schedule {
    int T = 0;
    std::vector<double> alpha_bar;

    // Per-step alpha_t = alpha_bar[t] / alpha_bar[t-1], for 1 <= t <= T.
    double alpha(int t) const;
};

noise_schedule build_schedule(int T, schedule_kind kind = schedule_kind::linear_beta);

// f x d latent clip; rows are frames.
struct latent_video {
    mat_t data;

    latent_video() = default;
    explicit latent_video(mat_t m) : data(std::move(m)) {}
    latent_video(int frames, int dim) : data(mat_t::Zero(frames, dim)) {}

    int frames() const { return static_cast<int>(data.rows()); }
    int dim() const { return static_cast<int>(data.cols()); }
    bool operator==(const latent_video& o) const {
        return data.rows() == o.data.rows() && data.cols() == o.data.cols() && data == o.data;
    }
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
latent_video forward_noise(const latent_video& z0, int t, const mat_t& eps, const noise_schedule& sched);

} // namespace mmrg
