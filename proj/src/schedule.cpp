#include "mmrg/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mmrg/error.hpp"

namespace mmrg {

namespace {
// Continuous-time linear beta(s) from 0.1 to 20 over s in [0, 1]; the
// discrete per-step beta is beta(s) / T so any T spans the same noise range.
constexpr double beta_min = 0.1;
constexpr double beta_max = 20.0;
constexpr double beta_clip = 0.999;
constexpr double cosine_offset = 0.008;
} // namespace

schedule_kind parse_schedule_kind(const std::string& s) {
    if (s == "linear_beta" || s == "linear") return schedule_kind::linear_beta;
    if (s == "cosine") return schedule_kind::cosine;
    throw config_error("unknown schedule kind '" + s + "'");
}

std::string to_string(schedule_kind kind) {
    return kind == schedule_kind::cosine ? "cosine" : "linear_beta";
}

double noise_schedule::alpha(int t) const {
    if (t < 1 || t > T) {
        throw config_error("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    }
    return alpha_bar[t] / alpha_bar[t - 1];
}

noise_schedule build_schedule(int T, schedule_kind kind) {
    if (T < 1) {
        throw config_error("schedule needs T >= 1, got " + std::to_string(T));
    }
    noise_schedule s;
    s.T = T;
    s.alpha_bar.assign(T + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        double beta = 0.0;
        if (kind == schedule_kind::linear_beta) {
            const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
            beta = (beta_min + (beta_max - beta_min) * frac) / T;
        } else {
            auto f = [&](double u) {
                const double c = std::cos((u + cosine_offset) / (1.0 + cosine_offset) * std::numbers::pi / 2.0);
                return c * c;
            };
            beta = 1.0 - f(static_cast<double>(t) / T) / f(static_cast<double>(t - 1) / T);
        }
        beta = std::clamp(beta, 1e-8, beta_clip);
        s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
    }
    return s;
}

latent_video forward_noise(const latent_video& z0, int t, const mat_t& eps, const noise_schedule& sched) {
    if (t < 0 || t > sched.T) {
        throw config_error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.T) + "]");
    }
    if (eps.rows() != z0.data.rows() || eps.cols() != z0.data.cols()) {
        throw config_error("noise shape does not match latent shape");
    }
    const double ab = sched.alpha_bar[t];
    return latent_video(std::sqrt(ab) * z0.data + std::sqrt(1.0 - ab) * eps);
}

} // namespace mmrg
