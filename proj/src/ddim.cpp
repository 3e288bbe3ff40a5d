#include "mmrg/ddim.hpp"

#include <cmath>

#include "mmrg/error.hpp"
#include "mmrg/rng.hpp"

namespace mmrg {

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) {
        throw config_error("sampler steps must lie in [1, T=" + std::to_string(T) + "], got " +
                           std::to_string(steps));
    }
    std::vector<int> ts;
    for (int i = steps; i >= 1; --i) {
        ts.push_back(static_cast<int>((static_cast<int64_t>(i) * T + steps / 2) / steps));
    }
    return ts;
}

mat_t guided_noise(const param_set& theta, const latent_video& z_t, int t, int T, const cond_embedding* cond,
                   double cfg_scale) {
    const mat_t eps_uncond = denoiser_forward(theta, z_t, t, T, nullptr);
    if (!cond || !theta.spec().has_adapter) {
        return eps_uncond;
    }
    const mat_t eps_cond = denoiser_forward(theta, z_t, t, T, cond);
    return eps_uncond + cfg_scale * (eps_cond - eps_uncond);
}

latent_video initial_noise(int frames, int dim, uint64_t seed) {
    counter_rng rng = counter_rng(seed).derive("ddim.init");
    latent_video z(frames, dim);
    for (Eigen::Index i = 0; i < z.data.size(); ++i) {
        z.data.data()[i] = rng.normal();
    }
    return z;
}

latent_video ddim_sample_with(const model_selector& select, const noise_schedule& sched, const cond_embedding* cond,
                              int steps, double cfg_scale, uint64_t seed) {
    const auto ts = ddim_timesteps(sched.T, steps);
    const auto& first = select(steps).spec();
    latent_video z = initial_noise(first.frames, first.dim, seed);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int step = steps - static_cast<int>(i);
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        const mat_t eps = guided_noise(select(step), z, t, sched.T, cond, cfg_scale);
        const double ab = sched.alpha_bar[t];
        const double ab_prev = sched.alpha_bar[t_prev];
        const mat_t x0 = (z.data - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
        z.data = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
        if (!z.data.allFinite()) {
            throw numeric_error("sampler state became non-finite at step " + std::to_string(step));
        }
    }
    return z;
}

latent_video ddim_sample(const param_set& theta, const noise_schedule& sched, const cond_embedding* cond, int steps,
                         double cfg_scale, uint64_t seed) {
    return ddim_sample_with([&](int) -> const param_set& { return theta; }, sched, cond, steps, cfg_scale, seed);
}

} // namespace mmrg
