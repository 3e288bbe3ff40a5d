#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mmrg/corpus.hpp"
#include "mmrg/denoiser.hpp"
#include "mmrg/schedule.hpp"

namespace mmrg {

// Diffusion timesteps visited by a `steps`-step sampler, from T down to >= 1.
// Entry i (0-based) is the timestep of denoising step (steps - i).
std::vector<int> ddim_timesteps(int T, int steps);

// eps_uncond + scale * (eps_cond - eps_uncond). The unconditional branch uses
// the null token; models without an adapter ignore the condition entirely.
mat_t guided_noise(const param_set& theta, const latent_video& z_t, int t, int T, const cond_embedding* cond,
                   double cfg_scale);

latent_video initial_noise(int frames, int dim, uint64_t seed);

// Picks the weights used at denoising step `step` (counted from `steps` down to 1).
using model_selector = std::function<const param_set&(int step)>;

// Deterministic (eta = 0) DDIM loop with classifier-free guidance.
latent_video ddim_sample_with(const model_selector& select, const noise_schedule& sched, const cond_embedding* cond,
                              int steps, double cfg_scale, uint64_t seed);

latent_video ddim_sample(const param_set& theta, const noise_schedule& sched, const cond_embedding* cond, int steps,
                         double cfg_scale, uint64_t seed);

} // namespace mmrg
