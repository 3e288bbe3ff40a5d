#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmrg/corpus.hpp"
#include "mmrg/linalg.hpp"
#include "mmrg/schedule.hpp"
#include "mmrg/tensor_store.hpp"

namespace mmrg {

enum class param_group { spatial, temporal, adapter };

// Architecture of the toy video denoiser:
//
//   per-frame spatial MLP (z_k, t) -> s_k                          spatial.*
//   adapter: f learned queries cross-attend the l cond tokens -> g_k,
//            u_k = W_proj [s_k ; g_k]                               adapter.*
//   x_k = u_k + sum_j c_j(t) W_j z_k + pos_k + W t                  temporal.skip, temporal.pos
//   r = x + gate(t) * attn(x), attention scores carry a frame bias  temporal.*
//   per-frame output head                                           spatial.head.*
//
// c(t) = [1, e(t)] with e the sinusoidal time embedding. Without an adapter
// u_k = s_k and any condition is ignored.
struct denoiser_spec {
    int frames = 8;
    int dim = 16;
    int hidden = 32;
    int time_dim = 8;
    bool has_adapter = false;

    struct param_info {
        std::string name;
        shape_t shape;
        param_group group;
    };

    std::vector<param_info> manifest() const;
    size_t param_count() const;
    void validate() const;

    // Recovers the architecture from tensor names and shapes.
    static denoiser_spec infer(const tensor_map& theta);

    denoiser_spec with_adapter(bool on) const {
        denoiser_spec s = *this;
        s.has_adapter = on;
        return s;
    }
    bool operator==(const denoiser_spec&) const = default;
};

param_group group_of(const std::string& name);

// Flat f64 parameter vector laid out in manifest order.
class param_set {
public:
    param_set() = default;
    explicit param_set(const denoiser_spec& spec);

    static param_set from_tensor_map(const tensor_map& theta);
    static param_set from_tensor_map(const tensor_map& theta, const denoiser_spec& spec);
    // Rounds to f32. `meta` is copied onto the result.
    tensor_map to_tensor_map(const meta_map& meta = {}) const;

    const denoiser_spec& spec() const { return spec_; }
    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    size_t size() const { return values_.size(); }

    std::span<double> slice(const std::string& name);
    std::span<const double> slice(const std::string& name) const;
    // Index range [begin, end) of a tensor inside values().
    std::pair<size_t, size_t> range_of(const std::string& name) const;

    bool operator==(const param_set& o) const { return spec_ == o.spec_ && values_ == o.values_; }

private:
    denoiser_spec spec_;
    std::vector<double> values_;
};

param_set init_params(const denoiser_spec& spec, uint64_t seed);

// Adds freshly initialised adapter tensors to a base-architecture model. The
// projection starts as [I 0] so the adapted model reproduces the base exactly.
param_set attach_adapter(const param_set& base, uint64_t seed);

vec_t time_embedding(int t, int T, int time_dim);

// Predicted noise (f x d). `cond` may be null (the learned null token is used
// when the model has an adapter).
mat_t denoiser_forward(const param_set& theta, const latent_video& z_t, int t, int T, const cond_embedding* cond);

// Mean squared noise-prediction error and its gradient, accumulated (+=) into
// `grad` (same layout as theta).
double denoiser_loss_grad(const param_set& theta, const latent_video& z_t, int t, int T, const cond_embedding* cond,
                          const mat_t& eps, std::span<double> grad);

double denoiser_loss(const param_set& theta, const latent_video& z_t, int t, int T, const cond_embedding* cond,
                     const mat_t& eps);

} // namespace mmrg
