#include "mmrg/trainer.hpp"

#include <cmath>

#include "mmrg/error.hpp"
#include "mmrg/rng.hpp"

namespace mmrg {

namespace {

struct draw {
    size_t clip_index;
    int t;
    mat_t eps;
    bool drop_cond;
};

draw make_draw(counter_rng& rng, const std::vector<clip>& corpus, const noise_schedule& sched, double dropout) {
    draw d;
    d.clip_index = rng.below(corpus.size());
    d.t = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(sched.T)));
    const auto& v = corpus[d.clip_index].video.data;
    d.eps.resize(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < d.eps.size(); ++i) {
        d.eps.data()[i] = rng.normal();
    }
    d.drop_cond = rng.uniform() < dropout;
    return d;
}

const cond_embedding* cond_for(const clip& c, bool drop) {
    return c.conditioned && !drop ? &c.cond : nullptr;
}

} // namespace

trainable_set parse_trainable(const std::string& s) {
    if (s == "all") return trainable_set::all;
    if (s == "adapter_and_temporal") return trainable_set::adapter_and_temporal;
    throw config_error("unknown trainable set '" + s + "'");
}

std::string to_string(trainable_set t) {
    return t == trainable_set::all ? "all" : "adapter_and_temporal";
}

double evaluate_loss(const param_set& theta, const std::vector<clip>& corpus, const noise_schedule& sched,
                     uint64_t seed, int draws) {
    if (corpus.empty()) {
        throw config_error("corpus is empty");
    }
    counter_rng rng = counter_rng(seed).derive("eval-loss");
    double total = 0.0;
    for (int i = 0; i < draws; ++i) {
        const draw d = make_draw(rng, corpus, sched, 0.0);
        const auto& c = corpus[d.clip_index];
        const latent_video zt = forward_noise(c.video, d.t, d.eps, sched);
        total += denoiser_loss(theta, zt, d.t, sched.T, cond_for(c, false), d.eps);
    }
    return total / draws;
}

train_result train_from(const param_set& init, const std::vector<clip>& corpus, const noise_schedule& sched,
                        const train_config& config) {
    if (corpus.empty()) {
        throw config_error("corpus is empty");
    }
    if (config.batch < 1 || config.steps < 0 || !(config.lr > 0.0)) {
        throw config_error("invalid training config (batch >= 1, steps >= 0, lr > 0)");
    }
    const auto& spec = init.spec();
    if (corpus.front().video.frames() != spec.frames || corpus.front().video.dim() != spec.dim) {
        throw config_error("corpus clip shape does not match the denoiser");
    }

    std::vector<uint8_t> trainable(init.size(), 1);
    if (config.trainable == trainable_set::adapter_and_temporal) {
        size_t off = 0;
        for (const auto& info : spec.manifest()) {
            const auto n = static_cast<size_t>(shape_numel(info.shape));
            const bool on = info.group != param_group::spatial;
            std::fill(trainable.begin() + off, trainable.begin() + off + n, on ? 1 : 0);
            off += n;
        }
    }

    train_result result;
    result.params = init;
    result.initial_loss = evaluate_loss(init, corpus, sched, config.seed, config.eval_draws);

    counter_rng rng = counter_rng(config.seed).derive("train");
    std::vector<double> grad(init.size());
    auto values = result.params.values();
    for (int step = 0; step < config.steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double batch_loss = 0.0;
        for (int b = 0; b < config.batch; ++b) {
            const draw d = make_draw(rng, corpus, sched, config.cond_dropout);
            const auto& c = corpus[d.clip_index];
            const latent_video zt = forward_noise(c.video, d.t, d.eps, sched);
            batch_loss += denoiser_loss_grad(result.params, zt, d.t, sched.T, cond_for(c, d.drop_cond), d.eps, grad);
        }
        if (!std::isfinite(batch_loss)) {
            throw numeric_error("training diverged at step " + std::to_string(step) + " (loss is not finite)");
        }
        const double scale = config.lr / config.batch;
        for (size_t i = 0; i < values.size(); ++i) {
            if (trainable[i]) {
                values[i] -= scale * grad[i];
            }
        }
    }
    for (auto& v : values) {
        v = static_cast<float>(v);
        if (!std::isfinite(v)) {
            throw numeric_error("training produced non-finite weights");
        }
    }
    result.final_loss = evaluate_loss(result.params, corpus, sched, config.seed, config.eval_draws);
    return result;
}

train_result train(const denoiser_spec& spec, const std::vector<clip>& corpus, const noise_schedule& sched,
                   const train_config& config) {
    return train_from(init_params(spec, config.seed), corpus, sched, config);
}

} // namespace mmrg
