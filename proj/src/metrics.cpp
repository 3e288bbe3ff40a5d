#include "mmrg/metrics.hpp"

#include <cmath>
#include <thread>

#include "mmrg/ddim.hpp"
#include "mmrg/error.hpp"
#include "mmrg/rng.hpp"

namespace mmrg {

namespace {

// Runs body(i) for i in [0, n) over `threads` workers with a static
// interleaved split; callers write results by index.
template <class Body>
void parallel_for(size_t n, int threads, const Body& body) {
    const size_t workers = std::max<size_t>(1, std::min<size_t>(static_cast<size_t>(std::max(threads, 1)), n));
    if (workers == 1) {
        for (size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        for (size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (size_t i = w; i < n; i += workers) body(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void require_frames(const latent_video& v) {
    if (v.frames() < 2) {
        throw config_error("metrics need at least 2 frames");
    }
}

} // namespace

double motion_degree(const latent_video& v) {
    require_frames(v);
    double total = 0.0;
    for (int k = 0; k + 1 < v.frames(); ++k) {
        total += (v.data.row(k + 1) - v.data.row(k)).norm();
    }
    return total / (v.frames() - 1) / std::sqrt(static_cast<double>(v.dim()));
}

double consistency(const latent_video& v) {
    require_frames(v);
    const double n0 = v.data.row(0).norm();
    if (n0 == 0.0) {
        throw numeric_error("consistency undefined: frame 0 has zero norm");
    }
    double total = 0.0;
    for (int k = 1; k < v.frames(); ++k) {
        const double nk = v.data.row(k).norm();
        total += nk == 0.0 ? 0.0 : v.data.row(k).dot(v.data.row(0)) / (nk * n0);
    }
    return total / (v.frames() - 1);
}

double control_adherence(const latent_video& v, motion_command command) {
    require_frames(v);
    if (command == motion_command::still) {
        throw config_error("control adherence needs a moving command");
    }
    const auto& code = latent_code::for_dim(v.dim());
    const vec_t first = v.data.row(0).transpose();
    const vec_t last = v.data.row(v.frames() - 1).transpose();
    const Eigen::Vector2d disp = code.decode_position(last) - code.decode_position(first);
    const double n = disp.norm();
    if (n < 1e-12) {
        return 0.0;
    }
    return disp.dot(direction_of(command)) / n;
}

sample_metrics measure(const latent_video& v, motion_command command) {
    return {motion_degree(v), consistency(v), control_adherence(v, command)};
}

uint64_t seed_hash(std::span<const uint64_t> seeds) {
    uint64_t h = fnv1a64("seeds");
    for (auto s : seeds) {
        h = mix64(h ^ s);
    }
    return h;
}

std::vector<uint64_t> seed_range(uint64_t first, int n) {
    std::vector<uint64_t> s;
    for (int i = 0; i < n; ++i) {
        s.push_back(first + static_cast<uint64_t>(i));
    }
    return s;
}

eval_report eval_samples(const sample_fn& sample, int dim, const eval_plan& plan) {
    if (plan.seeds.empty()) {
        throw config_error("evaluation needs at least one seed");
    }
    if (plan.commands.empty()) {
        throw config_error("evaluation needs at least one command");
    }
    std::vector<sample_metrics> per(plan.seeds.size());
    parallel_for(plan.seeds.size(), plan.threads, [&](size_t i) {
        const motion_command cmd = plan.commands[i % plan.commands.size()];
        const cond_embedding cond = make_condition(cmd, plan.magnitude, dim);
        per[i] = measure(sample(cond, plan.seeds[i]), cmd);
    });
    eval_report r;
    r.n_samples = static_cast<int>(per.size());
    r.seed_set = plan.seeds;
    for (const auto& m : per) {
        r.motion_degree += m.motion_degree;
        r.consistency += m.consistency;
        r.control_adherence += m.control_adherence;
    }
    r.motion_degree /= r.n_samples;
    r.consistency /= r.n_samples;
    r.control_adherence /= r.n_samples;
    if (!std::isfinite(r.motion_degree) || !std::isfinite(r.consistency) || !std::isfinite(r.control_adherence)) {
        throw numeric_error("evaluation produced non-finite metrics");
    }
    return r;
}

eval_report eval_model(const param_set& theta, const noise_schedule& sched, const eval_plan& plan, int steps,
                       double cfg_scale) {
    return eval_samples(
        [&](const cond_embedding& cond, uint64_t seed) {
            return ddim_sample(theta, sched, &cond, steps, cfg_scale, seed);
        },
        theta.spec().dim, plan);
}

std::vector<double> fd_gradient(const objective_fn& objective, std::span<const double> x, double step,
                                int threads) {
    std::vector<double> grad(x.size());
    const size_t workers = static_cast<size_t>(std::max(threads, 1));
    std::vector<std::vector<double>> scratch(workers, std::vector<double>(x.begin(), x.end()));
    // Each worker owns one scratch copy; coordinate i goes to worker i % workers.
    parallel_for(workers, threads, [&](size_t w) {
        auto& probe = scratch[w];
        for (size_t i = w; i < x.size(); i += workers) {
            const double orig = probe[i];
            probe[i] = orig + step;
            const double plus = objective(probe);
            probe[i] = orig - step;
            const double minus = objective(probe);
            probe[i] = orig;
            grad[i] = (plus - minus) / (2.0 * step);
        }
    });
    return grad;
}

taylor_report taylor_check(std::span<const double> theta, std::span<const double> delta, const objective_fn& D,
                           const std::vector<double>& alpha_grid, double fd_step, int threads) {
    if (theta.size() != delta.size()) {
        throw config_error("theta and delta have different lengths");
    }
    if (!(fd_step > 0.0)) {
        throw config_error("finite-difference step must be positive");
    }
    taylor_report r;
    r.alpha_grid = alpha_grid;
    r.d_at_theta = D(theta);
    if (!std::isfinite(r.d_at_theta)) {
        throw numeric_error("objective is not finite at theta");
    }
    const auto grad = fd_gradient(D, theta, fd_step, threads);

    double g_dot_d = 0.0, g2 = 0.0, d2 = 0.0;
    for (size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) {
            throw numeric_error("objective is not finite near theta");
        }
        g_dot_d += grad[i] * delta[i];
        g2 += grad[i] * grad[i];
        d2 += delta[i] * delta[i];
    }
    r.gradient_norm = std::sqrt(g2);
    if (g2 > 0.0) {
        r.gamma_hat = g_dot_d / g2;
    }
    if (g2 > 0.0 && d2 > 0.0) {
        r.cosine_alignment = g_dot_d / std::sqrt(g2 * d2);
    } else {
        r.cosine_defined = false;
    }

    std::vector<double> moved(theta.size());
    for (double a : alpha_grid) {
        for (size_t i = 0; i < theta.size(); ++i) {
            moved[i] = theta[i] + a * delta[i];
        }
        const double d = D(moved);
        if (!std::isfinite(d)) {
            throw numeric_error("objective is not finite along delta");
        }
        r.predicted.push_back(a * g_dot_d);
        r.measured.push_back(d - r.d_at_theta);
    }
    return r;
}

std::vector<double> flatten(const tensor_map& m, const std::vector<std::string>& names) {
    std::vector<double> out;
    for (const auto& n : names) {
        const auto& t = m.at(n);
        out.insert(out.end(), t.data.begin(), t.data.end());
    }
    return out;
}

std::vector<double> flatten(const delta_map& m) {
    std::vector<double> out;
    for (const auto& [_, t] : m.entries) {
        out.insert(out.end(), t.data.begin(), t.data.end());
    }
    return out;
}

taylor_report taylor_check(const tensor_map& theta_pre, const delta_map& delta, const objective_fn& D,
                           const std::vector<double>& alpha_grid, double fd_step, int threads) {
    if (delta.role == delta_role::con_full) {
        throw config_error("taylor_check needs a direction, not a full weight map");
    }
    std::vector<std::string> names;
    for (const auto& [name, t] : delta.entries) {
        if (theta_pre.at(name).shape != t.shape) {
            throw format_error("delta shape mismatch for '" + name + "'");
        }
        names.push_back(name);
    }
    const auto theta = flatten(theta_pre, names);
    const auto dir = flatten(delta);
    return taylor_check(theta, dir, D, alpha_grid, fd_step, threads);
}

} // namespace mmrg
