#include "mmrg/denoiser.hpp"

#include <cmath>
#include <numbers>

#include "mmrg/error.hpp"
#include "mmrg/rng.hpp"

namespace mmrg {

namespace {

template <bool Const>
struct weight_views {
    using scalar = std::conditional_t<Const, const double, double>;
    using mmap = Eigen::Map<std::conditional_t<Const, const mat_t, mat_t>>;
    using vmap = Eigen::Map<std::conditional_t<Const, const vec_t, vec_t>>;

    mmap in_w{nullptr, 0, 0}, in_t{nullptr, 0, 0};
    vmap in_b{nullptr, 0};
    mmap mid_w{nullptr, 0, 0};
    vmap mid_b{nullptr, 0};
    mmap out_w{nullptr, 0, 0};
    vmap out_b{nullptr, 0};
    mmap pos{nullptr, 0, 0}, t_time{nullptr, 0, 0}, q{nullptr, 0, 0}, k{nullptr, 0, 0}, v{nullptr, 0, 0},
        o_w{nullptr, 0, 0};
    vmap o_b{nullptr, 0};
    mmap t_bias{nullptr, 0, 0};
    mmap t_gate{nullptr, 0, 0};
    mmap head_w{nullptr, 0, 0};
    vmap head_b{nullptr, 0};
    mmap skip{nullptr, 0, 0};
    mmap a_q{nullptr, 0, 0}, a_k{nullptr, 0, 0}, a_v{nullptr, 0, 0}, a_proj{nullptr, 0, 0};
    vmap a_proj_b{nullptr, 0};
    mmap a_null{nullptr, 0, 0};

    weight_views(scalar* p, const denoiser_spec& s) {
        const int d = s.dim, h = s.hidden, e = s.time_dim, f = s.frames;
        auto m = [&](mmap& dst, int r, int c) {
            new (&dst) mmap(p, r, c);
            p += static_cast<ptrdiff_t>(r) * c;
        };
        auto v_ = [&](vmap& dst, int n) {
            new (&dst) vmap(p, n);
            p += n;
        };
        // Must follow denoiser_spec::manifest() order.
        m(in_w, h, d);
        m(in_t, h, e);
        v_(in_b, h);
        m(mid_w, h, h);
        v_(mid_b, h);
        m(out_w, d, h);
        v_(out_b, d);
        m(pos, f, d);
        m(t_time, d, e);
        m(q, d, d);
        m(k, d, d);
        m(v, d, d);
        m(o_w, d, d);
        v_(o_b, d);
        m(t_bias, f, f);
        m(t_gate, d, e);
        m(skip, (e + 1) * d, d);
        m(head_w, d, d);
        v_(head_b, d);
        if (s.has_adapter) {
            m(a_q, f, d);
            m(a_k, d, d);
            m(a_v, d, d);
            m(a_proj, d, 2 * d);
            v_(a_proj_b, d);
            m(a_null, 1, d);
        }
    }
};

struct forward_cache {
    vec_t e;
    mat_t A1, H1, A2, H2, S;
    mat_t C, Kc, Vc, Pa, SG;
    mat_t U, X, Q, K, V, P, O, A, R, Eps;
    vec_t gate;
    bool null_cond = false;
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

mat_t silu(const mat_t& a) {
    return a.unaryExpr([](double x) { return x * sigmoid(x); });
}

mat_t silu_grad(const mat_t& a) {
    return a.unaryExpr([](double x) {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
    });
}

mat_t softmax_rows(const mat_t& s) {
    mat_t p(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double mx = s.row(i).maxCoeff();
        p.row(i) = (s.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

// dS = P * (dP - rowsum(P * dP)).
mat_t softmax_rows_backward(const mat_t& p, const mat_t& dp) {
    mat_t ds = p.cwiseProduct(dp);
    const vec_t row_dot = ds.rowwise().sum();
    ds -= p.cwiseProduct(row_dot.replicate(1, p.cols()));
    return ds;
}

void forward(const weight_views<true>& w, const denoiser_spec& s, const latent_video& z, int t, int T,
             const cond_embedding* cond, forward_cache& c) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(s.dim));
    c.e = time_embedding(t, T, s.time_dim);

    const vec_t tin = w.in_t * c.e + w.in_b;
    c.A1 = z.data * w.in_w.transpose();
    c.A1.rowwise() += tin.transpose();
    c.H1 = silu(c.A1);
    c.A2 = c.H1 * w.mid_w.transpose();
    c.A2.rowwise() += w.mid_b.transpose();
    c.H2 = silu(c.A2);
    c.S = c.H2 * w.out_w.transpose();
    c.S.rowwise() += w.out_b.transpose();

    if (s.has_adapter) {
        c.null_cond = cond == nullptr;
        if (cond) {
            if (cond->tokens.cols() != s.dim || cond->tokens.rows() < 1) {
                throw config_error("condition tokens do not match latent dim");
            }
            c.C = cond->tokens;
        } else {
            c.C = w.a_null;
        }
        c.Kc = c.C * w.a_k.transpose();
        c.Vc = c.C * w.a_v.transpose();
        c.Pa = softmax_rows((w.a_q * c.Kc.transpose()) * inv_sqrt_d);
        c.SG.resize(s.frames, 2 * s.dim);
        c.SG.leftCols(s.dim) = c.S;
        c.SG.rightCols(s.dim) = c.Pa * c.Vc;
        c.U = c.SG * w.a_proj.transpose();
        c.U.rowwise() += w.a_proj_b.transpose();
    } else {
        c.U = c.S;
    }
    // Time-mixed linear skip: sum_j c_j(t) z W_j^T with c = [1, e(t)].
    for (int j = 0; j <= s.time_dim; ++j) {
        const double cj = j == 0 ? 1.0 : c.e(j - 1);
        c.U += cj * (z.data * w.skip.middleRows(static_cast<Eigen::Index>(j) * s.dim, s.dim).transpose());
    }

    const vec_t tt = w.t_time * c.e;
    c.X = c.U + w.pos;
    c.X.rowwise() += tt.transpose();
    c.Q = c.X * w.q.transpose();
    c.K = c.X * w.k.transpose();
    c.V = c.X * w.v.transpose();
    c.P = softmax_rows((c.Q * c.K.transpose()) * inv_sqrt_d + w.t_bias);
    c.O = c.P * c.V;
    c.A = c.O * w.o_w.transpose();
    c.A.rowwise() += w.o_b.transpose();
    c.gate = vec_t::Ones(s.dim) + w.t_gate * c.e;
    c.R = c.X + c.A * c.gate.asDiagonal();
    c.Eps = c.R * w.head_w.transpose();
    c.Eps.rowwise() += w.head_b.transpose();
}

void backward(const weight_views<true>& w, weight_views<false>& g, const denoiser_spec& s, const latent_video& z,
              const forward_cache& c, const mat_t& dEps) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(s.dim));

    g.head_w += dEps.transpose() * c.R;
    g.head_b += dEps.colwise().sum().transpose();
    const mat_t dR = dEps * w.head_w;

    g.t_gate += dR.cwiseProduct(c.A).colwise().sum().transpose() * c.e.transpose();
    const mat_t dA = dR * c.gate.asDiagonal();
    g.o_w += dA.transpose() * c.O;
    g.o_b += dA.colwise().sum().transpose();
    const mat_t dO = dA * w.o_w;
    mat_t dX = dR;

    const mat_t dP = dO * c.V.transpose();
    const mat_t dV = c.P.transpose() * dO;
    const mat_t dScores = softmax_rows_backward(c.P, dP);
    g.t_bias += dScores;
    const mat_t dSc = dScores * inv_sqrt_d;
    const mat_t dQ = dSc * c.K;
    const mat_t dK = dSc.transpose() * c.Q;
    g.q += dQ.transpose() * c.X;
    g.k += dK.transpose() * c.X;
    g.v += dV.transpose() * c.X;
    dX += dQ * w.q + dK * w.k + dV * w.v;

    g.pos += dX;
    g.t_time += dX.colwise().sum().transpose() * c.e.transpose();
    const mat_t& dU = dX;
    const mat_t dSkip = dU.transpose() * z.data;
    for (int j = 0; j <= s.time_dim; ++j) {
        const double cj = j == 0 ? 1.0 : c.e(j - 1);
        g.skip.middleRows(static_cast<Eigen::Index>(j) * s.dim, s.dim) += cj * dSkip;
    }

    mat_t dS;
    if (s.has_adapter) {
        const mat_t dSG = dU * w.a_proj;
        g.a_proj += dU.transpose() * c.SG;
        g.a_proj_b += dU.colwise().sum().transpose();
        dS = dSG.leftCols(s.dim);
        const mat_t dG = dSG.rightCols(s.dim);
        const mat_t dPa = dG * c.Vc.transpose();
        const mat_t dVc = c.Pa.transpose() * dG;
        const mat_t dSa = softmax_rows_backward(c.Pa, dPa) * inv_sqrt_d;
        g.a_q += dSa * c.Kc;
        const mat_t dKc = dSa.transpose() * w.a_q;
        g.a_k += dKc.transpose() * c.C;
        g.a_v += dVc.transpose() * c.C;
        if (c.null_cond) {
            g.a_null += (dKc * w.a_k + dVc * w.a_v).colwise().sum();
        }
    } else {
        dS = dU;
    }

    g.out_w += dS.transpose() * c.H2;
    g.out_b += dS.colwise().sum().transpose();
    const mat_t dA2 = (dS * w.out_w).cwiseProduct(silu_grad(c.A2));
    g.mid_w += dA2.transpose() * c.H1;
    g.mid_b += dA2.colwise().sum().transpose();
    const mat_t dA1 = (dA2 * w.mid_w).cwiseProduct(silu_grad(c.A1));
    g.in_w += dA1.transpose() * z.data;
    const vec_t dA1_sum = dA1.colwise().sum().transpose();
    g.in_b += dA1_sum;
    g.in_t += dA1_sum * c.e.transpose();
}

void check_input(const param_set& theta, const latent_video& z) {
    const auto& s = theta.spec();
    if (z.frames() != s.frames || z.dim() != s.dim) {
        throw config_error("latent shape " + std::to_string(z.frames()) + "x" + std::to_string(z.dim()) +
                           " does not match denoiser " + std::to_string(s.frames) + "x" + std::to_string(s.dim));
    }
}

} // namespace

param_group group_of(const std::string& name) {
    if (name.rfind("adapter.", 0) == 0) return param_group::adapter;
    if (name.rfind("temporal.", 0) == 0) return param_group::temporal;
    return param_group::spatial;
}

std::vector<denoiser_spec::param_info> denoiser_spec::manifest() const {
    const int64_t d = dim, h = hidden, e = time_dim, f = frames;
    std::vector<param_info> m = {
        {"spatial.in.weight", {h, d}, param_group::spatial},
        {"spatial.in.time", {h, e}, param_group::spatial},
        {"spatial.in.bias", {h}, param_group::spatial},
        {"spatial.mid.weight", {h, h}, param_group::spatial},
        {"spatial.mid.bias", {h}, param_group::spatial},
        {"spatial.out.weight", {d, h}, param_group::spatial},
        {"spatial.out.bias", {d}, param_group::spatial},
        {"temporal.pos", {f, d}, param_group::temporal},
        {"temporal.time", {d, e}, param_group::temporal},
        {"temporal.query", {d, d}, param_group::temporal},
        {"temporal.key", {d, d}, param_group::temporal},
        {"temporal.value", {d, d}, param_group::temporal},
        {"temporal.out.weight", {d, d}, param_group::temporal},
        {"temporal.out.bias", {d}, param_group::temporal},
        {"temporal.bias", {f, f}, param_group::temporal},
        {"temporal.gate", {d, e}, param_group::temporal},
        {"temporal.skip", {e + 1, d, d}, param_group::temporal},
        {"spatial.head.weight", {d, d}, param_group::spatial},
        {"spatial.head.bias", {d}, param_group::spatial},
    };
    if (has_adapter) {
        m.push_back({"adapter.queries", {f, d}, param_group::adapter});
        m.push_back({"adapter.key", {d, d}, param_group::adapter});
        m.push_back({"adapter.value", {d, d}, param_group::adapter});
        m.push_back({"adapter.proj.weight", {d, 2 * d}, param_group::adapter});
        m.push_back({"adapter.proj.bias", {d}, param_group::adapter});
        m.push_back({"adapter.null", {1, d}, param_group::adapter});
    }
    return m;
}

size_t denoiser_spec::param_count() const {
    size_t n = 0;
    for (const auto& p : manifest()) {
        n += static_cast<size_t>(shape_numel(p.shape));
    }
    return n;
}

void denoiser_spec::validate() const {
    if (frames < 2) throw config_error("denoiser needs at least 2 frames");
    if (dim < 1 || hidden < 1) throw config_error("denoiser dims must be positive");
    if (time_dim < 2 || time_dim % 2 != 0) throw config_error("time embedding dim must be even and >= 2");
}

denoiser_spec denoiser_spec::infer(const tensor_map& theta) {
    auto shape = [&](const char* name) -> const shape_t& {
        auto it = theta.entries.find(name);
        if (it == theta.entries.end()) {
            throw format_error(std::string("checkpoint lacks denoiser tensor '") + name + "'");
        }
        return it->second.shape;
    };
    const auto& in_w = shape("spatial.in.weight");
    const auto& in_t = shape("spatial.in.time");
    const auto& pos = shape("temporal.pos");
    if (in_w.size() != 2 || in_t.size() != 2 || pos.size() != 2) {
        throw format_error("unexpected denoiser tensor rank");
    }
    denoiser_spec s;
    s.hidden = static_cast<int>(in_w[0]);
    s.dim = static_cast<int>(in_w[1]);
    s.time_dim = static_cast<int>(in_t[1]);
    s.frames = static_cast<int>(pos[0]);
    s.has_adapter = theta.contains("adapter.queries");
    s.validate();
    return s;
}

param_set::param_set(const denoiser_spec& spec) : spec_(spec), values_(spec.param_count(), 0.0) {
    spec_.validate();
}

param_set param_set::from_tensor_map(const tensor_map& theta) {
    return from_tensor_map(theta, denoiser_spec::infer(theta));
}

param_set param_set::from_tensor_map(const tensor_map& theta, const denoiser_spec& spec) {
    param_set p(spec);
    const auto manifest = spec.manifest();
    if (theta.entries.size() != manifest.size()) {
        throw format_error("checkpoint has " + std::to_string(theta.entries.size()) + " tensors, denoiser expects " +
                           std::to_string(manifest.size()));
    }
    size_t off = 0;
    for (const auto& info : manifest) {
        auto it = theta.entries.find(info.name);
        if (it == theta.entries.end()) {
            throw format_error("checkpoint lacks denoiser tensor '" + info.name + "'");
        }
        if (it->second.shape != info.shape) {
            throw format_error("tensor '" + info.name + "' has shape [" + shape_to_string(it->second.shape) +
                               "], expected [" + shape_to_string(info.shape) + "]");
        }
        for (float v : it->second.data) {
            p.values_[off++] = v;
        }
    }
    return p;
}

tensor_map param_set::to_tensor_map(const meta_map& meta) const {
    tensor_map m;
    m.meta = meta;
    size_t off = 0;
    for (const auto& info : spec_.manifest()) {
        tensor t(info.shape);
        for (auto& v : t.data) {
            v = static_cast<float>(values_[off++]);
            if (!std::isfinite(v)) {
                throw numeric_error("non-finite weight in '" + info.name + "'");
            }
        }
        m.entries.emplace(info.name, std::move(t));
    }
    return m;
}

std::pair<size_t, size_t> param_set::range_of(const std::string& name) const {
    size_t off = 0;
    for (const auto& info : spec_.manifest()) {
        const auto n = static_cast<size_t>(shape_numel(info.shape));
        if (info.name == name) {
            return {off, off + n};
        }
        off += n;
    }
    throw format_error("denoiser has no tensor '" + name + "'");
}

std::span<double> param_set::slice(const std::string& name) {
    auto [b, e] = range_of(name);
    return std::span<double>(values_).subspan(b, e - b);
}

std::span<const double> param_set::slice(const std::string& name) const {
    auto [b, e] = range_of(name);
    return std::span<const double>(values_).subspan(b, e - b);
}

param_set init_params(const denoiser_spec& spec, uint64_t seed) {
    param_set p(spec);
    const counter_rng root(seed);
    for (const auto& info : spec.manifest()) {
        auto dst = p.slice(info.name);
        counter_rng rng = root.derive(info.name);
        double std_dev = 0.0;
        const double fan_in = static_cast<double>(info.shape.back());
        if (info.name == "adapter.proj.weight" || info.name == "temporal.skip" ||
            info.name == "spatial.head.weight") {
            // Identity blocks; the adapter projection starts as [I 0], a no-op.
            const auto cols = static_cast<size_t>(info.shape.back());
            for (size_t i = 0; i < static_cast<size_t>(spec.dim); ++i) {
                dst[i * cols + i] = 1.0;
            }
            continue;
        }
        if (info.name == "adapter.null" || info.name == "temporal.bias" || info.name == "temporal.gate" || info.shape.size() == 1) {
            continue;
        }
        if (info.name == "temporal.pos") {
            std_dev = 0.1;
        } else if (info.name == "adapter.queries") {
            std_dev = 1.0;
        } else if (info.name == "temporal.time") {
            std_dev = 0.1 / std::sqrt(fan_in);
        } else if (info.name == "temporal.out.weight") {
            std_dev = 0.5 / std::sqrt(fan_in);
        } else {
            std_dev = 1.0 / std::sqrt(fan_in);
        }
        for (auto& v : dst) {
            v = static_cast<float>(rng.normal() * std_dev);
        }
    }
    return p;
}

param_set attach_adapter(const param_set& base, uint64_t seed) {
    if (base.spec().has_adapter) {
        throw config_error("model already has an adapter");
    }
    const param_set fresh = init_params(base.spec().with_adapter(true), seed);
    param_set out = fresh;
    for (const auto& info : base.spec().manifest()) {
        auto src = base.slice(info.name);
        auto dst = out.slice(info.name);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return out;
}

vec_t time_embedding(int t, int T, int time_dim) {
    const double s = static_cast<double>(t) / static_cast<double>(T);
    vec_t e(time_dim);
    for (int i = 0; i < time_dim / 2; ++i) {
        const double w = std::numbers::pi * s * (i + 1);
        e(2 * i) = std::sin(w);
        e(2 * i + 1) = std::cos(w);
    }
    return e;
}

mat_t denoiser_forward(const param_set& theta, const latent_video& z_t, int t, int T, const cond_embedding* cond) {
    check_input(theta, z_t);
    const weight_views<true> w(theta.values().data(), theta.spec());
    forward_cache c;
    forward(w, theta.spec(), z_t, t, T, cond, c);
    return c.Eps;
}

double denoiser_loss(const param_set& theta, const latent_video& z_t, int t, int T, const cond_embedding* cond,
                     const mat_t& eps) {
    const mat_t pred = denoiser_forward(theta, z_t, t, T, cond);
    return (pred - eps).squaredNorm() / static_cast<double>(pred.size());
}

double denoiser_loss_grad(const param_set& theta, const latent_video& z_t, int t, int T, const cond_embedding* cond,
                          const mat_t& eps, std::span<double> grad) {
    check_input(theta, z_t);
    if (grad.size() != theta.size()) {
        throw config_error("gradient buffer does not match parameter count");
    }
    const weight_views<true> w(theta.values().data(), theta.spec());
    weight_views<false> g(grad.data(), theta.spec());
    forward_cache c;
    forward(w, theta.spec(), z_t, t, T, cond, c);
    const mat_t diff = c.Eps - eps;
    const double n = static_cast<double>(diff.size());
    backward(w, g, theta.spec(), z_t, c, diff * (2.0 / n));
    return diff.squaredNorm() / n;
}

} // namespace mmrg
