#include "mmrg/corpus.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>

#include "mmrg/error.hpp"
#include "mmrg/rng.hpp"

namespace mmrg {

namespace {

constexpr uint64_t code_seed = 0x6c6174656e74ULL;
constexpr uint64_t token_seed = 0x746f6b656e73ULL;
constexpr double start_jitter = 0.25;

mat_t gaussian_matrix(counter_rng& rng, int rows, int cols) {
    mat_t m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            m(i, j) = rng.normal();
        }
    }
    return m;
}

std::string clip_name(size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip.%05zu", i);
    return buf;
}

} // namespace

std::string to_string(motion_command c) {
    switch (c) {
    case motion_command::left: return "left";
    case motion_command::right: return "right";
    case motion_command::up: return "up";
    case motion_command::down: return "down";
    case motion_command::still: return "still";
    }
    return "still";
}

std::string to_string(magnitude_class m) {
    return m == magnitude_class::high ? "high" : "low";
}

motion_command parse_command(const std::string& s) {
    for (auto c : {motion_command::left, motion_command::right, motion_command::up, motion_command::down,
                   motion_command::still}) {
        if (s == to_string(c)) return c;
    }
    throw config_error("unknown motion command '" + s + "'");
}

magnitude_class parse_magnitude(const std::string& s) {
    if (s == "low") return magnitude_class::low;
    if (s == "high") return magnitude_class::high;
    throw config_error("unknown magnitude class '" + s + "'");
}

Eigen::Vector2d direction_of(motion_command c) {
    switch (c) {
    case motion_command::left: return {-1.0, 0.0};
    case motion_command::right: return {1.0, 0.0};
    case motion_command::up: return {0.0, 1.0};
    case motion_command::down: return {0.0, -1.0};
    case motion_command::still: return {0.0, 0.0};
    }
    return {0.0, 0.0};
}

cond_embedding make_condition(motion_command command, magnitude_class magnitude, int dim) {
    counter_rng table = counter_rng(token_seed).derive(static_cast<uint64_t>(dim));
    auto token = [&](const std::string& label) {
        counter_rng r = table.derive(label);
        vec_t v(dim);
        for (int i = 0; i < dim; ++i) {
            v(i) = r.normal();
        }
        return v;
    };
    cond_embedding c;
    c.command = command;
    c.magnitude = magnitude;
    c.tokens.resize(2, dim);
    c.tokens.row(0) = token("command." + to_string(command)).transpose();
    c.tokens.row(1) = token("magnitude." + to_string(magnitude)).transpose();
    return c;
}

const latent_code& latent_code::for_dim(int dim) {
    static std::mutex mu;
    static std::map<int, std::unique_ptr<latent_code>> cache;
    std::lock_guard lock(mu);
    auto& slot = cache[dim];
    if (!slot) {
        if (dim <= features) {
            throw config_error("latent dim must exceed " + std::to_string(features) + ", got " +
                               std::to_string(dim));
        }
        counter_rng rng = counter_rng(code_seed).derive(static_cast<uint64_t>(dim));
        mat_t q = Eigen::HouseholderQR<mat_t>(gaussian_matrix(rng, dim, dim)).householderQ();
        auto code = std::make_unique<latent_code>();
        code->dim = dim;
        code->basis = q.leftCols(features);
        code->appearance = q.rightCols(dim - features);
        vec_t w(dim - features);
        for (int i = 0; i < w.size(); ++i) {
            w(i) = rng.normal();
        }
        code->appearance_mean = code->appearance * (w.normalized() * appearance_norm);
        slot = std::move(code);
    }
    return *slot;
}

vec_t latent_code::bump_features(const Eigen::Vector2d& pos) const {
    vec_t phi(features);
    for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
            const double dx = pos.x() - (gx - 1);
            const double dy = pos.y() - (gy - 1);
            phi(gy * grid + gx) = std::exp(-(dx * dx + dy * dy) / (2.0 * bump_width * bump_width));
        }
    }
    return phi;
}

Eigen::Vector2d latent_code::decode_position(const Eigen::Ref<const vec_t>& frame) const {
    const vec_t phi = (basis.transpose() * frame).cwiseMax(0.0);
    const double mass = phi.sum();
    if (mass <= 1e-12) {
        return {0.0, 0.0};
    }
    Eigen::Vector2d c(0.0, 0.0);
    for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
            c += phi(gy * grid + gx) * Eigen::Vector2d(gx - 1, gy - 1);
        }
    }
    return c / mass;
}

void corpus_spec::validate() const {
    if (count < 1) throw config_error("corpus count must be >= 1");
    if (frames < 2) throw config_error("clips need at least 2 frames");
    if (!(motion_magnitude >= 0.0)) throw config_error("motion magnitude must be >= 0");
    latent_code::for_dim(dim);
}

std::vector<clip> gen_corpus(const corpus_spec& spec) {
    spec.validate();
    const auto& code = latent_code::for_dim(spec.dim);
    const int extra = spec.dim - latent_code::features;
    std::vector<clip> out;
    out.reserve(spec.count);
    for (int n = 0; n < spec.count; ++n) {
        counter_rng rng = counter_rng(spec.seed).derive(static_cast<uint64_t>(n));
        const motion_command cmd =
            spec.motion_magnitude > 0.0 ? moving_commands[rng.below(moving_commands.size())] : motion_command::still;
        const Eigen::Vector2d dir = direction_of(cmd);
        Eigen::Vector2d start = -dir * (spec.motion_magnitude * (spec.frames - 1) / 2.0);
        start.x() += (2.0 * rng.uniform() - 1.0) * start_jitter;
        start.y() += (2.0 * rng.uniform() - 1.0) * start_jitter;

        vec_t jitter(extra);
        for (int i = 0; i < extra; ++i) {
            jitter(i) = rng.normal() * latent_code::appearance_jitter;
        }
        const vec_t appearance = code.appearance_mean + code.appearance * jitter;

        clip c;
        c.conditioned = spec.conditioned;
        c.cond = make_condition(cmd, spec.label, spec.dim);
        c.video = latent_video(spec.frames, spec.dim);
        for (int k = 0; k < spec.frames; ++k) {
            const Eigen::Vector2d pos = start + dir * (spec.motion_magnitude * k);
            c.video.data.row(k) =
                (appearance + latent_code::bump_amplitude * code.basis * code.bump_features(pos)).transpose();
        }
        // Stored at f32 so a corpus survives the container round trip exactly.
        c.video.data = c.video.data.cast<float>().cast<double>();
        out.push_back(std::move(c));
    }
    return out;
}

tensor_map corpus_to_tensor_map(const std::vector<clip>& corpus, const corpus_spec& spec) {
    tensor_map m;
    m.meta["kind"] = "corpus";
    m.meta["count"] = std::to_string(corpus.size());
    m.meta["seed"] = std::to_string(spec.seed);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", spec.motion_magnitude);
    m.meta["motion_magnitude"] = buf;
    for (size_t i = 0; i < corpus.size(); ++i) {
        const auto& v = corpus[i].video.data;
        tensor t({v.rows(), v.cols()});
        for (Eigen::Index j = 0; j < v.size(); ++j) {
            t.data[j] = static_cast<float>(v.data()[j]);
        }
        const auto name = clip_name(i);
        m.entries.emplace(name, std::move(t));
        m.meta["label." + name] = to_string(corpus[i].cond.command) + ":" + to_string(corpus[i].cond.magnitude) +
                                  ":" + (corpus[i].conditioned ? "cond" : "uncond");
    }
    return m;
}

std::vector<clip> corpus_from_tensor_map(const tensor_map& m) {
    if (m.meta.count("kind") == 0 || m.meta.at("kind") != "corpus") {
        throw format_error("container is not a corpus");
    }
    std::vector<clip> out;
    for (const auto& [name, t] : m.entries) {
        if (t.shape.size() != 2) {
            throw format_error("corpus clip '" + name + "' is not 2-D");
        }
        auto it = m.meta.find("label." + name);
        if (it == m.meta.end()) {
            throw format_error("corpus clip '" + name + "' has no label");
        }
        const auto& label = it->second;
        const auto a = label.find(':');
        const auto b = label.find(':', a + 1);
        if (a == std::string::npos || b == std::string::npos) {
            throw format_error("malformed label '" + label + "'");
        }
        clip c;
        const int frames = static_cast<int>(t.shape[0]);
        const int dim = static_cast<int>(t.shape[1]);
        c.video = latent_video(frames, dim);
        for (size_t j = 0; j < t.data.size(); ++j) {
            c.video.data.data()[j] = t.data[j];
        }
        c.cond = make_condition(parse_command(label.substr(0, a)), parse_magnitude(label.substr(a + 1, b - a - 1)), dim);
        c.conditioned = label.substr(b + 1) == "cond";
        out.push_back(std::move(c));
    }
    return out;
}

} // namespace mmrg
