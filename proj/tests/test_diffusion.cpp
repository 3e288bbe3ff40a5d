#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mmrg/corpus.hpp"
#include "mmrg/ddim.hpp"
#include "mmrg/denoiser.hpp"
#include "mmrg/error.hpp"
#include "mmrg/metrics.hpp"
#include "mmrg/rng.hpp"
#include "mmrg/schedule.hpp"
#include "mmrg/trainer.hpp"
#include "support.hpp"

using namespace mmrg;

namespace {

corpus_spec small_corpus(double m, bool conditioned, uint64_t seed, int count = 128) {
    corpus_spec c;
    c.count = count;
    c.frames = 4;
    c.dim = 12;
    c.motion_magnitude = m;
    c.conditioned = conditioned;
    c.label = conditioned ? magnitude_class::low : magnitude_class::high;
    c.seed = seed;
    return c;
}

// Small model pretrained once and shared by the tests below.
const param_set& pretrained_small() {
    static const param_set p = [] {
        const auto sched = build_schedule(20);
        train_config tc;
        tc.lr = 0.1;
        tc.steps = 1500;
        tc.seed = 3;
        return train(test::small_spec(), gen_corpus(small_corpus(0.25, false, 1)), sched, tc).params;
    }();
    return p;
}

const param_set& adapted_small() {
    static const param_set p = [] {
        const auto sched = build_schedule(20);
        train_config tc;
        tc.lr = 0.1;
        tc.steps = 300;
        tc.seed = 5;
        tc.trainable = trainable_set::adapter_and_temporal;
        return train_from(attach_adapter(pretrained_small(), 4), gen_corpus(small_corpus(0.05, true, 2)), sched, tc)
            .params;
    }();
    return p;
}

double max_rel_error(param_set p, const latent_video& z, int t, int T, const cond_embedding* cond, const mat_t& eps,
                     double h) {
    std::vector<double> g(p.size(), 0.0);
    denoiser_loss_grad(p, z, t, T, cond, eps, g);
    double worst = 0.0;
    auto v = p.values();
    for (size_t i = 0; i < v.size(); ++i) {
        const double o = v[i];
        v[i] = o + h;
        const double up = denoiser_loss(p, z, t, T, cond, eps);
        v[i] = o - h;
        const double down = denoiser_loss(p, z, t, T, cond, eps);
        v[i] = o;
        const double fd = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6}));
    }
    return worst;
}

} // namespace

TEST_CASE("schedule") {
    for (auto kind : {schedule_kind::linear_beta, schedule_kind::cosine}) {
        const auto one = build_schedule(1, kind);
        REQUIRE(one.alpha_bar.size() == 2);
        CHECK(one.alpha_bar[0] == 1.0);
        CHECK(one.alpha_bar[1] < 1.0);
        CHECK(one.alpha_bar[1] > 0.0);
        CHECK(one.alpha(1) == one.alpha_bar[1]);
        for (int T : {2, 10, 50, 1000}) {
            const auto s = build_schedule(T, kind);
            REQUIRE(s.alpha_bar.size() == static_cast<size_t>(T + 1));
            CHECK(s.alpha_bar[0] == 1.0);
            for (int t = 1; t <= T; ++t) {
                CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
                CHECK(s.alpha(t) > 0.0);
                CHECK(s.alpha(t) < 1.0);
            }
            CHECK(s.alpha_bar[T] > 0.0);
        }
    }
    const auto s = build_schedule(50);
    CHECK(s.T == 50);
    CHECK(s.alpha_bar[50] < 1e-4);
    CHECK_THROWS_AS(build_schedule(0), config_error);
}

TEST_CASE("forward_noise") {
    const auto sched = build_schedule(50);
    counter_rng rng(1);
    latent_video z0(3, 5);
    mat_t eps(3, 5);
    for (Eigen::Index i = 0; i < z0.data.size(); ++i) {
        z0.data.data()[i] = rng.normal();
        eps.data()[i] = rng.normal();
    }
    CHECK(forward_noise(z0, 0, eps, sched) == z0);
    const latent_video zero(3, 5);
    const auto zt = forward_noise(zero, 20, eps, sched);
    CHECK((zt.data - std::sqrt(1 - sched.alpha_bar[20]) * eps).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS(forward_noise(z0, 51, eps, sched));
    CHECK_THROWS(forward_noise(z0, 3, mat_t::Zero(2, 5), sched));
    for (int t = 0; t <= 50; ++t) {
        const double a = std::sqrt(sched.alpha_bar[t]);
        const double b = std::sqrt(1 - sched.alpha_bar[t]);
        CHECK(a * a + b * b == doctest::Approx(1.0).epsilon(1e-15));
    }
}

TEST_CASE("forward_noise variance over 10^4 draws") {
    const auto sched = build_schedule(50);
    const latent_video z0(mat_t::Constant(2, 3, 0.7));
    for (int t : {5, 25, 50}) {
        counter_rng rng(100 + t);
        const int n = 10000;
        Eigen::ArrayXXd sum = Eigen::ArrayXXd::Zero(2, 3), sq = Eigen::ArrayXXd::Zero(2, 3);
        for (int k = 0; k < n; ++k) {
            mat_t eps(2, 3);
            for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng.normal();
            const latent_video zt = forward_noise(z0, t, eps, sched);
            const auto z = zt.data.array();
            sum += z;
            sq += z * z;
        }
        const Eigen::ArrayXXd mean = sum / n;
        const Eigen::ArrayXXd var = sq / n - mean * mean;
        const double want = 1 - sched.alpha_bar[t];
        for (Eigen::Index i = 0; i < var.size(); ++i) CHECK(std::abs(var.data()[i] / want - 1) < 0.05);
    }
}

TEST_CASE("corpus") {
    corpus_spec still = small_corpus(0.0, false, 4, 8);
    for (const auto& c : gen_corpus(still)) {
        for (int k = 1; k < c.video.frames(); ++k) CHECK(c.video.data.row(k) == c.video.data.row(0));
        CHECK(motion_degree(c.video) == 0.0);
    }

    const auto a = gen_corpus(small_corpus(0.25, true, 9, 16));
    const auto b = gen_corpus(small_corpus(0.25, true, 9, 16));
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].video == b[i].video);

    CHECK_THROWS_AS(gen_corpus(small_corpus(-1.0, false, 1)), config_error);
    corpus_spec tiny = small_corpus(0.25, false, 1);
    tiny.dim = 8;
    CHECK_THROWS_AS(gen_corpus(tiny), config_error);
}

TEST_CASE("right-moving high-motion clips decode to increasing x") {
    corpus_spec spec = small_corpus(0.5, true, 21, 64);
    spec.frames = 8;
    spec.dim = 16;
    spec.label = magnitude_class::high;
    const auto& code = latent_code::for_dim(16);
    int seen = 0;
    for (const auto& c : gen_corpus(spec)) {
        if (c.cond.command != motion_command::right) continue;
        ++seen;
        for (int k = 1; k < c.video.frames(); ++k) {
            CHECK(code.decode_position(c.video.data.row(k).transpose()).x() >
                  code.decode_position(c.video.data.row(k - 1).transpose()).x());
        }
    }
    CHECK(seen > 0);
}

TEST_CASE("corpus serialisation") {
    const auto spec = small_corpus(0.25, true, 3, 5);
    const auto clips = gen_corpus(spec);
    const auto back = corpus_from_tensor_map(decode_container(encode_container(corpus_to_tensor_map(clips, spec))));
    REQUIRE(back.size() == clips.size());
    for (size_t i = 0; i < clips.size(); ++i) {
        CHECK(back[i].video == clips[i].video);
        CHECK(back[i].cond.command == clips[i].cond.command);
        CHECK(back[i].conditioned);
    }
}

TEST_CASE("denoiser shapes and zero weights") {
    for (bool adapter : {false, true}) {
        const auto spec = test::small_spec(adapter);
        const param_set zero(spec);
        counter_rng rng(2);
        latent_video z(spec.frames, spec.dim);
        for (Eigen::Index i = 0; i < z.data.size(); ++i) z.data.data()[i] = rng.normal();
        const auto cond = make_condition(motion_command::up, magnitude_class::low, spec.dim);
        const mat_t out = denoiser_forward(zero, z, 5, 20, &cond);
        CHECK(out.rows() == spec.frames);
        CHECK(out.cols() == spec.dim);
        CHECK(out.cwiseAbs().maxCoeff() == 0.0);
        CHECK(denoiser_forward(init_params(spec, 1), z, 5, 20, nullptr).rows() == spec.frames);
    }
}

TEST_CASE("manifest partitions into groups") {
    const auto spec = denoiser_spec{}.with_adapter(true);
    size_t total = 0;
    for (const auto& info : spec.manifest()) {
        total += static_cast<size_t>(shape_numel(info.shape));
        const bool is_adapter = info.name.rfind("adapter.", 0) == 0;
        CHECK(is_adapter == (info.group == param_group::adapter));
        CHECK(group_of(info.name) == info.group);
    }
    CHECK(total == spec.param_count());
    CHECK(spec.param_count() == 7632);
    CHECK(spec.with_adapter(false).param_count() == 6448);
    const auto theta = init_params(spec, 3).to_tensor_map({{"stage", "sft"}});
    CHECK(denoiser_spec::infer(theta) == spec);
}

TEST_CASE("attaching the adapter leaves the prediction unchanged") {
    const param_set base = init_params(test::small_spec(), 8);
    const param_set adapted = attach_adapter(base, 9);
    counter_rng rng(4);
    latent_video z(4, 12);
    for (Eigen::Index i = 0; i < z.data.size(); ++i) z.data.data()[i] = rng.normal();
    const mat_t a = denoiser_forward(base, z, 7, 20, nullptr);
    const mat_t b = denoiser_forward(adapted, z, 7, 20, nullptr);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("analytic gradient matches central differences") {
    for (bool adapter : {false, true}) {
        const auto spec = test::tiny_spec(adapter);
        param_set p = init_params(spec, 7);
        REQUIRE(p.size() <= 500);
        counter_rng rng(9);
        for (double& v : p.values()) v += 0.3 * rng.normal();
        latent_video z(spec.frames, spec.dim);
        mat_t eps(spec.frames, spec.dim);
        for (Eigen::Index i = 0; i < z.data.size(); ++i) {
            z.data.data()[i] = rng.normal();
            eps.data()[i] = rng.normal();
        }
        cond_embedding c;
        c.tokens = mat_t(2, spec.dim);
        for (Eigen::Index i = 0; i < c.tokens.size(); ++i) c.tokens.data()[i] = rng.normal();
        CHECK(max_rel_error(p, z, 7, 10, nullptr, eps, 1e-4) < 1e-3);
        CHECK(max_rel_error(p, z, 7, 10, &c, eps, 1e-4) < 1e-3);
    }
}

TEST_CASE("training") {
    const auto sched = build_schedule(20);
    const auto corpus = gen_corpus(small_corpus(0.25, false, 1, 32));
    train_config tc;
    tc.steps = 0;
    const param_set init = init_params(test::small_spec(), 6);
    CHECK(train_from(init, corpus, sched, tc).params == init);

    SUBCASE("freeze contract") {
        const param_set start = attach_adapter(pretrained_small(), 4);
        const param_set& after = adapted_small();
        for (const auto& info : start.spec().manifest()) {
            const auto a = start.slice(info.name);
            const auto b = after.slice(info.name);
            const bool same = std::equal(a.begin(), a.end(), b.begin());
            if (info.group == param_group::spatial) CHECK(same);
        }
        CHECK_FALSE(start == after);
    }
    SUBCASE("held-out loss halves during pretraining") {
        const auto held_out = gen_corpus(small_corpus(0.25, false, 77, 64));
        const double before = evaluate_loss(init_params(test::small_spec(), 3), held_out, sched, 1, 256);
        const double after = evaluate_loss(pretrained_small(), held_out, sched, 1, 256);
        CHECK(after < 0.5 * before);
    }
    SUBCASE("adapter responds to the condition") {
        const auto& theta = adapted_small();
        counter_rng rng(12);
        latent_video z(4, 12);
        for (Eigen::Index i = 0; i < z.data.size(); ++i) z.data.data()[i] = rng.normal();
        const auto cond = make_condition(motion_command::left, magnitude_class::low, 12);
        const mat_t with = denoiser_forward(theta, z, 10, 20, &cond);
        const mat_t without = denoiser_forward(theta, z, 10, 20, nullptr);
        CHECK((with - without).cwiseAbs().maxCoeff() > 0.0);
    }
}

TEST_CASE("DDIM sampling") {
    const auto sched = build_schedule(20);
    const auto& theta = adapted_small();
    const auto cond = make_condition(motion_command::right, magnitude_class::low, 12);
    counter_rng rng(13);
    latent_video z(4, 12);
    for (Eigen::Index i = 0; i < z.data.size(); ++i) z.data.data()[i] = rng.normal();

    CHECK((guided_noise(theta, z, 9, 20, &cond, 1.0) - denoiser_forward(theta, z, 9, 20, &cond))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    const mat_t e0 = guided_noise(theta, z, 9, 20, &cond, 0.0);
    const mat_t e1 = guided_noise(theta, z, 9, 20, &cond, 1.0);
    const mat_t e2 = guided_noise(theta, z, 9, 20, &cond, 2.0);
    CHECK(((e2 - e1) - (e1 - e0)).cwiseAbs().maxCoeff() < 1e-6);

    CHECK(ddim_sample(theta, sched, &cond, 20, 7.5, 4) == ddim_sample(theta, sched, &cond, 20, 7.5, 4));
    CHECK_FALSE(ddim_sample(theta, sched, &cond, 20, 7.5, 4) == ddim_sample(theta, sched, &cond, 20, 7.5, 5));
    CHECK_THROWS(ddim_sample(theta, sched, &cond, 21, 7.5, 4));

    const auto ts = ddim_timesteps(50, 10);
    CHECK(ts.front() == 50);
    CHECK(ts.back() >= 1);
    CHECK(std::is_sorted(ts.rbegin(), ts.rend()));
    CHECK(ddim_timesteps(20, 20).size() == 20);

    const auto high = make_condition(motion_command::up, magnitude_class::high, 12);
    double d = 0.0;
    for (uint64_t s = 0; s < 4; ++s) d += motion_degree(ddim_sample(pretrained_small(), sched, &high, 20, 7.5, s));
    CHECK(d / 4 > 0.0);
}
