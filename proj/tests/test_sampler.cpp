#include <doctest.h>

#include <cmath>
#include <random>

#include "guidpaint/error.hpp"
#include "guidpaint/sampler.hpp"

using namespace guidpaint;

namespace {

Tensor normal(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n;
    Tensor t(s);
    for (auto& v : t.values()) v = scale * n(rng);
    return t;
}

GaussianMixture line_mixture() {
    GaussianMixture g;
    g.weights = {0.5, 0.5};
    g.means = {Tensor::vector({-1.0}), Tensor::vector({1.0})};
    g.sigmas = {0.3, 0.3};
    return g;
}

// Mixture oracle with everything a sampling context needs.
struct Oracle {
    GaussianMixture gmm;
    NoiseSchedule sched;
    SkipSequence skip;
    MixtureDenoiser den;
    MixtureClassifier cls;
    GuidanceConfig cfg;

    explicit Oracle(GaussianMixture g, int T = 100, std::vector<int> stages = {})
        : gmm(g),
          sched(NoiseSchedule::linear(T)),
          skip(stages.empty() ? SkipSequence::full(T) : SkipSequence::build(T, stages)),
          den(g, sched),
          cls(g) {
        cfg.labels = {1};
        cfg.t_stop_comp = T / 2;
    }
    SamplerContext ctx() const { return SamplerContext{den, &cls, sched, skip, cfg}; }
};

}  // namespace

TEST_CASE("forward_noise") {
    const auto sched = NoiseSchedule::linear(100);
    const Tensor x0 = Tensor::vector({0.5, -0.25});
    const Tensor z = forward_noise(x0, 30, sched, Tensor(x0.shape()));
    CHECK(z[0] == doctest::Approx(std::sqrt(sched.alpha_bar(30)) * 0.5));

    const auto quarter = NoiseSchedule::linear(1, 0.75, 0.75);
    CHECK(forward_noise(Tensor::vector({1.0}), 1, quarter, Tensor::vector({1.0}))[0] ==
          doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-14));
    CHECK(forward_noise(Tensor::vector({1.0}), 1, quarter, Tensor::vector({1.0}))[0] == doctest::Approx(1.366).epsilon(1e-3));

    SUBCASE("Monte-Carlo moments") {
        const int t = 40, n = 100000;
        std::mt19937_64 rng(1);
        const double ab = sched.alpha_bar(t);
        double sum = 0.0, sq = 0.0;
        for (int i = 0; i < n; ++i) {
            const double v = forward_noise(Tensor::vector({0.8}), t, sched, normal({1, 1, 1}, rng))[0];
            sum += v;
            sq += v * v;
        }
        const double mean = sum / n, var = sq / n - mean * mean;
        const double sd = std::sqrt(1.0 - ab);
        CHECK(std::abs(mean - std::sqrt(ab) * 0.8) <= 3 * sd / std::sqrt(n));
        // Variance of the sample variance of a Gaussian is 2 sigma^4 / n.
        CHECK(std::abs(var - (1.0 - ab)) <= 3 * std::sqrt(2.0 / n) * (1.0 - ab));
    }
}

TEST_CASE("predict_x0 and ddim_step identities") {
    const auto quarter = NoiseSchedule::linear(1, 0.75, 0.75);
    CHECK(predict_x0(Tensor::vector({0.3}), 1, Tensor::vector({0.0}), quarter)[0] == doctest::Approx(0.6));

    const auto sched = NoiseSchedule::linear(250);
    std::mt19937_64 rng(2);
    for (int t = 1; t <= 250; ++t) {
        const Tensor x0 = normal({1, 2, 2}, rng), eps = normal({1, 2, 2}, rng);
        CHECK(max_abs_diff(predict_x0(forward_noise(x0, t, sched, eps), t, eps, sched), x0) <= 1e-10);
        CHECK(ddim_step(normal({1, 2, 2}, rng), x0, t, 0, sched, 0.0) == x0);
    }
    CHECK(predict_x0(Tensor::vector({5.0}), 1, Tensor::vector({0.0}), quarter, true)[0] == 1.0);
}

TEST_CASE("deterministic DDIM step on scalars") {
    // beta = (0.2, 0.375) gives alpha_bar = (0.8, 0.5).
    const auto s = NoiseSchedule::linear(2, 0.2, 0.375);
    REQUIRE(s.alpha_bar(1) == doctest::Approx(0.8));
    REQUIRE(s.alpha_bar(2) == doctest::Approx(0.5));
    const double eps = (1.0 - std::sqrt(0.5) * 0.6) / std::sqrt(0.5);
    const double expect = std::sqrt(0.8) * 0.6 + std::sqrt(0.2) * eps;
    CHECK(ddim_step(Tensor::vector({1.0}), Tensor::vector({0.6}), 2, 1, s, 0.0)[0] == doctest::Approx(expect).epsilon(1e-14));

    const double sigma = ddim_sigma(s, 2, 1, 1.0);
    CHECK(sigma == doctest::Approx(std::sqrt(0.2 / 0.5) * std::sqrt(1.0 - 0.5 / 0.8)));
    CHECK(ddim_sigma(s, 2, 1, 0.0) == 0.0);
}

TEST_CASE("stochastic DDIM step uses the supplied noise") {
    const auto s = NoiseSchedule::linear(2, 0.2, 0.375);
    const double sigma = ddim_sigma(s, 2, 1, 1.0);
    const Tensor noise = Tensor::vector({0.5});
    const double eps = (1.0 - std::sqrt(0.5) * 0.6) / std::sqrt(0.5);
    const double expect = std::sqrt(0.8) * 0.6 + std::sqrt(0.2 - sigma * sigma) * eps + sigma * 0.5;
    CHECK(ddim_step(Tensor::vector({1.0}), Tensor::vector({0.6}), 2, 1, s, sigma, &noise)[0] ==
          doctest::Approx(expect).epsilon(1e-14));
    CHECK_THROWS_AS(ddim_step(Tensor::vector({1.0}), Tensor::vector({0.6}), 2, 1, s, sigma), Error);
    CHECK_THROWS_AS(ddim_step(Tensor::vector({1.0}), Tensor::vector({0.6}), 1, 1, s, 0.0), Error);
}

TEST_CASE("inpaint_constrain") {
    Oracle o(line_mixture());
    std::mt19937_64 rng(3);
    const Tensor x = normal({1, 1, 1}, rng);
    const InpaintTask task(Tensor::vector({0.7}), Mask::ones({1, 1, 1}));
    SUBCASE("no steps is the identity") {
        o.cfg.inpaint_steps = 0;
        CHECK(inpaint_constrain(o.ctx(), task, x, 50) == x);
    }
    SUBCASE("stationary point is left alone") {
        const Tensor x0 = estimate_x0(o.ctx(), x, 50);
        const InpaintTask matched(x0, Mask::ones({1, 1, 1}));
        CHECK(inpaint_constrain(o.ctx(), matched, x, 50) == x);
    }
    SUBCASE("descent lowers the known-region loss") {
        const Tensor out = inpaint_constrain(o.ctx(), task, x, 50);
        CHECK(inpaint_loss(o.ctx(), task, out, x, 50) < inpaint_loss(o.ctx(), task, x, x, 50));
    }
    CHECK(inpaint_learning_rate(o.ctx(), 60) ==
          doctest::Approx(0.02 * std::sqrt(o.sched.alpha_bar(60)) * std::pow(1.012, 40)));
}

TEST_CASE("classifier_guide") {
    Oracle o(line_mixture());
    const Tensor x = Tensor::vector({-0.2});
    SUBCASE("zero scale is the identity") {
        o.cfg.scale = 0.0;
        CHECK(classifier_guide(o.ctx(), x, 40) == x);
    }
    SUBCASE("disabled guidance is the identity") {
        o.cfg.enable_cg = false;
        CHECK(classifier_guide(o.ctx(), x, 40) == x);
    }
    SUBCASE("one step equals -tilde_beta times a hand-rolled gradient") {
        o.cfg.guidance_steps = 1;
        const int t = 40;
        const double ab = o.sched.alpha_bar(t), a = std::sqrt(ab);
        // Closed-form 1-D posterior mean and classifier, written out directly.
        auto x0_of = [&](double xt) {
            double num = 0.0, den = 0.0;
            for (double mu : {-1.0, 1.0}) {
                const double v = ab * 0.09 + 1.0 - ab;
                const double w = std::exp(-0.5 * (xt - a * mu) * (xt - a * mu) / v);
                num += w * (mu + a * 0.09 / v * (xt - a * mu));
                den += w;
            }
            return num / den;
        };
        auto loss = [&](double xt) {
            const double z = x0_of(xt);
            const double l0 = -0.5 * (z + 1) * (z + 1) / 0.09, l1 = -0.5 * (z - 1) * (z - 1) / 0.09;
            return -(l1 - std::log(std::exp(l0) + std::exp(l1)));
        };
        const double h = 1e-6;
        const double grad = (loss(x[0] + h) - loss(x[0] - h)) / (2 * h);
        const double expect = x[0] - o.sched.tilde_beta(t) * grad;
        CHECK(classifier_guide(o.ctx(), x, t)[0] == doctest::Approx(expect).epsilon(1e-8));
        CHECK(guidance_variance(o.ctx(), x, t)[0] == doctest::Approx(o.sched.tilde_beta(t)).epsilon(1e-14));
    }
    SUBCASE("guidance raises the target probability") {
        const Tensor g = classifier_guide(o.ctx(), x, 40);
        CHECK(guidance_loss(o.ctx(), g, 40, 1) < guidance_loss(o.ctx(), x, 40, 1));
    }
}

TEST_CASE("gradients through the x0 chain match finite differences") {
    Oracle o(GaussianMixture::symmetric_pair(3, 0.6, 0.25));
    std::mt19937_64 rng(4);
    for (int i = 0; i < 100; ++i) {
        const int t = 1 + static_cast<int>(rng() % 100);
        const Tensor x = normal({1, 1, 3}, rng);
        const Tensor anchor = x + normal({1, 1, 3}, rng, 0.1);
        Tensor m({1, 1, 3});
        for (auto& v : m.values()) v = static_cast<double>(rng() % 2);
        const InpaintTask task(normal({1, 1, 3}, rng, 0.5), Mask(m));
        const Tensor gi = inpaint_loss_grad(o.ctx(), task, x, anchor, t);
        const Tensor gg = guidance_loss_grad(o.ctx(), x, t, 0);
        Tensor fi(x.shape()), fg(x.shape());
        for (std::size_t k = 0; k < 3; ++k) {
            Tensor p = x, q = x;
            p[k] += 1e-5;
            q[k] -= 1e-5;
            fi[k] = (inpaint_loss(o.ctx(), task, p, anchor, t) - inpaint_loss(o.ctx(), task, q, anchor, t)) / 2e-5;
            fg[k] = (guidance_loss(o.ctx(), p, t, 0) - guidance_loss(o.ctx(), q, t, 0)) / 2e-5;
        }
        auto rel = [](const Tensor& a, const Tensor& b) {
            const double s = std::max(std::sqrt(squared_norm(a)), std::sqrt(squared_norm(b)));
            return s == 0.0 ? 0.0 : std::sqrt(squared_norm(a - b)) / s;
        };
        CHECK(rel(gi, fi) < 1e-4);
        CHECK(rel(gg, fg) < 1e-4);
    }
}

TEST_CASE("stop-gradient mode treats eps as constant") {
    Oracle o(GaussianMixture::symmetric_pair(2, 0.6, 0.25));
    o.cfg.gradient_mode = GradientMode::StopGradient;
    const Tensor u = Tensor::vector({0.3, -1.0});
    const Tensor g = estimate_x0_vjp(o.ctx(), Tensor::vector({0.1, 0.2}), 30, u);
    const double inv = 1.0 / std::sqrt(o.sched.alpha_bar(30));
    CHECK(g[0] == doctest::Approx(0.3 * inv));
    CHECK(g[1] == doctest::Approx(-1.0 * inv));
}

TEST_CASE("clamped components carry no gradient") {
    Oracle o(GaussianMixture::symmetric_pair(2, 0.6, 0.25));
    o.cfg.clamp_x0 = true;
    // Far outside the data range the clamped estimate is flat.
    const Tensor x = Tensor::vector({30.0, 0.1});
    const Tensor g = estimate_x0_vjp(o.ctx(), x, 5, Tensor::vector({1.0, 0.0}));
    CHECK(estimate_x0(o.ctx(), x, 5)[0] == 1.0);
    CHECK(std::abs(g[0]) < 1e-12);
}

TEST_CASE("composite_renoise") {
    const auto sched = NoiseSchedule::linear(100);
    const Tensor gt = Tensor::vector({0.5, -0.5}), x0 = Tensor::vector({0.1, 0.9});
    auto expected = [&](const Tensor& base, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        return forward_noise(base, 20, sched, normal(base.shape(), rng));
    };
    std::mt19937_64 a(9), b(9);
    CHECK(composite_renoise(x0, gt, Tensor(gt.shape(), 1.0), 20, sched, a) == expected(gt, 9));
    CHECK(composite_renoise(x0, gt, Tensor(gt.shape(), 0.0), 20, sched, b) == expected(x0, 9));
}

TEST_CASE("handoff timestep") {
    const auto skip = SkipSequence::build(250, {50, 50, 25, 25, 5});
    GuidanceConfig cfg;
    cfg.t_stop_comp = 124;
    CHECK(handoff_timestep(skip, cfg) == 124);
    cfg.t_stop_comp = 125;
    CHECK(handoff_timestep(skip, cfg) == 124);
    cfg.t_stop_comp = 0;
    CHECK(handoff_timestep(skip, cfg) == 0);
    cfg.enable_ss = false;
    CHECK(handoff_timestep(skip, cfg) == 250);
}

TEST_CASE("stochastic phase") {
    Oracle o(GaussianMixture::symmetric_pair(2, 0.6, 0.25), 60);
    const InpaintTask task(Tensor::vector({0.4, -0.3}), Mask(Tensor::vector({1.0, 0.0})));
    SUBCASE("single candidate is reproducible") {
        const auto a = run_stochastic_phase(o.ctx(), task);
        const auto b = run_stochastic_phase(o.ctx(), task);
        REQUIRE(a.size() == 1);
        CHECK(a[0].state == b[0].state);
        CHECK(a[0].preview == b[0].preview);
        CHECK(a[0].t == 30);
        CHECK(a[0].preview[0] == 0.4);
        CHECK(run_branch(o.ctx(), task, 0).state == a[0].state);
    }
    SUBCASE("serial and parallel branches agree") {
        o.cfg.candidates = 4;
        ExecutionOptions par;
        par.parallel = true;
        par.max_threads = 4;
        std::size_t calls = 0;
        ExecutionOptions serial;
        serial.progress = [&](std::size_t, std::size_t total) {
            ++calls;
            CHECK(total == 4u * 30u);
        };
        const auto a = run_stochastic_phase(o.ctx(), task, serial);
        const auto b = run_stochastic_phase(o.ctx(), task, par);
        CHECK(calls == 4u * 30u);
        for (int i = 0; i < 4; ++i) {
            CHECK(a[i].state == b[i].state);
            CHECK(a[i].branch_seed == branch_seed(o.cfg.seed, i));
            CHECK(a[i].id == std::to_string(i));
        }
        CHECK_FALSE(a[0].state == a[1].state);
    }
    SUBCASE("without stochastic sampling the candidate is the initial noise") {
        o.cfg.enable_ss = false;
        const auto c = run_stochastic_phase(o.ctx(), task);
        CHECK(c[0].t == 60);
        std::mt19937_64 rng(branch_seed(o.cfg.seed, 0));
        CHECK(c[0].state == normal({1, 1, 2}, rng));
        // Same as compositing never being reached.
        GuidanceConfig alt = o.cfg;
        alt.enable_ss = true;
        alt.t_stop_comp = 60;
        const SamplerContext ctx2{o.den, &o.cls, o.sched, o.skip, alt};
        CHECK(run_pipeline(o.ctx(), task).output == run_pipeline(ctx2, task).output);
    }
    SUBCASE("all-known mask reproduces the ground truth") {
        const Tensor gt = Tensor::vector({0.2, 0.5});
        o.cfg.candidates = 3;
        const auto r = run_pipeline(o.ctx(), InpaintTask(gt, Mask::ones({1, 1, 2})));
        for (const auto& c : r.candidates) CHECK(max_abs_diff(c.preview, gt) <= 1e-2);
        CHECK(max_abs_diff(r.output, gt) <= 1e-2);
    }
    SUBCASE("missing label is a validation error") {
        o.cfg.labels.clear();
        CHECK_THROWS_AS(run_stochastic_phase(o.ctx(), task), Error);
    }
}

TEST_CASE("refinement and pipeline") {
    Oracle o(GaussianMixture::symmetric_pair(2, 0.6, 0.25), 60, {10, 10});
    o.cfg.t_stop_comp = 30;
    o.cfg.candidates = 3;
    const InpaintTask task(Tensor::vector({0.4, -0.3}), Mask(Tensor::vector({1.0, 0.0})));
    const auto r = run_pipeline(o.ctx(), task);
    REQUIRE(r.candidates.size() == 3);
    CHECK(r.selected == rank_candidates(r.candidates).front());
    CHECK(r.output[0] == 0.4);
    CHECK(run_deterministic_refinement(o.ctx(), task, r.candidates[r.selected]) == r.output);
    CHECK(run_deterministic_refinement(o.ctx(), task, r.candidates[1]) ==
          run_deterministic_refinement(o.ctx(), task, r.candidates[1]));
    const auto chosen = run_pipeline(o.ctx(), task, 2);
    CHECK(chosen.selected == 2);
    CHECK_THROWS_AS(run_pipeline(o.ctx(), task, 7), Error);

    Candidate off = r.candidates[0];
    off.t = 31;
    CHECK_THROWS_AS(run_deterministic_refinement(o.ctx(), task, off), Error);

    GuidanceConfig no_cg = o.cfg;
    no_cg.enable_cg = false;
    const SamplerContext plain{o.den, nullptr, o.sched, o.skip, no_cg};
    CHECK_NOTHROW(run_pipeline(plain, task));
}

TEST_CASE("ranking breaks ties by branch index") {
    std::vector<Candidate> c(4);
    const double scores[] = {-1.0, -0.5, -0.5, -2.0};
    for (int i = 0; i < 4; ++i) {
        c[i].index = i;
        c[i].score = scores[i];
    }
    CHECK(rank_candidates(c) == std::vector<std::size_t>{1, 2, 0, 3});
}

TEST_CASE("local guidance scores each region") {
    Oracle o(GaussianMixture::symmetric_pair(2, 0.6, 0.25));
    o.cfg.mode = GuidanceMode::Local;
    o.cfg.local_specs = {{Mask(Tensor::vector({1.0, 0.0})), 1}, {Mask(Tensor::vector({0.0, 1.0})), 0}};
    const Tensor p = Tensor::vector({0.5, -0.5});
    const double expect = o.cls.log_prob(Tensor::vector({0.0, -0.5}), 1) + o.cls.log_prob(Tensor::vector({0.5, 0.0}), 0);
    CHECK(candidate_score(o.ctx(), p) == doctest::Approx(expect));
    CHECK_NOTHROW(classifier_guide(o.ctx(), p, 10));
}

TEST_CASE("guidance config validation and JSON") {
    GuidanceConfig c;
    c.labels = {0};
    CHECK_NOTHROW(c.validate(250));
    auto bad = c;
    bad.scale = -1.0;
    CHECK_THROWS_AS(bad.validate(250), Error);
    bad = c;
    bad.t_stop_comp = 300;
    CHECK_THROWS_AS(bad.validate(250), Error);
    bad = c;
    bad.eta_ddim = 1.5;
    CHECK_THROWS_AS(bad.validate(250), Error);
    bad = c;
    bad.mode = GuidanceMode::Local;
    CHECK_THROWS_AS(bad.validate(250), Error);
    bad = c;
    bad.candidates = 0;
    CHECK_THROWS_AS(bad.validate(250), Error);

    c.scale = 2.5;
    c.seed = 77;
    c.enable_ss = false;
    c.clamp_x0 = false;
    c.gradient_mode = GradientMode::StopGradient;
    const nlohmann::json j = c;
    const auto back = j.get<GuidanceConfig>();
    CHECK(back.scale == 2.5);
    CHECK(back.seed == 77);
    CHECK_FALSE(back.enable_ss);
    CHECK(back.clamp_x0 == std::optional<bool>(false));
    CHECK(back.gradient_mode == GradientMode::StopGradient);
    CHECK(nlohmann::json(back) == j);
}
