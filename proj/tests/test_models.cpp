#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "guidpaint/error.hpp"
#include "guidpaint/models.hpp"
#include "guidpaint/sampler.hpp"

using namespace guidpaint;

namespace {

GaussianMixture line_mixture(double sigma = 0.1) {
    GaussianMixture g;
    g.weights = {0.5, 0.5};
    g.means = {Tensor::vector({-1.0}), Tensor::vector({1.0})};
    g.sigmas = {sigma, sigma};
    return g;
}

GaussianMixture unit_gaussian(int dim) {
    GaussianMixture g;
    g.weights = {1.0};
    g.means = {Tensor({1, 1, dim}, 0.0)};
    g.sigmas = {1.0};
    return g;
}

// Uneven three-component 3-D mixture for oracle comparisons.
GaussianMixture lopsided() {
    GaussianMixture g;
    g.weights = {0.2, 0.5, 0.3};
    g.means = {Tensor::vector({0.5, -0.3, 0.1}), Tensor::vector({-0.4, 0.6, 0.0}), Tensor::vector({0.1, 0.2, -0.8})};
    g.sigmas = {0.3, 0.5, 0.2};
    return g;
}

Tensor gaussian(const Shape& s, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n;
    Tensor t(s);
    for (auto& v : t.values()) v = scale * n(rng);
    return t;
}

template <typename F>
Tensor numeric_grad(F f, const Tensor& x, double h = 1e-5) {
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor p = x, m = x;
        p[i] += h;
        m[i] -= h;
        g[i] = (f(p) - f(m)) / (2 * h);
    }
    return g;
}

double rel_error(const Tensor& a, const Tensor& b) {
    const double s = std::max(std::sqrt(squared_norm(a)), std::sqrt(squared_norm(b)));
    return s == 0.0 ? 0.0 : std::sqrt(squared_norm(a - b)) / s;
}

}  // namespace

TEST_CASE("posterior mean examples") {
    const auto sched = NoiseSchedule::linear(250);
    const auto g = line_mixture();
    for (int t : {1, 50, 250}) CHECK(mixture_posterior_x0(Tensor::vector({0.0}), t, g, sched)[0] == doctest::Approx(0.0));

    const auto sharp = NoiseSchedule::linear(1, 1e-4, 1e-4);  // alpha_bar = 0.9999
    CHECK(mixture_posterior_x0(Tensor::vector({1.0}), 1, g, sharp)[0] == doctest::Approx(1.0).epsilon(1e-3));

    std::mt19937_64 rng(1);
    for (int t : {1, 10, 100, 250}) {
        const Tensor x = gaussian({1, 1, 3}, rng);
        const double a = std::sqrt(sched.alpha_bar(t));
        const Tensor post = mixture_posterior_x0(x, t, unit_gaussian(3), sched);
        const Tensor eps = mixture_predict_eps(x, t, unit_gaussian(3), sched);
        for (int i = 0; i < 3; ++i) {
            CHECK(post[i] == doctest::Approx(a * x[i]).epsilon(1e-12));
            CHECK(eps[i] == doctest::Approx(std::sqrt(1.0 - sched.alpha_bar(t)) * x[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("noiseless on-manifold point predicts zero noise") {
    const auto sched = NoiseSchedule::linear(100);
    GaussianMixture g;
    g.weights = {1.0};
    g.means = {Tensor::vector({0.3, -0.2})};
    g.sigmas = {1e-6};
    const int t = 40;
    const Tensor x = g.means[0] * std::sqrt(sched.alpha_bar(t));
    const Tensor eps = mixture_predict_eps(x, t, g, sched);
    CHECK(std::abs(eps[0]) < 1e-9);
    CHECK(std::abs(eps[1]) < 1e-9);
}

TEST_CASE("posterior mean agrees with numerical integration in 1-D") {
    const auto sched = NoiseSchedule::linear(250);
    const auto g = line_mixture(0.3);
    for (int t : {5, 60, 180}) {
        const double ab = sched.alpha_bar(t);
        for (double xt : {-1.2, -0.1, 0.4, 2.0}) {
            // E[x0 | x_t] = ∫ x0 p(x0) p(x_t | x0) / ∫ p(x0) p(x_t | x0), trapezoid on a fine grid.
            double num = 0.0, den = 0.0;
            const double lo = -4.0, hi = 4.0;
            const int n = 400000;
            const double dx = (hi - lo) / n;
            for (int i = 0; i <= n; ++i) {
                const double x0 = lo + i * dx;
                double prior = 0.0;
                for (int k = 0; k < 2; ++k) {
                    const double z = (x0 - g.means[k][0]) / g.sigmas[k];
                    prior += g.weights[k] * std::exp(-0.5 * z * z) / g.sigmas[k];
                }
                const double r = xt - std::sqrt(ab) * x0;
                const double w = prior * std::exp(-0.5 * r * r / (1.0 - ab)) * ((i == 0 || i == n) ? 0.5 : 1.0);
                num += w * x0;
                den += w;
            }
            CHECK(mixture_posterior_x0(Tensor::vector({xt}), t, g, sched)[0] == doctest::Approx(num / den).epsilon(1e-7));
        }
    }
}

TEST_CASE("predict_x0 of predict_eps reproduces the posterior mean") {
    const auto sched = NoiseSchedule::linear(250);
    const auto g = lopsided();
    MixtureDenoiser den(g, sched);
    std::mt19937_64 rng(2);
    for (int i = 0; i < 200; ++i) {
        const int t = 1 + static_cast<int>(rng() % 250);
        const Tensor x = gaussian({1, 1, 3}, rng);
        const Tensor via_eps = predict_x0(x, t, den.predict_eps(x, t), sched);
        CHECK(max_abs_diff(via_eps, mixture_posterior_x0(x, t, g, sched)) <= 1e-10);
    }
}

TEST_CASE("mixture classifier") {
    const auto g = line_mixture();
    CHECK(mixture_classifier_logprob(Tensor::vector({0.0}), 0, g) == doctest::Approx(std::log(0.5)));
    CHECK(mixture_classifier_logprob(Tensor::vector({1.0}), 1, g) == doctest::Approx(0.0));

    SUBCASE("Bayes rule by direct density evaluation") {
        const auto m = lopsided();
        MixtureClassifier cls(m);
        std::mt19937_64 rng(3);
        for (int i = 0; i < 100; ++i) {
            const Tensor x = gaussian({1, 1, 3}, rng, 0.5);
            std::vector<double> dens(3);
            double total = 0.0;
            for (int k = 0; k < 3; ++k) {
                const double s2 = m.sigmas[k] * m.sigmas[k];
                const double d2 = squared_norm(x - m.means[k]);
                dens[k] = m.weights[k] * std::exp(-0.5 * d2 / s2) / std::pow(2 * std::numbers::pi * s2, 1.5);
                total += dens[k];
            }
            const auto lp = cls.log_probs(x);
            double sum = 0.0;
            for (int k = 0; k < 3; ++k) {
                CHECK(std::abs(std::exp(lp[k]) - dens[k] / total) <= 1e-10);
                sum += std::exp(lp[k]);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("gradient matches finite differences") {
        MixtureClassifier cls(lopsided());
        std::mt19937_64 rng(4);
        for (int i = 0; i < 100; ++i) {
            const Tensor x = gaussian({1, 1, 3}, rng, 0.6);
            const int y = static_cast<int>(rng() % 3);
            const Tensor g = cls.grad_log_prob(x, y);
            const Tensor fd = numeric_grad([&](const Tensor& p) { return cls.log_prob(p, y); }, x);
            CHECK(rel_error(g, fd) < 1e-4);
        }
    }
    SUBCASE("top_k orders every label") {
        MixtureClassifier cls(lopsided());
        const auto top = cls.top_k(Tensor::vector({0.1, 0.2, -0.8}), 3);
        REQUIRE(top.size() == 3);
        CHECK(top[0].label == 2);
        CHECK(top[0].probability >= top[1].probability);
        CHECK(top[1].probability >= top[2].probability);
        CHECK(top[0].probability + top[1].probability + top[2].probability == doctest::Approx(1.0));
    }
    CHECK_THROWS_AS(MixtureClassifier(g).log_prob(Tensor::vector({0.0}), 2), Error);
}

TEST_CASE("mixture denoiser VJP") {
    const auto sched = NoiseSchedule::linear(250);
    MixtureDenoiser den(lopsided(), sched);
    std::mt19937_64 rng(5);
    const Tensor x = gaussian({1, 1, 3}, rng);
    CHECK(den.input_vjp(x, 100, Tensor({1, 1, 3})) == Tensor({1, 1, 3}));

    double worst_fd = 0.0, worst_lin = 0.0;
    for (int i = 0; i < 150; ++i) {
        const int t = 1 + static_cast<int>(rng() % 250);
        const Tensor xt = gaussian({1, 1, 3}, rng);
        const Tensor u = gaussian({1, 1, 3}, rng), v = gaussian({1, 1, 3}, rng);
        const Tensor vjp = den.input_vjp(xt, t, u);
        const Tensor fd = numeric_grad([&](const Tensor& p) { return dot(den.predict_eps(p, t), u); }, xt);
        worst_fd = std::max(worst_fd, rel_error(vjp, fd));
        const Tensor combo = den.input_vjp(xt, t, u * 2.0 + v * -0.5);
        const Tensor sep = den.input_vjp(xt, t, u) * 2.0 + den.input_vjp(xt, t, v) * -0.5;
        worst_lin = std::max(worst_lin, rel_error(combo, sep));
    }
    CHECK(worst_fd < 1e-4);
    CHECK(worst_lin < 1e-8);

    const Tensor u = gaussian({1, 1, 3}, rng);
    CHECK(denoiser_input_vjp(den, x, 10, u, GradientMode::StopGradient) == Tensor({1, 1, 3}));
    CHECK(denoiser_input_vjp(den, x, 10, u) == den.input_vjp(x, 10, u));
    CHECK(den.predict_var_v(x, 10) == Tensor({1, 1, 3}, -1.0));
}

TEST_CASE("backend without gradients reports unsupported") {
    struct Opaque final : Denoiser {
        Tensor predict_eps(const Tensor& x, int) const override { return x; }
        Tensor predict_var_v(const Tensor& x, int) const override { return Tensor(x.shape(), -1.0); }
        Tensor input_vjp(const Tensor& x, int, const Tensor&) const override { return x; }
        bool supports_vjp() const override { return false; }
        bool image_backend() const override { return true; }
        std::string kind() const override { return "opaque"; }
    } opaque;
    try {
        denoiser_input_vjp(opaque, Tensor::vector({1.0}), 1, Tensor::vector({1.0}));
        FAIL("expected unsupported");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Unsupported);
    }
}

TEST_CASE("predict_labels") {
    const auto g = lopsided();
    MixtureClassifier cls(g);
    for (int y = 0; y < 3; ++y) {
        const auto p = predict_labels(cls, g.means[y], 1);
        REQUIRE(p.ranking.size() == 1);
        CHECK(p.ranking[0].label == y);
    }
    const auto all = predict_labels(cls, g.means[0], 3);
    double sum = 0.0;
    for (const auto& s : all.ranking) sum += s.probability;
    CHECK(sum == doctest::Approx(1.0));
    CHECK_FALSE(all.clamped);

    const auto clamped = predict_labels(cls, g.means[0], 10);
    CHECK(clamped.clamped);
    CHECK(clamped.ranking.size() == 3);

    const auto empty = predict_labels(cls, g.means[0], 1, Tensor({1, 1, 3}, 0.0));
    CHECK(empty.low_confidence);
    CHECK(empty.ranking[0].label == predict_labels(cls, Tensor({1, 1, 3}), 1).ranking[0].label);
    CHECK_THROWS_AS(predict_labels(cls, g.means[0], 0), Error);
}

TEST_CASE("mixture description round-trips and validates") {
    const auto g = lopsided();
    const nlohmann::json j = g;
    CHECK(j.at("kind") == "mixture");
    const auto back = j.get<GaussianMixture>();
    CHECK(back.weights == g.weights);
    CHECK(back.sigmas == g.sigmas);
    for (int k = 0; k < 3; ++k) CHECK(back.means[k] == g.means[k]);

    auto bad = g;
    bad.weights = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = g;
    bad.sigmas[1] = 0.0;
    CHECK_THROWS_AS(bad.validate(), Error);
}
