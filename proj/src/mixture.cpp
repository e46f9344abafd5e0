#include <algorithm>
#include <cmath>
#include <numbers>

#include "guidpaint/error.hpp"
#include "guidpaint/models.hpp"

namespace guidpaint {

namespace {

// log(sum_k exp(v_k - max)), accurate when one term dominates.
double log_rest(const std::vector<double>& v, std::size_t top) {
    double rest = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (k != top) rest += std::exp(v[k] - v[top]);
    }
    return std::log1p(rest);
}

}  // namespace

double log_sum_exp(const std::vector<double>& v) {
    const auto top = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    if (!std::isfinite(v[top])) return v[top];
    return v[top] + log_rest(v, top);
}

std::vector<double> log_softmax(std::vector<double> v) {
    const auto top = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    require(std::isfinite(v[top]), "non-finite logits");
    const double m = v[top];
    const double r = log_rest(v, top);
    for (double& x : v) x = (x - m) - r;
    return v;
}

void GaussianMixture::validate() const {
    require(!weights.empty(), "mixture needs at least one component");
    require(means.size() == weights.size() && sigmas.size() == weights.size(),
            "mixture weights, means and sigmas must have equal length");
    double total = 0.0;
    for (double w : weights) {
        require(w > 0.0 && std::isfinite(w), "mixture weights must be positive");
        total += w;
    }
    require(std::abs(total - 1.0) < 1e-9, "mixture weights must sum to 1");
    for (double s : sigmas) require(s > 0.0 && std::isfinite(s), "mixture sigmas must be positive");
    for (const auto& m : means) require(m.shape() == means.front().shape(), "mixture means must share a shape");
}

GaussianMixture GaussianMixture::symmetric_pair(int dim, double offset, double sigma) {
    GaussianMixture g;
    g.weights = {0.5, 0.5};
    g.means = {Tensor(Shape{1, 1, dim}, -offset), Tensor(Shape{1, 1, dim}, offset)};
    g.sigmas = {sigma, sigma};
    return g;
}

void to_json(nlohmann::json& j, const GaussianMixture& g) {
    nlohmann::json comps = nlohmann::json::array();
    for (int k = 0; k < g.K(); ++k) {
        const auto v = g.means[k].values();
        comps.push_back({{"weight", g.weights[k]},
                         {"sigma", g.sigmas[k]},
                         {"mean", std::vector<double>(v.begin(), v.end())}});
    }
    const auto& s = g.shape();
    j = nlohmann::json{{"kind", "mixture"},
                       {"version", 1},
                       {"shape", {s.channels, s.height, s.width}},
                       {"components", comps}};
}

void from_json(const nlohmann::json& j, GaussianMixture& g) {
    require(j.value("kind", std::string{}) == "mixture", "not a mixture description");
    const auto dims = j.at("shape").get<std::vector<int>>();
    require(dims.size() == 3, "mixture shape must have three entries");
    const Shape shape{dims[0], dims[1], dims[2]};
    g = GaussianMixture{};
    for (const auto& c : j.at("components")) {
        g.weights.push_back(c.at("weight").get<double>());
        g.sigmas.push_back(c.at("sigma").get<double>());
        g.means.emplace_back(shape, c.at("mean").get<std::vector<double>>());
    }
    g.validate();
}

namespace {

void check_point(const Tensor& x, const GaussianMixture& gmm) {
    if (x.shape() != gmm.shape()) {
        fail(ErrorKind::Validation, "input shape " + to_string(x.shape()) + " does not match mixture dimensionality " +
                                        to_string(gmm.shape()));
    }
}

double log_normal(const Tensor& x, const Tensor& mean, double scale, double var) {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - scale * mean[i];
        sq += d * d;
    }
    const double dim = static_cast<double>(x.size());
    return -0.5 * dim * std::log(2.0 * std::numbers::pi * var) - 0.5 * sq / var;
}

// Per-component pieces of the noisy marginal at timestep t.
struct NoisyPosterior {
    double a = 0.0;  // sqrt(alpha_bar)
    std::vector<double> resp;
    std::vector<double> var;
    std::vector<double> gain;  // a sigma^2 / v
};

NoisyPosterior noisy_posterior(const Tensor& x_t, int t, const GaussianMixture& gmm, const NoiseSchedule& sched) {
    sched.check_timestep(t);
    check_point(x_t, gmm);
    const double ab = sched.alpha_bar(t);
    NoisyPosterior p;
    p.a = std::sqrt(ab);
    std::vector<double> logits(gmm.K());
    p.var.resize(gmm.K());
    p.gain.resize(gmm.K());
    for (int k = 0; k < gmm.K(); ++k) {
        const double s2 = gmm.sigmas[k] * gmm.sigmas[k];
        p.var[k] = ab * s2 + 1.0 - ab;
        p.gain[k] = p.a * s2 / p.var[k];
        logits[k] = std::log(gmm.weights[k]) + log_normal(x_t, gmm.means[k], p.a, p.var[k]);
    }
    const double lse = log_sum_exp(logits);
    p.resp.resize(gmm.K());
    for (int k = 0; k < gmm.K(); ++k) p.resp[k] = std::exp(logits[k] - lse);
    return p;
}

Tensor component_mean(const Tensor& x_t, const Tensor& mu, double a, double gain) {
    Tensor m(x_t.shape());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = mu[i] + gain * (x_t[i] - a * mu[i]);
    return m;
}

}  // namespace

Tensor mixture_posterior_x0(const Tensor& x_t, int t, const GaussianMixture& gmm, const NoiseSchedule& sched) {
    const auto p = noisy_posterior(x_t, t, gmm, sched);
    Tensor out(x_t.shape());
    for (int k = 0; k < gmm.K(); ++k) {
        out.axpy(p.resp[k], component_mean(x_t, gmm.means[k], p.a, p.gain[k]));
    }
    return out;
}

Tensor mixture_predict_eps(const Tensor& x_t, int t, const GaussianMixture& gmm, const NoiseSchedule& sched) {
    const double ab = sched.alpha_bar(t);
    require(ab < 1.0, "alpha_bar must be below 1 to predict noise");
    const Tensor x0 = mixture_posterior_x0(x_t, t, gmm, sched);
    Tensor eps(x_t.shape());
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x_t[i] - a * x0[i]) / b;
    return eps;
}

double mixture_classifier_logprob(const Tensor& x0, int y, const GaussianMixture& gmm) {
    return MixtureClassifier(gmm).log_prob(x0, y);
}

MixtureDenoiser::MixtureDenoiser(GaussianMixture gmm, NoiseSchedule sched)
    : gmm_(std::move(gmm)), sched_(std::move(sched)) {
    gmm_.validate();
}

Tensor MixtureDenoiser::predict_eps(const Tensor& x_t, int t) const {
    return mixture_predict_eps(x_t, t, gmm_, sched_);
}

Tensor MixtureDenoiser::predict_var_v(const Tensor& x_t, int t) const {
    sched_.check_timestep(t);
    return Tensor(x_t.shape(), -1.0);
}

Tensor MixtureDenoiser::input_vjp(const Tensor& x_t, int t, const Tensor& cotangent) const {
    check_same_shape(x_t, cotangent, "mixture vjp");
    const auto p = noisy_posterior(x_t, t, gmm_, sched_);
    const int K = gmm_.K();
    const std::size_t n = x_t.size();

    // d m / d x = sum_k r_k c_k I + sum_k r_k m_k (g_k - g_bar)^T with g_k = -(x - a mu_k) / v_k
    std::vector<Tensor> means;
    std::vector<Tensor> scores;
    Tensor g_bar(x_t.shape());
    for (int k = 0; k < K; ++k) {
        means.push_back(component_mean(x_t, gmm_.means[k], p.a, p.gain[k]));
        Tensor g(x_t.shape());
        for (std::size_t i = 0; i < n; ++i) g[i] = -(x_t[i] - p.a * gmm_.means[k][i]) / p.var[k];
        g_bar.axpy(p.resp[k], g);
        scores.push_back(std::move(g));
    }
    Tensor m_bar(x_t.shape());
    double diag = 0.0;
    for (int k = 0; k < K; ++k) {
        m_bar.axpy(p.resp[k], means[k]);
        diag += p.resp[k] * p.gain[k];
    }
    Tensor jm_u = cotangent * diag;
    for (int k = 0; k < K; ++k) {
        const double proj = dot(means[k] - m_bar, cotangent);
        jm_u.axpy(p.resp[k] * proj, scores[k] - g_bar);
    }

    const double ab = sched_.alpha_bar(t);
    const double b = std::sqrt(1.0 - ab);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < n; ++i) out[i] = (cotangent[i] - p.a * jm_u[i]) / b;
    return out;
}

MixtureClassifier::MixtureClassifier(GaussianMixture gmm) : gmm_(std::move(gmm)) { gmm_.validate(); }

std::vector<double> MixtureClassifier::log_probs(const Tensor& x0) const {
    check_point(x0, gmm_);
    std::vector<double> logits(gmm_.K());
    for (int k = 0; k < gmm_.K(); ++k) {
        logits[k] = std::log(gmm_.weights[k]) + log_normal(x0, gmm_.means[k], 1.0, gmm_.sigmas[k] * gmm_.sigmas[k]);
    }
    return log_softmax(std::move(logits));
}

Tensor MixtureClassifier::grad_log_prob(const Tensor& x0, int y) const {
    check_label(y);
    const auto lp = log_probs(x0);
    // grad = h_y - sum_k p_k h_k with h_k = -(x - mu_k) / sigma_k^2
    Tensor grad(x0.shape());
    for (int k = 0; k < gmm_.K(); ++k) {
        const double w = k == y ? -std::expm1(lp[k]) : -std::exp(lp[k]);
        if (w == 0.0) continue;
        const double inv = 1.0 / (gmm_.sigmas[k] * gmm_.sigmas[k]);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] -= w * (x0[i] - gmm_.means[k][i]) * inv;
    }
    return grad;
}

}  // namespace guidpaint
