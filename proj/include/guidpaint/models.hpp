#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidpaint/schedule.hpp"
#include "guidpaint/tensor.hpp"

namespace guidpaint {

/// Noise-prediction network contract. Implementations are immutable after
/// construction and must tolerate concurrent calls.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual Tensor predict_eps(const Tensor& x_t, int t) const = 0;
    /// Raw variance-interpolation output in [-1, 1]; (v + 1) / 2 weights log beta_t.
    virtual Tensor predict_var_v(const Tensor& x_t, int t) const = 0;
    /// cotangent^T * d predict_eps / d x_t
    virtual Tensor input_vjp(const Tensor& x_t, int t, const Tensor& cotangent) const = 0;

    virtual bool supports_vjp() const { return true; }
    /// Whether x0 estimates should be clamped to the image range by default.
    virtual bool image_backend() const = 0;
    virtual std::string kind() const = 0;
};

struct LabelScore {
    int label = 0;
    double probability = 0.0;
};

class Classifier {
public:
    virtual ~Classifier() = default;

    virtual int num_classes() const = 0;
    /// Normalized log-probabilities over all labels.
    virtual std::vector<double> log_probs(const Tensor& x0) const = 0;
    virtual Tensor grad_log_prob(const Tensor& x0, int y) const = 0;
    virtual std::string kind() const = 0;

    double log_prob(const Tensor& x0, int y) const;
    /// Labels ordered by descending probability, ties by label index.
    std::vector<LabelScore> top_k(const Tensor& x0, int k) const;

protected:
    void check_label(int y) const;
};

enum class GradientMode {
    Exact,
    StopGradient,  // treat eps_hat as constant inside d x0_hat / d x_t
};

/// VJP of the denoiser honoring the gradient mode; StopGradient yields zeros.
Tensor denoiser_input_vjp(const Denoiser& denoiser, const Tensor& x_t, int t, const Tensor& cotangent,
                          GradientMode mode = GradientMode::Exact);

struct LabelPrediction {
    std::vector<LabelScore> ranking;
    bool clamped = false;         // k exceeded the label set
    bool low_confidence = false;  // empty known region or flat posterior
};

/// Top-k labels of image, or of image ⊙ mask when a mask is given.
LabelPrediction predict_labels(const Classifier& classifier, const Tensor& image, int k,
                               const std::optional<Tensor>& mask = std::nullopt);

// ---------------------------------------------------------------------------
// Gaussian mixture oracle

/// K labeled isotropic Gaussian components in image space; component index is the class label.
struct GaussianMixture {
    std::vector<double> weights;
    std::vector<Tensor> means;
    std::vector<double> sigmas;

    int K() const { return static_cast<int>(weights.size()); }
    const Shape& shape() const { return means.front().shape(); }
    void validate() const;

    /// Symmetric two-component mixture at ±offset along every coordinate.
    static GaussianMixture symmetric_pair(int dim, double offset, double sigma);
};

void to_json(nlohmann::json& j, const GaussianMixture& g);
void from_json(const nlohmann::json& j, GaussianMixture& g);

/// E[x0 | x_t] under the mixture, computed in log space.
Tensor mixture_posterior_x0(const Tensor& x_t, int t, const GaussianMixture& gmm, const NoiseSchedule& sched);
Tensor mixture_predict_eps(const Tensor& x_t, int t, const GaussianMixture& gmm, const NoiseSchedule& sched);
double mixture_classifier_logprob(const Tensor& x0, int y, const GaussianMixture& gmm);

class MixtureDenoiser final : public Denoiser {
public:
    MixtureDenoiser(GaussianMixture gmm, NoiseSchedule sched);

    Tensor predict_eps(const Tensor& x_t, int t) const override;
    Tensor predict_var_v(const Tensor& x_t, int t) const override;
    Tensor input_vjp(const Tensor& x_t, int t, const Tensor& cotangent) const override;
    bool image_backend() const override { return false; }
    std::string kind() const override { return "mixture"; }

    const GaussianMixture& mixture() const { return gmm_; }
    const NoiseSchedule& schedule() const { return sched_; }

private:
    GaussianMixture gmm_;
    NoiseSchedule sched_;
};

class MixtureClassifier final : public Classifier {
public:
    explicit MixtureClassifier(GaussianMixture gmm);

    int num_classes() const override { return gmm_.K(); }
    std::vector<double> log_probs(const Tensor& x0) const override;
    Tensor grad_log_prob(const Tensor& x0, int y) const override;
    std::string kind() const override { return "mixture"; }

private:
    GaussianMixture gmm_;
};

double log_sum_exp(const std::vector<double>& v);
/// Log-probabilities that keep precision when one class dominates.
std::vector<double> log_softmax(std::vector<double> logits);

}  // namespace guidpaint
