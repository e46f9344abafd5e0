#include "guidpaint/models.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "guidpaint/error.hpp"

namespace guidpaint {

void Classifier::check_label(int y) const {
    if (y < 0 || y >= num_classes()) {
        fail(ErrorKind::Validation,
             "unknown label " + std::to_string(y) + " (classifier has " + std::to_string(num_classes()) + ")");
    }
}

double Classifier::log_prob(const Tensor& x0, int y) const {
    check_label(y);
    return log_probs(x0)[static_cast<std::size_t>(y)];
}

std::vector<LabelScore> Classifier::top_k(const Tensor& x0, int k) const {
    require(k >= 1, "k must be at least 1");
    const auto lp = log_probs(x0);
    std::vector<LabelScore> all;
    all.reserve(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) all.push_back({static_cast<int>(i), std::exp(lp[i])});
    std::stable_sort(all.begin(), all.end(),
                     [](const LabelScore& a, const LabelScore& b) { return a.probability > b.probability; });
    all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(k)));
    return all;
}

Tensor denoiser_input_vjp(const Denoiser& denoiser, const Tensor& x_t, int t, const Tensor& cotangent,
                          GradientMode mode) {
    check_same_shape(x_t, cotangent, "input_vjp");
    if (mode == GradientMode::StopGradient) return Tensor(x_t.shape());
    if (!denoiser.supports_vjp()) {
        fail(ErrorKind::Unsupported, "denoiser backend '" + denoiser.kind() + "' cannot differentiate its input");
    }
    return denoiser.input_vjp(x_t, t, cotangent);
}

LabelPrediction predict_labels(const Classifier& classifier, const Tensor& image, int k,
                               const std::optional<Tensor>& mask) {
    require(k >= 1, "k must be at least 1");
    LabelPrediction out;
    if (k > classifier.num_classes()) {
        std::cerr << "warning: requested top-" << k << " from " << classifier.num_classes()
                  << " labels; returning all\n";
        k = classifier.num_classes();
        out.clamped = true;
    }
    Tensor input = image;
    if (mask) {
        check_same_shape(image, *mask, "predict_labels mask");
        input = hadamard(image, *mask);
        const double known = std::accumulate(mask->values().begin(), mask->values().end(), 0.0);
        if (known == 0.0) out.low_confidence = true;
    }
    out.ranking = classifier.top_k(input, k);
    // A top label no better than uniform carries no information.
    if (out.ranking.front().probability <= 1.0 / classifier.num_classes() + 1e-12) out.low_confidence = true;
    return out;
}

}  // namespace guidpaint
