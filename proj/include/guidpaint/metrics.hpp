#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidpaint/data.hpp"
#include "guidpaint/models.hpp"
#include "guidpaint/tensor.hpp"

namespace guidpaint {

/// Reported for identical inputs, where the ratio is unbounded.
inline constexpr double kPsnrCap = 99.0;

/// 10 log10(peak^2 / MSE); peak is 2 for data in [-1, 1].
double psnr(const Tensor& a, const Tensor& b, double peak = 2.0);
/// PSNR over the pixels where region is 1.
double psnr_region(const Tensor& a, const Tensor& b, const Tensor& region, double peak = 2.0);

struct SsimOptions {
    int window = 0;  // 0 picks 11, or 7 when the image is smaller than 11
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 2.0;
};

/// Mean SSIM over all valid Gaussian-window positions and channels.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts = {});
/// Mean SSIM over window positions whose centre pixel lies in region.
double ssim_region(const Tensor& a, const Tensor& b, const Tensor& region, const SsimOptions& opts = {});

struct MetricReport {
    double psnr_full = 0.0;
    double psnr_unknown = 0.0;
    double ssim_full = 0.0;
    double ssim_unknown = 0.0;
};

/// Full-image and unknown-region scores of output against ground truth.
MetricReport evaluate_inpainting(const Tensor& output, const Tensor& ground_truth, const Mask& mask);
nlohmann::json to_json(const MetricReport& r);

struct CoverageReport {
    std::vector<double> frequencies;  // nearest-component assignment rates
    std::vector<Tensor> means;        // empirical mean per component (empty components keep the true mean)
    std::vector<std::size_t> counts;
    double max_frequency_error = 0.0;  // max_k |freq_k - weight_k|
    double max_mean_error = 0.0;       // max_k ||mean_k - mu_k|| over non-empty components
};

CoverageReport mixture_coverage_stats(const std::vector<Tensor>& samples, const GaussianMixture& gmm,
                                      std::size_t min_samples = 1000);

}  // namespace guidpaint
