#include "guidpaint/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "guidpaint/error.hpp"

namespace guidpaint {

namespace {

double psnr_from_mse(double mse, double peak) {
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

int pick_window(const Shape& s, int requested) {
    const int limit = std::min(s.height, s.width);
    if (requested > 0) {
        require(requested <= limit, "SSIM window exceeds the image size");
        require(requested % 2 == 1, "SSIM window must be odd");
        return requested;
    }
    if (limit >= 11) return 11;
    if (limit >= 7) return 7;
    return limit % 2 == 1 ? limit : limit - 1;
}

std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size) * size);
    const double c = (size - 1) / 2.0;
    double total = 0.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double v = std::exp(-((x - c) * (x - c) + (y - c) * (y - c)) / (2.0 * sigma * sigma));
            w[static_cast<std::size_t>(y) * size + x] = v;
            total += v;
        }
    }
    for (double& v : w) v /= total;
    return w;
}

// Visits every valid window; fn(channel, top, left, local ssim).
template <typename Fn>
void for_each_window(const Tensor& a, const Tensor& b, const SsimOptions& opts, Fn fn) {
    check_same_shape(a, b, "ssim");
    const auto& s = a.shape();
    const int win = pick_window(s, opts.window);
    require(win >= 1, "image too small for SSIM");
    const auto w = gaussian_window(win, opts.sigma);
    const double c1 = std::pow(opts.k1 * opts.dynamic_range, 2);
    const double c2 = std::pow(opts.k2 * opts.dynamic_range, 2);
    for (int c = 0; c < s.channels; ++c) {
        for (int top = 0; top + win <= s.height; ++top) {
            for (int left = 0; left + win <= s.width; ++left) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int y = 0; y < win; ++y) {
                    for (int x = 0; x < win; ++x) {
                        const double wt = w[static_cast<std::size_t>(y) * win + x];
                        const double va = a.at(c, top + y, left + x);
                        const double vb = b.at(c, top + y, left + x);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                const double va = saa - ma * ma;
                const double vb = sbb - mb * mb;
                const double cov = sab - ma * mb;
                const double value =
                    ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                fn(c, top + win / 2, left + win / 2, value);
            }
        }
    }
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double peak) {
    check_same_shape(a, b, "psnr");
    require(peak > 0.0, "PSNR peak must be positive");
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
    return psnr_from_mse(sq / static_cast<double>(a.size()), peak);
}

double psnr_region(const Tensor& a, const Tensor& b, const Tensor& region, double peak) {
    check_same_shape(a, b, "psnr");
    check_same_shape(a, region, "psnr region");
    double sq = 0.0;
    double n = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (region[i] == 0.0) continue;
        sq += (a[i] - b[i]) * (a[i] - b[i]);
        n += 1.0;
    }
    if (n == 0.0) return kPsnrCap;
    return psnr_from_mse(sq / n, peak);
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts) {
    double total = 0.0;
    std::size_t n = 0;
    for_each_window(a, b, opts, [&](int, int, int, double v) {
        total += v;
        ++n;
    });
    return total / static_cast<double>(n);
}

double ssim_region(const Tensor& a, const Tensor& b, const Tensor& region, const SsimOptions& opts) {
    check_same_shape(a, region, "ssim region");
    double total = 0.0;
    std::size_t n = 0;
    for_each_window(a, b, opts, [&](int c, int y, int x, double v) {
        if (region.at(c, y, x) == 0.0) return;
        total += v;
        ++n;
    });
    if (n == 0) return 1.0;
    return total / static_cast<double>(n);
}

MetricReport evaluate_inpainting(const Tensor& output, const Tensor& ground_truth, const Mask& mask) {
    const Tensor unknown = mask.inverted().broadcast(output.shape());
    MetricReport r;
    r.psnr_full = psnr(output, ground_truth);
    r.psnr_unknown = psnr_region(output, ground_truth, unknown);
    r.ssim_full = ssim(output, ground_truth);
    r.ssim_unknown = ssim_region(output, ground_truth, unknown);
    return r;
}

nlohmann::json to_json(const MetricReport& r) {
    return {{"psnr_full", r.psnr_full},
            {"psnr_unknown", r.psnr_unknown},
            {"ssim_full", r.ssim_full},
            {"ssim_unknown", r.ssim_unknown}};
}

CoverageReport mixture_coverage_stats(const std::vector<Tensor>& samples, const GaussianMixture& gmm,
                                      std::size_t min_samples) {
    require(!samples.empty(), "coverage statistics need samples");
    require(samples.size() >= min_samples,
            "coverage statistics need at least " + std::to_string(min_samples) + " samples");
    gmm.validate();
    const int K = gmm.K();
    CoverageReport r;
    r.counts.assign(static_cast<std::size_t>(K), 0);
    std::vector<Tensor> sums(static_cast<std::size_t>(K), Tensor(gmm.shape()));
    for (const auto& x : samples) {
        check_same_shape(x, gmm.means.front(), "coverage sample");
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < K; ++k) {
            const double d = squared_norm(x - gmm.means[k]);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        ++r.counts[static_cast<std::size_t>(best)];
        sums[static_cast<std::size_t>(best)] += x;
    }
    for (int k = 0; k < K; ++k) {
        const auto idx = static_cast<std::size_t>(k);
        const double f = static_cast<double>(r.counts[idx]) / static_cast<double>(samples.size());
        r.frequencies.push_back(f);
        r.max_frequency_error = std::max(r.max_frequency_error, std::abs(f - gmm.weights[idx]));
        if (r.counts[idx] == 0) {
            r.means.push_back(gmm.means[idx]);
            continue;
        }
        Tensor mean = sums[idx] * (1.0 / static_cast<double>(r.counts[idx]));
        r.max_mean_error = std::max(r.max_mean_error, std::sqrt(squared_norm(mean - gmm.means[idx])));
        r.means.push_back(std::move(mean));
    }
    return r;
}

}  // namespace guidpaint
