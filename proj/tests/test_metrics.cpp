#include <doctest.h>

#include <cmath>
#include <random>

#include "guidpaint/error.hpp"
#include "guidpaint/metrics.hpp"

using namespace guidpaint;

namespace {

Tensor random_image(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor t({1, h, w});
    for (auto& v : t.values()) v = u(rng);
    return t;
}

// Straightforward SSIM for one channel with an explicit Gaussian window.
double naive_ssim(const Tensor& a, const Tensor& b, int win, double sigma) {
    const double c1 = std::pow(0.01 * 2.0, 2), c2 = std::pow(0.03 * 2.0, 2);
    std::vector<double> w(win * win);
    double sum = 0.0;
    const int r = win / 2;
    for (int y = 0; y < win; ++y)
        for (int x = 0; x < win; ++x) {
            w[y * win + x] = std::exp(-((y - r) * (y - r) + (x - r) * (x - r)) / (2 * sigma * sigma));
            sum += w[y * win + x];
        }
    for (auto& v : w) v /= sum;
    const int H = a.shape().height, W = a.shape().width;
    double total = 0.0;
    int count = 0;
    for (int y0 = 0; y0 + win <= H; ++y0)
        for (int x0 = 0; x0 + win <= W; ++x0) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int y = 0; y < win; ++y)
                for (int x = 0; x < win; ++x) {
                    const double k = w[y * win + x], p = a.at(0, y0 + y, x0 + x), q = b.at(0, y0 + y, x0 + x);
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

}  // namespace

TEST_CASE("psnr boundary and hand example") {
    const Tensor x = random_image(8, 8, 1);
    CHECK(psnr(x, x) == kPsnrCap);
    CHECK(psnr(Tensor({1, 4, 4}, 0.0), Tensor({1, 4, 4}, 1.0), 2.0) ==
          doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-12));
    CHECK(psnr(Tensor({1, 4, 4}, 0.0), Tensor({1, 4, 4}, 1.0), 2.0) == doctest::Approx(6.0206).epsilon(1e-4));
    CHECK(psnr(x, random_image(8, 8, 2)) >= 0.0);
    CHECK_THROWS_AS(psnr(x, Tensor({1, 4, 4})), Error);
}

TEST_CASE("psnr over a region only sees that region") {
    Tensor a({1, 2, 2}, 0.0), b({1, 2, 2}, 0.0), region({1, 2, 2}, 0.0);
    b[3] = 1.0;
    region[3] = 1.0;
    CHECK(psnr_region(a, b, region) == doctest::Approx(10.0 * std::log10(4.0)));
    region[3] = 0.0;
    region[0] = 1.0;
    CHECK(psnr_region(a, b, region) == kPsnrCap);
}

TEST_CASE("ssim") {
    const Tensor x = random_image(16, 16, 3);
    CHECK(ssim(x, x) == 1.0);
    SUBCASE("checkerboard against its negation is anti-correlated") {
        Tensor c({1, 12, 12});
        for (int y = 0; y < 12; ++y)
            for (int xx = 0; xx < 12; ++xx) c.at(0, y, xx) = (y + xx) % 2 ? 1.0 : -1.0;
        CHECK(ssim(c, c * -1.0) < 0.0);
    }
    SUBCASE("matches a naive implementation") {
        const Tensor y = random_image(16, 16, 4);
        const Tensor z = x * 0.7 + y * 0.3;
        CHECK(ssim(x, z) == doctest::Approx(naive_ssim(x, z, 11, 1.5)).epsilon(1e-12));
        const Tensor small_a = random_image(9, 9, 5), small_b = random_image(9, 9, 6);
        CHECK(ssim(small_a, small_b) == doctest::Approx(naive_ssim(small_a, small_b, 7, 1.5)).epsilon(1e-12));
    }
    SUBCASE("region variant") {
        CHECK(ssim_region(x, x, Tensor(x.shape(), 1.0)) == 1.0);
        CHECK(ssim_region(x, x * 0.5, Tensor(x.shape(), 0.0)) == 1.0);
    }
}

TEST_CASE("inpainting report") {
    const Tensor gt = random_image(16, 16, 7);
    Tensor out = gt;
    const Mask mask = make_benchmark_mask(MaskKind::Half, 16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 8; x < 16; ++x) out.at(0, y, x) = 0.0;
    const auto r = evaluate_inpainting(out, gt, mask);
    CHECK(r.psnr_unknown < r.psnr_full);
    CHECK(r.psnr_unknown == doctest::Approx(psnr_region(out, gt, mask.inverted().values())));
    const auto j = to_json(r);
    CHECK(j.contains("psnr_full"));
    CHECK(j.contains("ssim_unknown"));
    const auto same = evaluate_inpainting(gt, gt, mask);
    CHECK(same.psnr_full == kPsnrCap);
    CHECK(same.ssim_full == 1.0);
}

TEST_CASE("coverage statistics") {
    const auto gmm = GaussianMixture::symmetric_pair(2, 1.0, 0.2);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n;
    std::bernoulli_distribution pick(0.5);
    const int N = 20000;
    std::vector<Tensor> samples;
    for (int i = 0; i < N; ++i) {
        const int k = pick(rng) ? 1 : 0;
        Tensor s = gmm.means[k];
        for (auto& v : s.values()) v += 0.2 * n(rng);
        samples.push_back(s);
    }
    const auto r = mixture_coverage_stats(samples, gmm);
    const double binom = std::sqrt(0.25 / N);
    CHECK(r.max_frequency_error <= 3 * binom);
    // Standard error of the per-component mean norm in 2-D.
    CHECK(r.max_mean_error <= 4 * 0.2 * std::sqrt(2.0 / (N / 2)));

    std::vector<Tensor> at_one(1000, gmm.means[1]);
    const auto one = mixture_coverage_stats(at_one, gmm);
    CHECK(one.frequencies == std::vector<double>{0.0, 1.0});
    CHECK(one.max_mean_error == 0.0);

    CHECK_THROWS_AS(mixture_coverage_stats(std::vector<Tensor>(10, gmm.means[0]), gmm), Error);
}
