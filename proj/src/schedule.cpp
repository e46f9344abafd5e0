#include "guidpaint/schedule.hpp"

#include <algorithm>
#include <string>

#include "guidpaint/error.hpp"

namespace guidpaint {

BetaBounds default_beta_bounds(int T) {
    require(T >= 1, "T must be positive");
    const double scale = 1000.0 / T;
    // Small T would push the scaled end bound past 1.
    const double end = std::min(0.02 * scale, 0.999);
    const double start = std::min(1e-4 * scale, end);
    return {start, end};
}

NoiseSchedule NoiseSchedule::linear(int T) {
    const auto b = default_beta_bounds(T);
    return linear(T, b.start, b.end);
}

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    require(T >= 1, "T must be positive, got " + std::to_string(T));
    require(beta_start > 0.0 && beta_start < 1.0, "beta_start must lie in (0, 1)");
    require(beta_end > 0.0 && beta_end < 1.0, "beta_end must lie in (0, 1)");
    require(beta_start <= beta_end, "beta_start must not exceed beta_end");

    NoiseSchedule s;
    s.T_ = T;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.beta_.resize(T);
    s.alpha_bar_.resize(T);
    s.tilde_beta_.resize(T);

    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        s.beta_[i] = beta_start + (beta_end - beta_start) * frac;
    }
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        prod *= 1.0 - s.beta_[i];
        s.alpha_bar_[i] = prod;
    }
    // t = 1 has no predecessor; use beta_1 there.
    s.tilde_beta_[0] = s.beta_[0];
    for (int i = 1; i < T; ++i) {
        s.tilde_beta_[i] = (1.0 - s.alpha_bar_[i - 1]) / (1.0 - s.alpha_bar_[i]) * s.beta_[i];
    }
    return s;
}

void NoiseSchedule::check_timestep(int t) const {
    if (t < 1 || t > T_) {
        fail(ErrorKind::Validation, "timestep " + std::to_string(t) + " outside 1.." + std::to_string(T_));
    }
}

double NoiseSchedule::beta(int t) const {
    check_timestep(t);
    return beta_[t - 1];
}

double NoiseSchedule::alpha(int t) const { return 1.0 - beta(t); }

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    check_timestep(t);
    return alpha_bar_[t - 1];
}

double NoiseSchedule::tilde_beta(int t) const {
    check_timestep(t);
    return tilde_beta_[t - 1];
}

SkipSequence SkipSequence::build(int T, const std::vector<int>& stage_steps) {
    require(T >= 1, "T must be positive");
    require(!stage_steps.empty(), "stage_steps must not be empty");

    SkipSequence seq;
    seq.T_ = T;
    seq.stage_steps_ = stage_steps;
    for (std::size_t i = 0; i < stage_steps.size(); ++i) {
        const auto [lo, hi] = seq.block(i);
        const long long len = hi - lo;
        const long long s = stage_steps[i];
        if (s < 1 || s > len) {
            fail(ErrorKind::Validation, "stage " + std::to_string(i) + " requests " + std::to_string(s) +
                                            " steps but its block (" + std::to_string(lo) + ", " +
                                            std::to_string(hi) + "] holds " + std::to_string(len));
        }
        for (long long j = 1; j <= s; ++j) {
            // ceil(j * len / s) in exact integer arithmetic
            seq.taus_.push_back(static_cast<int>(lo + (j * len + s - 1) / s));
        }
    }
    return seq;
}

std::pair<int, int> SkipSequence::block(std::size_t i) const {
    const long long n = static_cast<long long>(stage_steps_.size());
    const long long lo = static_cast<long long>(i) * T_ / n;
    const long long hi = static_cast<long long>(i + 1) * T_ / n;
    return {static_cast<int>(lo), static_cast<int>(hi)};
}

NoiseSchedule ScheduleSpec::build_schedule() const {
    if (beta_start == 0.0 && beta_end == 0.0) return NoiseSchedule::linear(T);
    return NoiseSchedule::linear(T, beta_start, beta_end);
}

SkipSequence ScheduleSpec::build_skip() const {
    if (stage_steps.empty()) return SkipSequence::full(T);
    return SkipSequence::build(T, stage_steps);
}

void to_json(nlohmann::json& j, const ScheduleSpec& s) {
    const auto b = s.beta_start == 0.0 && s.beta_end == 0.0 ? default_beta_bounds(s.T)
                                                              : BetaBounds{s.beta_start, s.beta_end};
    j = nlohmann::json{{"T", s.T}, {"beta_start", b.start}, {"beta_end", b.end}, {"stage_steps", s.stage_steps}};
}

void from_json(const nlohmann::json& j, ScheduleSpec& s) {
    s = ScheduleSpec{};
    s.T = j.value("T", 250);
    s.beta_start = j.value("beta_start", 0.0);
    s.beta_end = j.value("beta_end", 0.0);
    s.stage_steps = j.value("stage_steps", std::vector<int>{});
}

}  // namespace guidpaint
