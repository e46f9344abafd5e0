#pragma once

#include <vector>

#include <nlohmann/json.hpp>

namespace guidpaint {

/// Linear beta schedule with its derived tables. Timesteps are 1-based:
/// valid t is 1..T, and alpha_bar(0) is defined as 1 (clean data).
class NoiseSchedule {
public:
    static NoiseSchedule linear(int T, double beta_start, double beta_end);
    /// Linear schedule with bounds rescaled to T (1e-4 and 0.02 at T=1000).
    static NoiseSchedule linear(int T);

    int T() const { return T_; }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }

    double beta(int t) const;
    double alpha(int t) const;
    double alpha_bar(int t) const;
    double tilde_beta(int t) const;

    void check_timestep(int t) const;

private:
    NoiseSchedule() = default;

    int T_ = 0;
    double beta_start_ = 0.0;
    double beta_end_ = 0.0;
    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
    std::vector<double> tilde_beta_;
};

/// Default linear-schedule bounds for a given T.
struct BetaBounds {
    double start;
    double end;
};
BetaBounds default_beta_bounds(int T);

/// Non-uniform strictly increasing subsequence of 1..T built from per-stage
/// step counts. Stage 0 covers the block nearest t = 1.
class SkipSequence {
public:
    static SkipSequence build(int T, const std::vector<int>& stage_steps);
    static SkipSequence full(int T) { return build(T, {T}); }

    int T() const { return T_; }
    const std::vector<int>& taus() const { return taus_; }
    const std::vector<int>& stage_steps() const { return stage_steps_; }
    std::size_t size() const { return taus_.size(); }

    /// Inclusive-exclusive bounds (lo, hi] of stage block i.
    std::pair<int, int> block(std::size_t i) const;

private:
    int T_ = 0;
    std::vector<int> taus_;
    std::vector<int> stage_steps_;
};

/// What a run config stores; tables are always rebuilt from this.
struct ScheduleSpec {
    int T = 250;
    double beta_start = 0.0;  // 0 means "use the default for T"
    double beta_end = 0.0;
    std::vector<int> stage_steps;  // empty means the full sequence

    NoiseSchedule build_schedule() const;
    SkipSequence build_skip() const;
};

void to_json(nlohmann::json& j, const ScheduleSpec& s);
void from_json(const nlohmann::json& j, ScheduleSpec& s);

}  // namespace guidpaint
