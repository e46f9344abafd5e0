#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidpaint/data.hpp"
#include "guidpaint/metrics.hpp"
#include "guidpaint/models.hpp"
#include "guidpaint/schedule.hpp"
#include "guidpaint/tensor.hpp"

namespace guidpaint {

enum class GuidanceMode { Global, Local };

/// One local-guidance region: the classifier sees x0_hat ⊙ (1 - mask).
struct LocalSpec {
    Mask mask;
    int label = 0;
};

struct GuidanceConfig {
    double scale = 1.0;       // classifier guidance scale s
    int guidance_steps = 2;   // descent steps per timestep on the classifier loss
    int inpaint_steps = 2;    // descent steps per timestep on the known-region loss
    double lambda_reg = 0.01;
    double lr_base = 0.02;    // eta_t = lr_base * sqrt(alpha_bar_t) * lr_decay^(T - t)
    double lr_decay = 1.012;
    int t_stop_comp = 130;    // composite re-noising runs while t > t_stop_comp
    double eta_ddim = 0.0;
    int candidates = 1;
    std::uint64_t seed = 0;
    bool enable_cg = true;
    bool enable_ss = true;
    GuidanceMode mode = GuidanceMode::Global;
    std::vector<int> labels;  // global-mode target; the first entry is used
    std::vector<LocalSpec> local_specs;
    std::optional<bool> clamp_x0;  // unset: clamp for image backends only
    GradientMode gradient_mode = GradientMode::Exact;

    void validate(int T) const;
};

/// Serializes everything except local-spec masks, which live in separate files.
void to_json(nlohmann::json& j, const GuidanceConfig& c);
void from_json(const nlohmann::json& j, GuidanceConfig& c);

/// Everything a sampling step reads. Holds references only.
struct SamplerContext {
    const Denoiser& denoiser;
    const Classifier* classifier;  // may be null when guidance is disabled
    const NoiseSchedule& schedule;
    const SkipSequence& skip;
    const GuidanceConfig& config;

    bool clamp() const { return config.clamp_x0.value_or(denoiser.image_backend()); }
};

/// Ground truth and its known-region mask, already broadcast to the image shape.
struct InpaintTask {
    Tensor ground_truth;
    Tensor mask;

    InpaintTask(Tensor gt, const Mask& m);
};

// ---------------------------------------------------------------------------
// Step transforms

/// sqrt(ab_t) x0 + sqrt(1 - ab_t) noise
Tensor forward_noise(const Tensor& x0, int t, const NoiseSchedule& sched, const Tensor& noise);

/// (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t), optionally clipped to [-1, 1].
Tensor predict_x0(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched, bool clamp = false);

/// DDIM sigma for the given eta; zero when eta is zero.
double ddim_sigma(const NoiseSchedule& sched, int t, int t_prev, double eta);

/// One DDIM transition t -> t_prev (t_prev = 0 means clean data).
Tensor ddim_step(const Tensor& x_t, const Tensor& x0_hat, int t, int t_prev, const NoiseSchedule& sched, double sigma,
                 const Tensor* noise = nullptr);

/// x0 = gt ⊙ M + x0_hat ⊙ (1 - M), forward-noised to t with fresh noise from rng.
Tensor composite_renoise(const Tensor& x0_hat, const Tensor& gt, const Tensor& mask, int t, const NoiseSchedule& sched,
                         std::mt19937_64& rng);

/// Learning rate of the known-region descent at timestep t.
double inpaint_learning_rate(const SamplerContext& ctx, int t);

/// x0_hat(x_t) as the sampler sees it (clamping per context).
Tensor estimate_x0(const SamplerContext& ctx, const Tensor& x_t, int t);
/// cotangent^T d x0_hat / d x_t through the denoiser and the optional clamp.
Tensor estimate_x0_vjp(const SamplerContext& ctx, const Tensor& x_t, int t, const Tensor& cotangent);

/// ||gt ⊙ M - x0_hat(x_t) ⊙ M||^2 + lambda ||x_t - anchor||^2
double inpaint_loss(const SamplerContext& ctx, const InpaintTask& task, const Tensor& x_t, const Tensor& anchor, int t);
Tensor inpaint_loss_grad(const SamplerContext& ctx, const InpaintTask& task, const Tensor& x_t, const Tensor& anchor,
                         int t);

/// -log p(label | x0_hat(x_t) ⊙ region); region null means the whole image.
double guidance_loss(const SamplerContext& ctx, const Tensor& x_t, int t, int label, const Tensor* region = nullptr);
Tensor guidance_loss_grad(const SamplerContext& ctx, const Tensor& x_t, int t, int label,
                          const Tensor* region = nullptr);

/// exp(v log beta_t + (1 - v) log tilde_beta_t) with v = (var_v + 1) / 2, elementwise.
Tensor guidance_variance(const SamplerContext& ctx, const Tensor& x_t, int t);

/// I_inp descent steps on the known-region loss, anchored at the input.
Tensor inpaint_constrain(const SamplerContext& ctx, const InpaintTask& task, const Tensor& x_t, int t);

/// I_guid classifier-guidance updates (per region, in order, for local mode).
Tensor classifier_guide(const SamplerContext& ctx, const Tensor& x_t, int t);

// ---------------------------------------------------------------------------
// Phases

struct Candidate {
    int index = 0;
    std::string id;
    int t = 0;                  // handoff timestep of state
    Tensor state;               // x_t at the handoff
    Tensor preview;             // x0_hat at the handoff with the known region pasted
    std::uint64_t branch_seed = 0;
    double score = 0.0;         // classifier log-probability of the target on the preview
};

struct ExecutionOptions {
    bool parallel = false;
    unsigned max_threads = 0;  // 0: hardware concurrency
    /// Called after each sampling step with (completed, total) across all branches.
    std::function<void(std::size_t, std::size_t)> progress;
};

std::uint64_t branch_seed(std::uint64_t seed, int branch);

/// Largest skip timestep <= t_stop_comp (T when stochastic sampling is disabled, 0 if none).
int handoff_timestep(const SkipSequence& skip, const GuidanceConfig& cfg);

/// Runs one branch from x_T down to the handoff timestep.
Candidate run_branch(const SamplerContext& ctx, const InpaintTask& task, int branch);

std::vector<Candidate> run_stochastic_phase(const SamplerContext& ctx, const InpaintTask& task,
                                            const ExecutionOptions& opts = {});

/// Deterministic (sigma = 0) continuation from the candidate to t = 0, then pastes the known region.
Tensor run_deterministic_refinement(const SamplerContext& ctx, const InpaintTask& task, const Candidate& candidate,
                                    const std::function<void(std::size_t, std::size_t)>& progress = {});

/// Score used for candidate ranking and auto-selection.
double candidate_score(const SamplerContext& ctx, const Tensor& preview);
/// Indices ordered best first; ties broken by branch index.
std::vector<std::size_t> rank_candidates(const std::vector<Candidate>& candidates);

struct Timings {
    double stochastic_ms = 0.0;
    double refinement_ms = 0.0;
};

struct RunResult {
    std::vector<Candidate> candidates;
    std::size_t selected = 0;
    Tensor output;
    MetricReport metrics;
    Timings timings;
};

/// Stochastic phase, selection (explicit index or auto), refinement and metrics.
RunResult run_pipeline(const SamplerContext& ctx, const InpaintTask& task, std::optional<std::size_t> selection = {},
                       const ExecutionOptions& opts = {});

}  // namespace guidpaint
