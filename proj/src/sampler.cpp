#include "guidpaint/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "guidpaint/error.hpp"

namespace guidpaint {

// ---------------------------------------------------------------------------
// Configuration

void GuidanceConfig::validate(int T) const {
    require(scale >= 0.0 && std::isfinite(scale), "guidance scale must be non-negative");
    require(guidance_steps >= 0, "guidance steps must be non-negative");
    require(inpaint_steps >= 0, "inpainting steps must be non-negative");
    require(lambda_reg >= 0.0, "lambda_reg must be non-negative");
    require(lr_base >= 0.0 && lr_decay > 0.0, "learning-rate law must be non-negative");
    require(t_stop_comp >= 0 && t_stop_comp <= T,
            "t_stop_comp must lie in 0.." + std::to_string(T) + ", got " + std::to_string(t_stop_comp));
    require(eta_ddim >= 0.0 && eta_ddim <= 1.0, "eta_ddim must lie in [0, 1]");
    require(candidates >= 1, "at least one candidate is required");
    if (mode == GuidanceMode::Local) {
        require(!local_specs.empty(), "local guidance needs at least one (mask, label) pair");
    } else if (enable_cg) {
        require(!labels.empty(), "global guidance needs a target label");
    }
}

void to_json(nlohmann::json& j, const GuidanceConfig& c) {
    nlohmann::json local = nlohmann::json::array();
    for (const auto& s : c.local_specs) local.push_back({{"label", s.label}});
    j = nlohmann::json{{"scale", c.scale},
                       {"i_guid", c.guidance_steps},
                       {"i_inp", c.inpaint_steps},
                       {"lambda_reg", c.lambda_reg},
                       {"lr_base", c.lr_base},
                       {"lr_decay", c.lr_decay},
                       {"t_stop_comp", c.t_stop_comp},
                       {"eta_ddim", c.eta_ddim},
                       {"candidates", c.candidates},
                       {"seed", c.seed},
                       {"enable_cg", c.enable_cg},
                       {"enable_ss", c.enable_ss},
                       {"mode", c.mode == GuidanceMode::Local ? "local" : "global"},
                       {"labels", c.labels},
                       {"local_specs", local},
                       {"clamp_x0", c.clamp_x0 ? nlohmann::json(*c.clamp_x0) : nlohmann::json(nullptr)},
                       {"stop_gradient", c.gradient_mode == GradientMode::StopGradient}};
}

void from_json(const nlohmann::json& j, GuidanceConfig& c) {
    c = GuidanceConfig{};
    c.scale = j.value("scale", c.scale);
    c.guidance_steps = j.value("i_guid", c.guidance_steps);
    c.inpaint_steps = j.value("i_inp", c.inpaint_steps);
    c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
    c.lr_base = j.value("lr_base", c.lr_base);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.t_stop_comp = j.value("t_stop_comp", c.t_stop_comp);
    c.eta_ddim = j.value("eta_ddim", c.eta_ddim);
    c.candidates = j.value("candidates", c.candidates);
    c.seed = j.value("seed", c.seed);
    c.enable_cg = j.value("enable_cg", c.enable_cg);
    c.enable_ss = j.value("enable_ss", c.enable_ss);
    const auto mode = j.value("mode", std::string("global"));
    require(mode == "global" || mode == "local", "mode must be 'global' or 'local'");
    c.mode = mode == "local" ? GuidanceMode::Local : GuidanceMode::Global;
    c.labels = j.value("labels", std::vector<int>{});
    if (j.contains("clamp_x0") && !j.at("clamp_x0").is_null()) c.clamp_x0 = j.at("clamp_x0").get<bool>();
    c.gradient_mode = j.value("stop_gradient", false) ? GradientMode::StopGradient : GradientMode::Exact;
}

InpaintTask::InpaintTask(Tensor gt, const Mask& m) : ground_truth(std::move(gt)), mask(m.broadcast(ground_truth.shape())) {}

// ---------------------------------------------------------------------------
// Step transforms

Tensor forward_noise(const Tensor& x0, int t, const NoiseSchedule& sched, const Tensor& noise) {
    check_same_shape(x0, noise, "forward_noise");
    const double ab = sched.alpha_bar(t);
    sched.check_timestep(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * noise[i];
    return out;
}

Tensor predict_x0(const Tensor& x_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched, bool clamp) {
    check_same_shape(x_t, eps_hat, "predict_x0");
    const double ab = sched.alpha_bar(t);
    sched.check_timestep(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = (x_t[i] - b * eps_hat[i]) / a;
        out[i] = clamp ? std::clamp(v, -1.0, 1.0) : v;
    }
    return out;
}

double ddim_sigma(const NoiseSchedule& sched, int t, int t_prev, double eta) {
    if (eta == 0.0) return 0.0;
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
}

Tensor ddim_step(const Tensor& x_t, const Tensor& x0_hat, int t, int t_prev, const NoiseSchedule& sched, double sigma,
                 const Tensor* noise) {
    check_same_shape(x_t, x0_hat, "ddim_step");
    sched.check_timestep(t);
    require(t_prev >= 0 && t_prev < t, "ddim_step needs 0 <= t_prev < t");
    require(sigma >= 0.0, "sigma must be non-negative");
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    const double residual = 1.0 - ab_prev - sigma * sigma;
    if (residual < -1e-12) {
        fail(ErrorKind::Validation, "sigma^2 exceeds 1 - alpha_bar at t_prev=" + std::to_string(t_prev));
    }
    if (sigma > 0.0) {
        require(noise != nullptr, "ddim_step with sigma > 0 needs noise");
        check_same_shape(x_t, *noise, "ddim_step noise");
    }
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    const double a_prev = std::sqrt(ab_prev);
    const double dir = std::sqrt(std::max(residual, 0.0));
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = a_prev * x0_hat[i];
        if (dir > 0.0) v += dir * (x_t[i] - a * x0_hat[i]) / b;
        if (sigma > 0.0) v += sigma * (*noise)[i];
        out[i] = v;
    }
    return out;
}

namespace {

Tensor gaussian(const Shape& shape, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor out(shape);
    for (double& v : out.values()) v = normal(rng);
    return out;
}

Tensor paste_known(const Tensor& gt, const Tensor& mask, const Tensor& x) {
    check_same_shape(gt, mask, "composite mask");
    check_same_shape(gt, x, "composite");
    Tensor out(gt.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gt[i] * mask[i] + x[i] * (1.0 - mask[i]);
    return out;
}

void check_finite(const Tensor& g, const char* what, int t) {
    if (!all_finite(g)) {
        fail(ErrorKind::Runtime, std::string("non-finite ") + what + " gradient at t=" + std::to_string(t));
    }
}

}  // namespace

Tensor composite_renoise(const Tensor& x0_hat, const Tensor& gt, const Tensor& mask, int t, const NoiseSchedule& sched,
                         std::mt19937_64& rng) {
    require(t > 0, "composite re-noising needs t > 0");
    const Tensor comp = paste_known(gt, mask, x0_hat);
    return forward_noise(comp, t, sched, gaussian(comp.shape(), rng));
}

double inpaint_learning_rate(const SamplerContext& ctx, int t) {
    const auto& c = ctx.config;
    return c.lr_base * std::sqrt(ctx.schedule.alpha_bar(t)) * std::pow(c.lr_decay, ctx.schedule.T() - t);
}

Tensor estimate_x0(const SamplerContext& ctx, const Tensor& x_t, int t) {
    return predict_x0(x_t, t, ctx.denoiser.predict_eps(x_t, t), ctx.schedule, ctx.clamp());
}

Tensor estimate_x0_vjp(const SamplerContext& ctx, const Tensor& x_t, int t, const Tensor& cotangent) {
    const double ab = ctx.schedule.alpha_bar(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    Tensor g = cotangent;
    if (ctx.clamp()) {
        // Clipped components carry no gradient.
        const Tensor raw = predict_x0(x_t, t, ctx.denoiser.predict_eps(x_t, t), ctx.schedule, false);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (raw[i] < -1.0 || raw[i] > 1.0) g[i] = 0.0;
        }
    }
    const Tensor through_eps = denoiser_input_vjp(ctx.denoiser, x_t, t, g, ctx.config.gradient_mode);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (g[i] - b * through_eps[i]) / a;
    return out;
}

double inpaint_loss(const SamplerContext& ctx, const InpaintTask& task, const Tensor& x_t, const Tensor& anchor,
                    int t) {
    const Tensor x0 = estimate_x0(ctx, x_t, t);
    double rec = 0.0;
    double reg = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        const double d = (task.ground_truth[i] - x0[i]) * task.mask[i];
        rec += d * d;
        const double r = x_t[i] - anchor[i];
        reg += r * r;
    }
    return rec + ctx.config.lambda_reg * reg;
}

Tensor inpaint_loss_grad(const SamplerContext& ctx, const InpaintTask& task, const Tensor& x_t, const Tensor& anchor,
                         int t) {
    check_same_shape(x_t, task.ground_truth, "inpaint_loss_grad");
    const Tensor x0 = estimate_x0(ctx, x_t, t);
    Tensor residual(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        residual[i] = 2.0 * (x0[i] - task.ground_truth[i]) * task.mask[i];
    }
    Tensor grad = estimate_x0_vjp(ctx, x_t, t, residual);
    grad.axpy(2.0 * ctx.config.lambda_reg, x_t - anchor);
    return grad;
}

double guidance_loss(const SamplerContext& ctx, const Tensor& x_t, int t, int label, const Tensor* region) {
    require(ctx.classifier != nullptr, "classifier guidance needs a classifier");
    Tensor x0 = estimate_x0(ctx, x_t, t);
    if (region) x0 = hadamard(x0, *region);
    return -ctx.classifier->log_prob(x0, label);
}

Tensor guidance_loss_grad(const SamplerContext& ctx, const Tensor& x_t, int t, int label, const Tensor* region) {
    require(ctx.classifier != nullptr, "classifier guidance needs a classifier");
    Tensor x0 = estimate_x0(ctx, x_t, t);
    if (region) x0 = hadamard(x0, *region);
    Tensor g = ctx.classifier->grad_log_prob(x0, label) * -1.0;
    if (region) g = hadamard(g, *region);
    return estimate_x0_vjp(ctx, x_t, t, g);
}

Tensor guidance_variance(const SamplerContext& ctx, const Tensor& x_t, int t) {
    const Tensor v = ctx.denoiser.predict_var_v(x_t, t);
    const double log_beta = std::log(ctx.schedule.beta(t));
    const double log_tilde = std::log(ctx.schedule.tilde_beta(t));
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double frac = (v[i] + 1.0) / 2.0;
        out[i] = std::exp(frac * log_beta + (1.0 - frac) * log_tilde);
    }
    return out;
}

Tensor inpaint_constrain(const SamplerContext& ctx, const InpaintTask& task, const Tensor& x_t, int t) {
    const int steps = ctx.config.inpaint_steps;
    if (steps == 0) return x_t;
    const Tensor anchor = x_t;
    const double lr = inpaint_learning_rate(ctx, t);
    Tensor x = x_t;
    for (int k = 0; k < steps; ++k) {
        const Tensor g = inpaint_loss_grad(ctx, task, x, anchor, t);
        check_finite(g, "inpainting", t);
        x.axpy(-lr, g);
    }
    return x;
}

Tensor classifier_guide(const SamplerContext& ctx, const Tensor& x_t, int t) {
    const auto& c = ctx.config;
    if (!c.enable_cg || c.scale == 0.0 || c.guidance_steps == 0) return x_t;
    require(ctx.classifier != nullptr, "classifier guidance needs a classifier");

    Tensor x = x_t;
    auto descend = [&](int label, const Tensor* region) {
        for (int k = 0; k < c.guidance_steps; ++k) {
            const Tensor g = guidance_loss_grad(ctx, x, t, label, region);
            check_finite(g, "guidance", t);
            const Tensor var = guidance_variance(ctx, x, t);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] -= c.scale * var[i] * g[i];
        }
    };
    if (c.mode == GuidanceMode::Local) {
        require(!c.local_specs.empty(), "local guidance needs at least one (mask, label) pair");
        for (const auto& spec : c.local_specs) {
            const Tensor region = spec.mask.inverted().broadcast(x.shape());
            descend(spec.label, &region);
        }
    } else {
        require(!c.labels.empty(), "global guidance needs a target label");
        descend(c.labels.front(), nullptr);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Phases

std::uint64_t branch_seed(std::uint64_t seed, int branch) {
    // splitmix64 finalizer over (seed, branch)
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(branch) + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

int handoff_timestep(const SkipSequence& skip, const GuidanceConfig& cfg) {
    if (!cfg.enable_ss) return skip.T();
    int best = 0;
    for (int tau : skip.taus()) {
        if (tau <= cfg.t_stop_comp) best = tau;
    }
    return best;
}

namespace {

// Previous timestep in the skip sequence (0 below the first).
int previous_tau(const std::vector<int>& taus, std::size_t i) { return i == 0 ? 0 : taus[i - 1]; }

Tensor sampling_step(const SamplerContext& ctx, const InpaintTask& task, Tensor x, int t, int t_prev, bool composite,
                     double eta, std::mt19937_64* rng) {
    x = classifier_guide(ctx, x, t);
    x = inpaint_constrain(ctx, task, x, t);
    Tensor x0 = estimate_x0(ctx, x, t);
    if (composite) {
        x = composite_renoise(x0, task.ground_truth, task.mask, t, ctx.schedule, *rng);
        x0 = estimate_x0(ctx, x, t);
    }
    const double sigma = ddim_sigma(ctx.schedule, t, t_prev, eta);
    if (sigma > 0.0) {
        const Tensor noise = gaussian(x.shape(), *rng);
        return ddim_step(x, x0, t, t_prev, ctx.schedule, sigma, &noise);
    }
    return ddim_step(x, x0, t, t_prev, ctx.schedule, 0.0);
}

std::size_t steps_above(const SkipSequence& skip, int handoff) {
    return static_cast<std::size_t>(
        std::count_if(skip.taus().begin(), skip.taus().end(), [handoff](int tau) { return tau > handoff; }));
}

Candidate branch_impl(const SamplerContext& ctx, const InpaintTask& task, int branch,
                      const std::function<void()>& on_step) {
    const auto& cfg = ctx.config;
    const auto& taus = ctx.skip.taus();
    const int handoff = handoff_timestep(ctx.skip, cfg);

    Candidate c;
    c.index = branch;
    c.id = std::to_string(branch);
    c.branch_seed = branch_seed(cfg.seed, branch);
    std::mt19937_64 rng(c.branch_seed);

    Tensor x = gaussian(task.ground_truth.shape(), rng);
    for (std::size_t i = taus.size(); i-- > 0;) {
        const int t = taus[i];
        if (t <= handoff) break;
        const bool composite = cfg.enable_ss && t > cfg.t_stop_comp;
        x = sampling_step(ctx, task, std::move(x), t, previous_tau(taus, i), composite, cfg.eta_ddim, &rng);
        if (on_step) on_step();
    }
    c.t = handoff;
    c.state = x;
    const Tensor x0 = handoff > 0 ? estimate_x0(ctx, x, handoff) : x;
    c.preview = paste_known(task.ground_truth, task.mask, x0);
    c.score = candidate_score(ctx, c.preview);
    return c;
}

}  // namespace

double candidate_score(const SamplerContext& ctx, const Tensor& preview) {
    if (ctx.classifier == nullptr) return 0.0;
    const auto& cfg = ctx.config;
    if (cfg.mode == GuidanceMode::Local) {
        double total = 0.0;
        for (const auto& spec : cfg.local_specs) {
            const Tensor region = spec.mask.inverted().broadcast(preview.shape());
            total += ctx.classifier->log_prob(hadamard(preview, region), spec.label);
        }
        return total;
    }
    if (cfg.labels.empty()) return 0.0;
    return ctx.classifier->log_prob(preview, cfg.labels.front());
}

std::vector<std::size_t> rank_candidates(const std::vector<Candidate>& candidates) {
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (candidates[a].score != candidates[b].score) return candidates[a].score > candidates[b].score;
        return candidates[a].index < candidates[b].index;
    });
    return order;
}

Candidate run_branch(const SamplerContext& ctx, const InpaintTask& task, int branch) {
    return branch_impl(ctx, task, branch, {});
}

std::vector<Candidate> run_stochastic_phase(const SamplerContext& ctx, const InpaintTask& task,
                                            const ExecutionOptions& opts) {
    const auto& cfg = ctx.config;
    cfg.validate(ctx.schedule.T());
    require(ctx.skip.T() == ctx.schedule.T(), "skip sequence and schedule disagree on T");
    if (cfg.enable_cg) require(ctx.classifier != nullptr, "classifier guidance is enabled but no classifier is loaded");

    const auto n = static_cast<std::size_t>(cfg.candidates);
    const std::size_t total = n * steps_above(ctx.skip, handoff_timestep(ctx.skip, cfg));
    std::atomic<std::size_t> done{0};
    auto on_step = [&]() {
        const std::size_t d = ++done;
        if (opts.progress) opts.progress(d, total);
    };

    std::vector<Candidate> out(n);
    std::vector<std::exception_ptr> errors(n);
    auto work = [&](std::size_t b) {
        try {
            out[b] = branch_impl(ctx, task, static_cast<int>(b), on_step);
        } catch (...) {
            errors[b] = std::current_exception();
        }
    };

    if (opts.parallel && n > 1) {
        unsigned threads = opts.max_threads ? opts.max_threads : std::max(1u, std::thread::hardware_concurrency());
        threads = std::min<unsigned>(threads, static_cast<unsigned>(n));
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (unsigned i = 0; i < threads; ++i) {
            pool.emplace_back([&]() {
                for (std::size_t b = next++; b < n; b = next++) work(b);
            });
        }
        for (auto& th : pool) th.join();
    } else {
        for (std::size_t b = 0; b < n; ++b) work(b);
    }

    for (std::size_t b = 0; b < n; ++b) {
        if (!errors[b]) continue;
        try {
            std::rethrow_exception(errors[b]);
        } catch (const Error& e) {
            throw Error(e.kind(), "branch " + std::to_string(b) + ": " + e.what());
        } catch (const std::exception& e) {
            throw Error(ErrorKind::Runtime, "branch " + std::to_string(b) + ": " + e.what());
        }
    }
    return out;
}

Tensor run_deterministic_refinement(const SamplerContext& ctx, const InpaintTask& task, const Candidate& candidate,
                                    const std::function<void(std::size_t, std::size_t)>& progress) {
    const auto& taus = ctx.skip.taus();
    check_same_shape(candidate.state, task.ground_truth, "refinement candidate");
    require(ctx.skip.T() == ctx.schedule.T(), "skip sequence and schedule disagree on T");
    if (candidate.t != 0 && !std::binary_search(taus.begin(), taus.end(), candidate.t)) {
        fail(ErrorKind::Validation,
             "candidate timestep " + std::to_string(candidate.t) + " is not on this run's skip sequence");
    }
    if (ctx.config.enable_cg) require(ctx.classifier != nullptr, "classifier guidance is enabled but no classifier is loaded");

    const auto total = static_cast<std::size_t>(
        std::count_if(taus.begin(), taus.end(), [&](int tau) { return tau <= candidate.t; }));
    std::size_t done = 0;
    Tensor x = candidate.state;
    for (std::size_t i = taus.size(); i-- > 0;) {
        const int t = taus[i];
        if (t > candidate.t) continue;
        x = sampling_step(ctx, task, std::move(x), t, previous_tau(taus, i), false, 0.0, nullptr);
        if (progress) progress(++done, total);
    }
    return paste_known(task.ground_truth, task.mask, x);
}

RunResult run_pipeline(const SamplerContext& ctx, const InpaintTask& task, std::optional<std::size_t> selection,
                       const ExecutionOptions& opts) {
    using clock = std::chrono::steady_clock;
    RunResult r;
    const auto t0 = clock::now();
    r.candidates = run_stochastic_phase(ctx, task, opts);
    const auto t1 = clock::now();
    if (selection) {
        if (*selection >= r.candidates.size()) {
            fail(ErrorKind::NotFound, "candidate " + std::to_string(*selection) + " is not in the candidate set");
        }
        r.selected = *selection;
    } else {
        r.selected = rank_candidates(r.candidates).front();
    }
    r.output = run_deterministic_refinement(ctx, task, r.candidates[r.selected]);
    const auto t2 = clock::now();
    r.metrics = evaluate_inpainting(r.output, task.ground_truth, Mask(task.mask));
    r.timings.stochastic_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    r.timings.refinement_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    return r;
}

}  // namespace guidpaint
