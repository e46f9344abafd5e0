#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "guidpaint/models.hpp"
#include "guidpaint/schedule.hpp"

namespace guidpaint {

/// Fully connected network with SiLU hidden activations and a linear head.
/// Batches are stored column-wise.
class Mlp {
public:
    struct Layer {
        Eigen::MatrixXd weight;
        Eigen::VectorXd bias;
    };

    struct Cache {
        std::vector<Eigen::MatrixXd> pre;   // pre-activations per layer
        std::vector<Eigen::MatrixXd> post;  // inputs to each layer, then the output
    };

    Mlp() = default;
    Mlp(const std::vector<int>& sizes, std::uint64_t seed);

    Eigen::MatrixXd forward(const Eigen::MatrixXd& input, Cache* cache = nullptr) const;
    /// Backpropagates dL/doutput; fills parameter gradients when grads is non-null
    /// and returns dL/dinput.
    Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& grad_out, std::vector<Layer>* grads) const;

    std::vector<Layer>& layers() { return layers_; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<int> sizes() const;
    std::size_t parameter_count() const;
    std::uint64_t parameter_checksum() const;

    nlohmann::json to_json() const;
    static Mlp from_json(const nlohmann::json& j);

private:
    std::vector<Layer> layers_;
};

struct TrainingConfig {
    int steps = 3000;
    int batch_size = 64;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

struct ToyDenoiserParams {
    std::vector<int> hidden = {256, 256};
    int embed_dim = 32;
    TrainingConfig training;
};

struct TrainingLog {
    std::vector<double> loss;  // per-step minibatch loss (mean over elements)
    double head_mean(double fraction) const;
    double tail_mean(double fraction) const;
};

/// Small timestep-conditioned MLP noise predictor. Variance head is fixed (v = -1).
class ToyDenoiser final : public Denoiser {
public:
    ToyDenoiser(Shape shape, ScheduleSpec schedule, ToyDenoiserParams params, Mlp net);

    Tensor predict_eps(const Tensor& x_t, int t) const override;
    Tensor predict_var_v(const Tensor& x_t, int t) const override;
    Tensor input_vjp(const Tensor& x_t, int t, const Tensor& cotangent) const override;
    bool image_backend() const override { return true; }
    std::string kind() const override { return "toy_denoiser"; }

    const Shape& shape() const { return shape_; }
    const ScheduleSpec& schedule_spec() const { return schedule_; }
    const Mlp& net() const { return net_; }
    const ToyDenoiserParams& params() const { return params_; }

    Eigen::MatrixXd network_input(const Eigen::MatrixXd& x, const std::vector<int>& t) const;
    /// [x; sinusoidal embedding of t] for each column.
    static Eigen::MatrixXd timestep_input(const Eigen::MatrixXd& x, const std::vector<int>& t, int embed_dim, int T);

    nlohmann::json to_json() const;
    static std::unique_ptr<ToyDenoiser> from_json(const nlohmann::json& j);

private:
    void check_input(const Tensor& x_t, int t) const;

    Shape shape_;
    ScheduleSpec schedule_;
    ToyDenoiserParams params_;
    Mlp net_;
};

struct ToyDenoiserResult {
    std::unique_ptr<ToyDenoiser> model;
    TrainingLog log;
};

/// Minimizes E||eps - eps_theta(x_t, t)||^2 with t uniform over 1..T.
ToyDenoiserResult train_toy_denoiser(const std::vector<Tensor>& dataset, const ScheduleSpec& schedule,
                                     const ToyDenoiserParams& params);

struct ToyClassifierParams {
    int hidden = 64;
    TrainingConfig training{800, 32, 1e-3, 0};
};

class ToyClassifier final : public Classifier {
public:
    ToyClassifier(Shape shape, int classes, ToyClassifierParams params, Mlp net);

    int num_classes() const override { return classes_; }
    std::vector<double> log_probs(const Tensor& x0) const override;
    Tensor grad_log_prob(const Tensor& x0, int y) const override;
    std::string kind() const override { return "toy_classifier"; }

    const Mlp& net() const { return net_; }

    nlohmann::json to_json() const;
    static std::unique_ptr<ToyClassifier> from_json(const nlohmann::json& j);

private:
    Shape shape_;
    int classes_;
    ToyClassifierParams params_;
    Mlp net_;
};

struct ToyClassifierResult {
    std::unique_ptr<ToyClassifier> model;
    TrainingLog log;
    double train_accuracy = 0.0;
};

/// Cross-entropy training on clean images.
ToyClassifierResult train_toy_classifier(const std::vector<Tensor>& images, const std::vector<int>& labels,
                                         const ToyClassifierParams& params);

// Checkpoint files. Mixture descriptions serve as both denoiser and classifier.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& body);
nlohmann::json read_checkpoint(const std::filesystem::path& path);
std::unique_ptr<Denoiser> load_denoiser(const std::filesystem::path& path, const ScheduleSpec& schedule);
std::unique_ptr<Classifier> load_classifier(const std::filesystem::path& path);

}  // namespace guidpaint
