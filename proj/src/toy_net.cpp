#include "guidpaint/toy_net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "guidpaint/error.hpp"

namespace guidpaint {

namespace {

constexpr int kCheckpointVersion = 1;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::MatrixXd silu(const Eigen::MatrixXd& x) {
    return x.unaryExpr([](double v) { return v * sigmoid(v); });
}

Eigen::MatrixXd silu_grad(const Eigen::MatrixXd& x) {
    return x.unaryExpr([](double v) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
    });
}

struct Adam {
    double lr;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int step = 0;
    std::vector<Mlp::Layer> m;
    std::vector<Mlp::Layer> v;

    Adam(const Mlp& net, double learning_rate) : lr(learning_rate) {
        for (const auto& l : net.layers()) {
            m.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
        }
        v = m;
    }

    void apply(Mlp& net, const std::vector<Mlp::Layer>& grads) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, step);
        const double c2 = 1.0 - std::pow(beta2, step);
        auto& layers = net.layers();
        for (std::size_t i = 0; i < layers.size(); ++i) {
            m[i].weight = beta1 * m[i].weight + (1.0 - beta1) * grads[i].weight;
            v[i].weight = beta2 * v[i].weight + (1.0 - beta2) * grads[i].weight.cwiseProduct(grads[i].weight);
            m[i].bias = beta1 * m[i].bias + (1.0 - beta1) * grads[i].bias;
            v[i].bias = beta2 * v[i].bias + (1.0 - beta2) * grads[i].bias.cwiseProduct(grads[i].bias);
            layers[i].weight.array() -=
                lr * (m[i].weight.array() / c1) / ((v[i].weight.array() / c2).sqrt() + eps);
            layers[i].bias.array() -= lr * (m[i].bias.array() / c1) / ((v[i].bias.array() / c2).sqrt() + eps);
        }
    }
};

Eigen::MatrixXd column(const Tensor& x) {
    return Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
}

Tensor to_tensor(const Shape& shape, const Eigen::VectorXd& v) {
    return Tensor(shape, std::vector<double>(v.data(), v.data() + v.size()));
}

nlohmann::json training_json(const TrainingConfig& t) {
    return {{"steps", t.steps}, {"batch_size", t.batch_size}, {"learning_rate", t.learning_rate}, {"seed", t.seed}};
}

TrainingConfig training_from_json(const nlohmann::json& j) {
    TrainingConfig t;
    t.steps = j.at("steps").get<int>();
    t.batch_size = j.at("batch_size").get<int>();
    t.learning_rate = j.at("learning_rate").get<double>();
    t.seed = j.at("seed").get<std::uint64_t>();
    return t;
}

nlohmann::json shape_json(const Shape& s) { return {s.channels, s.height, s.width}; }

Shape shape_from_json(const nlohmann::json& j) {
    const auto d = j.get<std::vector<int>>();
    require(d.size() == 3, "shape must have three entries");
    return Shape{d[0], d[1], d[2]};
}

void check_training(const TrainingConfig& t) {
    require(t.steps >= 1, "training steps must be positive");
    require(t.batch_size >= 1, "batch size must be positive");
    require(t.learning_rate > 0.0, "learning rate must be positive");
}

}  // namespace

double TrainingLog::head_mean(double fraction) const {
    const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(loss.size() * fraction));
    return std::accumulate(loss.begin(), loss.begin() + static_cast<std::ptrdiff_t>(n), 0.0) / n;
}

double TrainingLog::tail_mean(double fraction) const {
    const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(loss.size() * fraction));
    return std::accumulate(loss.end() - static_cast<std::ptrdiff_t>(n), loss.end(), 0.0) / n;
}

// ---------------------------------------------------------------------------

Mlp::Mlp(const std::vector<int>& sizes, std::uint64_t seed) {
    require(sizes.size() >= 2, "network needs input and output sizes");
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        require(sizes[i] > 0 && sizes[i + 1] > 0, "layer sizes must be positive");
        std::normal_distribution<double> init(0.0, 1.0 / std::sqrt(static_cast<double>(sizes[i])));
        Layer l{Eigen::MatrixXd(sizes[i + 1], sizes[i]), Eigen::VectorXd::Zero(sizes[i + 1])};
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
            for (Eigen::Index r = 0; r < l.weight.rows(); ++r) l.weight(r, c) = init(rng);
        }
        layers_.push_back(std::move(l));
    }
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& input, Cache* cache) const {
    Eigen::MatrixXd h = input;
    if (cache) {
        cache->pre.clear();
        cache->post.clear();
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Eigen::MatrixXd z = layers_[i].weight * h;
        z.colwise() += layers_[i].bias;
        if (cache) {
            cache->post.push_back(h);
            cache->pre.push_back(z);
        }
        h = i + 1 < layers_.size() ? silu(z) : z;
    }
    if (cache) cache->post.push_back(h);
    return h;
}

Eigen::MatrixXd Mlp::backward(const Cache& cache, const Eigen::MatrixXd& grad_out, std::vector<Layer>* grads) const {
    Eigen::MatrixXd g = grad_out;
    if (grads) grads->resize(layers_.size());
    for (std::size_t k = layers_.size(); k-- > 0;) {
        if (k + 1 < layers_.size()) g = g.cwiseProduct(silu_grad(cache.pre[k]));
        if (grads) {
            (*grads)[k].weight = g * cache.post[k].transpose();
            (*grads)[k].bias = g.rowwise().sum();
        }
        g = layers_[k].weight.transpose() * g;
    }
    return g;
}

std::vector<int> Mlp::sizes() const {
    std::vector<int> s;
    if (layers_.empty()) return s;
    s.push_back(static_cast<int>(layers_.front().weight.cols()));
    for (const auto& l : layers_) s.push_back(static_cast<int>(l.weight.rows()));
    return s;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

std::uint64_t Mlp::parameter_checksum() const {
    std::vector<double> all;
    all.reserve(parameter_count());
    for (const auto& l : layers_) {
        all.insert(all.end(), l.weight.data(), l.weight.data() + l.weight.size());
        all.insert(all.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
    return checksum(all);
}

nlohmann::json Mlp::to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : layers_) {
        layers.push_back({{"rows", l.weight.rows()},
                          {"cols", l.weight.cols()},
                          {"weight", std::vector<double>(l.weight.data(), l.weight.data() + l.weight.size())},
                          {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
    }
    return layers;
}

Mlp Mlp::from_json(const nlohmann::json& j) {
    Mlp net;
    for (const auto& l : j) {
        const auto rows = l.at("rows").get<Eigen::Index>();
        const auto cols = l.at("cols").get<Eigen::Index>();
        const auto w = l.at("weight").get<std::vector<double>>();
        const auto b = l.at("bias").get<std::vector<double>>();
        require(static_cast<Eigen::Index>(w.size()) == rows * cols && static_cast<Eigen::Index>(b.size()) == rows,
                "checkpoint layer has inconsistent parameter shapes");
        net.layers_.push_back({Eigen::Map<const Eigen::MatrixXd>(w.data(), rows, cols),
                               Eigen::Map<const Eigen::VectorXd>(b.data(), rows)});
    }
    require(!net.layers_.empty(), "checkpoint has no layers");
    return net;
}

// ---------------------------------------------------------------------------

ToyDenoiser::ToyDenoiser(Shape shape, ScheduleSpec schedule, ToyDenoiserParams params, Mlp net)
    : shape_(shape), schedule_(std::move(schedule)), params_(std::move(params)), net_(std::move(net)) {
    require(params_.embed_dim >= 2 && params_.embed_dim % 2 == 0, "embedding dimension must be even");
    const auto s = net_.sizes();
    require(s.front() == static_cast<int>(shape_.numel()) + params_.embed_dim &&
                s.back() == static_cast<int>(shape_.numel()),
            "network sizes do not match the image shape");
}

Eigen::MatrixXd ToyDenoiser::network_input(const Eigen::MatrixXd& x, const std::vector<int>& t) const {
    return timestep_input(x, t, params_.embed_dim, schedule_.T);
}

Eigen::MatrixXd ToyDenoiser::timestep_input(const Eigen::MatrixXd& x, const std::vector<int>& t, int embed_dim,
                                            int T) {
    const Eigen::Index d = x.rows();
    const int half = embed_dim / 2;
    Eigen::MatrixXd in(d + embed_dim, x.cols());
    in.topRows(d) = x;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double scaled = 1000.0 * t[static_cast<std::size_t>(c)] / T;
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            in(d + i, c) = std::sin(scaled * freq);
            in(d + half + i, c) = std::cos(scaled * freq);
        }
    }
    return in;
}

void ToyDenoiser::check_input(const Tensor& x_t, int t) const {
    if (x_t.shape() != shape_) {
        fail(ErrorKind::Validation, "denoiser expects " + to_string(shape_) + ", got " + to_string(x_t.shape()));
    }
    if (t < 1 || t > schedule_.T) fail(ErrorKind::Validation, "timestep " + std::to_string(t) + " out of range");
}

Tensor ToyDenoiser::predict_eps(const Tensor& x_t, int t) const {
    check_input(x_t, t);
    const Eigen::MatrixXd out = net_.forward(network_input(column(x_t), {t}));
    return to_tensor(shape_, out.col(0));
}

Tensor ToyDenoiser::predict_var_v(const Tensor& x_t, int t) const {
    check_input(x_t, t);
    return Tensor(shape_, -1.0);
}

Tensor ToyDenoiser::input_vjp(const Tensor& x_t, int t, const Tensor& cotangent) const {
    check_input(x_t, t);
    check_same_shape(x_t, cotangent, "toy vjp");
    Mlp::Cache cache;
    net_.forward(network_input(column(x_t), {t}), &cache);
    const Eigen::MatrixXd g = net_.backward(cache, column(cotangent), nullptr);
    return to_tensor(shape_, g.col(0).head(static_cast<Eigen::Index>(shape_.numel())));
}

nlohmann::json ToyDenoiser::to_json() const {
    return {{"kind", "toy_denoiser"},
            {"version", kCheckpointVersion},
            {"shape", shape_json(shape_)},
            {"schedule", schedule_},
            {"hidden", params_.hidden},
            {"embed_dim", params_.embed_dim},
            {"training", training_json(params_.training)},
            {"layer_sizes", net_.sizes()},
            {"parameter_count", net_.parameter_count()},
            {"layers", net_.to_json()}};
}

std::unique_ptr<ToyDenoiser> ToyDenoiser::from_json(const nlohmann::json& j) {
    require(j.value("kind", std::string{}) == "toy_denoiser", "not a toy denoiser checkpoint");
    require(j.value("version", 0) == kCheckpointVersion, "unsupported checkpoint version");
    ToyDenoiserParams p;
    p.hidden = j.at("hidden").get<std::vector<int>>();
    p.embed_dim = j.at("embed_dim").get<int>();
    p.training = training_from_json(j.at("training"));
    return std::make_unique<ToyDenoiser>(shape_from_json(j.at("shape")), j.at("schedule").get<ScheduleSpec>(), p,
                                         Mlp::from_json(j.at("layers")));
}

ToyDenoiserResult train_toy_denoiser(const std::vector<Tensor>& dataset, const ScheduleSpec& schedule,
                                     const ToyDenoiserParams& params) {
    require(!dataset.empty(), "training dataset is empty");
    check_training(params.training);
    const Shape shape = dataset.front().shape();
    for (const auto& x : dataset) {
        require(x.shape() == shape, "training images must share a shape");
        for (double v : x.values()) require(v >= -1.0 && v <= 1.0, "training data must lie in [-1, 1]");
    }
    const NoiseSchedule sched = schedule.build_schedule();
    const int d = static_cast<int>(shape.numel());

    std::vector<int> sizes{d + params.embed_dim};
    sizes.insert(sizes.end(), params.hidden.begin(), params.hidden.end());
    sizes.push_back(d);
    Mlp net(sizes, params.training.seed);

    std::mt19937_64 rng(params.training.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
    std::uniform_int_distribution<int> pick_t(1, sched.T());
    std::normal_distribution<double> normal(0.0, 1.0);

    Adam adam(net, params.training.learning_rate);
    TrainingLog log;
    const int B = params.training.batch_size;
    Eigen::MatrixXd x(d, B);
    Eigen::MatrixXd eps(d, B);
    std::vector<int> ts(static_cast<std::size_t>(B));
    std::vector<Mlp::Layer> grads;
    Mlp::Cache cache;

    for (int step = 0; step < params.training.steps; ++step) {
        for (int b = 0; b < B; ++b) {
            const Tensor& x0 = dataset[pick(rng)];
            const int t = pick_t(rng);
            ts[static_cast<std::size_t>(b)] = t;
            const double a = std::sqrt(sched.alpha_bar(t));
            const double s = std::sqrt(1.0 - sched.alpha_bar(t));
            for (int i = 0; i < d; ++i) {
                const double e = normal(rng);
                eps(i, b) = e;
                x(i, b) = a * x0[static_cast<std::size_t>(i)] + s * e;
            }
        }
        const Eigen::MatrixXd pred = net.forward(ToyDenoiser::timestep_input(x, ts, params.embed_dim, schedule.T), &cache);
        const Eigen::MatrixXd diff = pred - eps;
        const double loss = diff.squaredNorm() / static_cast<double>(diff.size());
        if (!std::isfinite(loss)) {
            fail(ErrorKind::Runtime, "denoiser training diverged at step " + std::to_string(step));
        }
        log.loss.push_back(loss);
        net.backward(cache, diff * (2.0 / static_cast<double>(diff.size())), &grads);
        adam.apply(net, grads);
    }
    return {std::make_unique<ToyDenoiser>(shape, schedule, params, std::move(net)), std::move(log)};
}

// ---------------------------------------------------------------------------

ToyClassifier::ToyClassifier(Shape shape, int classes, ToyClassifierParams params, Mlp net)
    : shape_(shape), classes_(classes), params_(std::move(params)), net_(std::move(net)) {
    const auto s = net_.sizes();
    require(s.front() == static_cast<int>(shape_.numel()) && s.back() == classes_,
            "classifier sizes do not match the image shape");
}

std::vector<double> ToyClassifier::log_probs(const Tensor& x0) const {
    if (x0.shape() != shape_) {
        fail(ErrorKind::Validation, "classifier expects " + to_string(shape_) + ", got " + to_string(x0.shape()));
    }
    const Eigen::MatrixXd logits = net_.forward(column(x0));
    std::vector<double> out(logits.data(), logits.data() + logits.size());
    return log_softmax(std::move(out));
}

Tensor ToyClassifier::grad_log_prob(const Tensor& x0, int y) const {
    check_label(y);
    const auto lp = log_probs(x0);
    Mlp::Cache cache;
    net_.forward(column(x0), &cache);
    Eigen::MatrixXd g(classes_, 1);
    for (int k = 0; k < classes_; ++k) g(k, 0) = k == y ? -std::expm1(lp[static_cast<std::size_t>(k)]) : -std::exp(lp[static_cast<std::size_t>(k)]);
    return to_tensor(shape_, net_.backward(cache, g, nullptr).col(0));
}

nlohmann::json ToyClassifier::to_json() const {
    return {{"kind", "toy_classifier"},
            {"version", kCheckpointVersion},
            {"shape", shape_json(shape_)},
            {"classes", classes_},
            {"hidden", params_.hidden},
            {"training", training_json(params_.training)},
            {"layer_sizes", net_.sizes()},
            {"parameter_count", net_.parameter_count()},
            {"layers", net_.to_json()}};
}

std::unique_ptr<ToyClassifier> ToyClassifier::from_json(const nlohmann::json& j) {
    require(j.value("kind", std::string{}) == "toy_classifier", "not a toy classifier checkpoint");
    require(j.value("version", 0) == kCheckpointVersion, "unsupported checkpoint version");
    ToyClassifierParams p;
    p.hidden = j.at("hidden").get<int>();
    p.training = training_from_json(j.at("training"));
    return std::make_unique<ToyClassifier>(shape_from_json(j.at("shape")), j.at("classes").get<int>(), p,
                                           Mlp::from_json(j.at("layers")));
}

ToyClassifierResult train_toy_classifier(const std::vector<Tensor>& images, const std::vector<int>& labels,
                                         const ToyClassifierParams& params) {
    require(!images.empty() && images.size() == labels.size(), "classifier needs one label per image");
    check_training(params.training);
    const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<int> counts(static_cast<std::size_t>(classes), 0);
    for (int l : labels) {
        require(l >= 0, "labels must be non-negative");
        ++counts[static_cast<std::size_t>(l)];
    }
    const auto present = std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; });
    require(present >= 2, "classifier training needs at least two classes present");

    const Shape shape = images.front().shape();
    const int d = static_cast<int>(shape.numel());
    Mlp net({d, params.hidden, classes}, params.training.seed);
    Adam adam(net, params.training.learning_rate);

    std::mt19937_64 rng(params.training.seed ^ 0x51ed270b27a5f00dULL);
    std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
    const int B = params.training.batch_size;
    Eigen::MatrixXd x(d, B);
    std::vector<int> ys(static_cast<std::size_t>(B));
    std::vector<Mlp::Layer> grads;
    Mlp::Cache cache;
    TrainingLog log;

    for (int step = 0; step < params.training.steps; ++step) {
        for (int b = 0; b < B; ++b) {
            const std::size_t i = pick(rng);
            require(images[i].shape() == shape, "training images must share a shape");
            x.col(b) = column(images[i]);
            ys[static_cast<std::size_t>(b)] = labels[i];
        }
        const Eigen::MatrixXd logits = net.forward(x, &cache);
        Eigen::MatrixXd g(classes, B);
        double loss = 0.0;
        for (int b = 0; b < B; ++b) {
            const Eigen::VectorXd col = logits.col(b);
            const double m = col.maxCoeff();
            const double lse = m + std::log((col.array() - m).exp().sum());
            const int y = ys[static_cast<std::size_t>(b)];
            loss -= col(y) - lse;
            for (int k = 0; k < classes; ++k) g(k, b) = (std::exp(col(k) - lse) - (k == y ? 1.0 : 0.0)) / B;
        }
        loss /= B;
        if (!std::isfinite(loss)) {
            fail(ErrorKind::Runtime, "classifier training diverged at step " + std::to_string(step));
        }
        log.loss.push_back(loss);
        net.backward(cache, g, &grads);
        adam.apply(net, grads);
    }

    auto model = std::make_unique<ToyClassifier>(shape, classes, params, std::move(net));
    int correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (model->top_k(images[i], 1).front().label == labels[i]) ++correct;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(images.size());
    return {std::move(model), std::move(log), acc};
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& body) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::Runtime, "cannot write checkpoint " + path.string());
    out << body.dump() << '\n';
}

nlohmann::json read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::NotFound, "cannot open checkpoint " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Validation, "malformed checkpoint " + path.string() + ": " + e.what());
    }
}

std::unique_ptr<Denoiser> load_denoiser(const std::filesystem::path& path, const ScheduleSpec& schedule) {
    const auto j = read_checkpoint(path);
    const auto kind = j.value("kind", std::string{});
    if (kind == "mixture") {
        return std::make_unique<MixtureDenoiser>(j.get<GaussianMixture>(), schedule.build_schedule());
    }
    if (kind == "toy_denoiser") {
        auto model = ToyDenoiser::from_json(j);
        const auto trained = model->schedule_spec().build_schedule();
        const auto wanted = schedule.build_schedule();
        if (trained.T() != wanted.T() || trained.beta_start() != wanted.beta_start() ||
            trained.beta_end() != wanted.beta_end()) {
            fail(ErrorKind::Validation, "run schedule (T=" + std::to_string(wanted.T()) +
                                            ") differs from the schedule the denoiser was trained with (T=" +
                                            std::to_string(trained.T()) + ")");
        }
        return model;
    }
    fail(ErrorKind::Validation, "checkpoint " + path.string() + " holds no denoiser (kind '" + kind + "')");
}

std::unique_ptr<Classifier> load_classifier(const std::filesystem::path& path) {
    const auto j = read_checkpoint(path);
    const auto kind = j.value("kind", std::string{});
    if (kind == "mixture") return std::make_unique<MixtureClassifier>(j.get<GaussianMixture>());
    if (kind == "toy_classifier") return ToyClassifier::from_json(j);
    fail(ErrorKind::Validation, "checkpoint " + path.string() + " holds no classifier (kind '" + kind + "')");
}

}  // namespace guidpaint
