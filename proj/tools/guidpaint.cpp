// guidpaint command-line interface. Mirrors the HTTP API over local run directories.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "guidpaint/data.hpp"
#include "guidpaint/error.hpp"
#include "guidpaint/metrics.hpp"
#include "guidpaint/run_store.hpp"
#include "guidpaint/service.hpp"
#include "guidpaint/toy_net.hpp"

using namespace guidpaint;
namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

std::vector<int> parse_labels(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item == "disc") {
            out.push_back(kDiscLabel);
        } else if (item == "cross") {
            out.push_back(kCrossLabel);
        } else {
            try {
                std::size_t used = 0;
                out.push_back(std::stoi(item, &used));
                if (used != item.size()) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw Error(ErrorKind::Validation, "labels", "bad label '" + item + "'");
            }
        }
    }
    return out;
}

void print_summaries(const RunDirectory& dir) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& c : dir.candidate_summaries()) list.push_back(to_json(c));
    std::cout << nlohmann::json{{"run", dir.root().string()}, {"candidates", list}}.dump(2) << '\n';
}

void print_done(const RunDirectory& dir) {
    const RunState st = dir.read_state();
    nlohmann::json out{{"run", dir.root().string()}, {"status", to_string(st.status)}};
    if (st.selected_id) out["selected_id"] = *st.selected_id;
    if (std::ifstream in(dir.root() / "metrics.json"); in) out["metrics"] = nlohmann::json::parse(in);
    std::cout << out.dump(2) << '\n';
}

ExecutionOptions progress_options(bool quiet) {
    ExecutionOptions eo;
    eo.parallel = true;
    if (!quiet) {
        eo.progress = [](std::size_t done, std::size_t total) {
            if (done == total || done % 25 == 0) std::cerr << "\rsampling " << done << '/' << total << std::flush;
            if (done == total) std::cerr << '\n';
        };
    }
    return eo;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Guided diffusion inpainting with interactive candidate selection"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "No progress output");

    // run -------------------------------------------------------------------
    auto* run = app.add_subcommand("run", "Sample candidates and (unless --select none) refine one");
    std::string image, mask, labels, stages, out = "run", denoiser, classifier, select = "auto";
    int T = 250, t_stop = -1, i_guid = 2, i_inp = 2, candidates = 1;
    double scale = 1.0, eta = 0.0;
    std::uint64_t seed = 0;
    bool no_cg = false, no_ss = false;
    run->add_option("--image", image, "Ground-truth image (PNG or PGM)")->required()->check(CLI::ExistingFile);
    run->add_option("--mask", mask, "Mask image, 255 = known")->required()->check(CLI::ExistingFile);
    run->add_option("--labels", labels, "Target labels, comma separated (ints, or disc/cross)");
    run->add_option("--T", T, "Diffusion steps")->check(CLI::PositiveNumber);
    run->add_option("--stages", stages, "Skip-sequence steps per stage, comma separated");
    run->add_option("--t-stop-comp", t_stop, "Last timestep with composite re-noising (default 130, 124 with --stages)");
    run->add_option("--scale", scale, "Classifier guidance scale");
    run->add_option("--i-guid", i_guid, "Guidance steps per timestep");
    run->add_option("--i-inp", i_inp, "Inpainting steps per timestep");
    run->add_option("--candidates", candidates, "Number of stochastic candidates");
    run->add_option("--seed", seed, "Random seed");
    run->add_option("--eta", eta, "DDIM eta for the stochastic phase");
    run->add_option("--out", out, "Run directory to create");
    run->add_flag("--no-cg", no_cg, "Disable classifier guidance");
    run->add_flag("--no-ss", no_ss, "Disable the stochastic phase");
    run->add_option("--denoiser", denoiser, "Denoiser checkpoint")->required()->check(CLI::ExistingFile);
    run->add_option("--classifier", classifier, "Classifier checkpoint")->check(CLI::ExistingFile);
    run->add_option("--select", select, "Candidate id, 'auto', or 'none' to stop after sampling");

    // candidates ------------------------------------------------------------
    auto* cands = app.add_subcommand("candidates", "List the candidates of a run, best first");
    std::string run_dir;
    cands->add_option("run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

    // select ----------------------------------------------------------------
    auto* sel = app.add_subcommand("select", "Refine a candidate of a run awaiting selection");
    std::string candidate = "auto";
    sel->add_option("run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
    sel->add_option("candidate", candidate, "Candidate id or 'auto'");

    // metrics ---------------------------------------------------------------
    auto* met = app.add_subcommand("metrics", "PSNR/SSIM of an output against ground truth");
    std::string output, gt;
    met->add_option("--output", output, "Inpainted image")->required()->check(CLI::ExistingFile);
    met->add_option("--gt", gt, "Ground truth")->required()->check(CLI::ExistingFile);
    met->add_option("--mask", mask, "Mask, 255 = known (default: all unknown)")->check(CLI::ExistingFile);

    // train-toy -------------------------------------------------------------
    auto* train = app.add_subcommand("train-toy", "Train the toy shapes denoiser and classifier");
    std::string train_out = "toy";
    int n = 512, size = 16, steps = 3000, cls_steps = 800;
    train->add_option("--out", train_out, "Output directory");
    train->add_option("--n", n, "Dataset size")->check(CLI::Range(2, 1 << 20));
    train->add_option("--size", size, "Image side")->check(CLI::Range(8, 256));
    train->add_option("--T", T, "Diffusion steps")->check(CLI::PositiveNumber);
    train->add_option("--steps", steps, "Denoiser training steps")->check(CLI::PositiveNumber);
    train->add_option("--classifier-steps", cls_steps, "Classifier training steps")->check(CLI::PositiveNumber);
    train->add_option("--seed", seed, "Seed for data and initialization");

    // make-mask -------------------------------------------------------------
    auto* mk = app.add_subcommand("make-mask", "Write a benchmark mask");
    std::string kind = "half";
    int height = 16, width = 16;
    mk->add_option("--kind", kind, "expand, half or square");
    mk->add_option("--height", height)->check(CLI::PositiveNumber);
    mk->add_option("--width", width)->check(CLI::PositiveNumber);
    mk->add_option("--out", out, "Output PNG")->required();

    // serve -----------------------------------------------------------------
    auto* srv = app.add_subcommand("serve", "Run the HTTP API");
    std::string host = "127.0.0.1", data_root;
    int port = 8080;
    if (const char* p = std::getenv("GUIDPAINT_PORT"); p && *p) port = std::atoi(p);
    srv->add_option("--host", host);
    srv->add_option("--port", port, "Port (default $GUIDPAINT_PORT or 8080)");
    srv->add_option("--data-root", data_root, "Run directory root (default $GUIDPAINT_DATA_ROOT or ./runs)");
    srv->add_option("--denoiser", denoiser, "Denoiser checkpoint");
    srv->add_option("--classifier", classifier, "Classifier checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        if (*run) {
            RunRequest req;
            auto& cfg = req.config;
            cfg.schedule.T = T;
            if (!stages.empty()) cfg.schedule.stage_steps = parse_labels(stages);
            auto& g = cfg.guidance;
            g.scale = scale;
            g.guidance_steps = i_guid;
            g.inpaint_steps = i_inp;
            g.candidates = candidates;
            g.seed = seed;
            g.eta_ddim = eta;
            g.enable_cg = !no_cg;
            g.enable_ss = !no_ss;
            g.t_stop_comp = t_stop >= 0 ? t_stop : (stages.empty() ? 130 : 124);
            cfg.backends = {denoiser, classifier};
            req.image = load_image(image);
            req.mask = load_mask(mask);
            req.labels = parse_labels(labels);
            if (fs::exists(out) && !fs::is_empty(out)) {
                throw Error(ErrorKind::Validation, "out", "run directory " + out + " already exists");
            }
            const auto dir = RunDirectory::create(out, std::move(req), fs::path(out).filename().string());
            execute_sampling(dir, progress_options(quiet));
            if (select == "none") {
                print_summaries(dir);
                return 0;
            }
            execute_refinement(dir, select);
            print_done(dir);
        } else if (*cands) {
            print_summaries(RunDirectory(run_dir));
        } else if (*sel) {
            const RunDirectory dir(run_dir);
            execute_refinement(dir, candidate);
            print_done(dir);
        } else if (*met) {
            const Tensor o = load_image(output);
            const Tensor g = load_image(gt);
            const Mask m = mask.empty() ? Mask::zeros(g.shape()) : load_mask(mask);
            std::cout << to_json(evaluate_inpainting(o, g, m)).dump(2) << '\n';
        } else if (*train) {
            fs::create_directories(train_out);
            const auto data = make_toy_dataset(n, size, seed);
            ScheduleSpec sched;
            sched.T = T;
            ToyDenoiserParams dp;
            dp.training.steps = steps;
            dp.training.seed = seed;
            if (!quiet) std::cerr << "training denoiser on " << n << " images of " << size << "x" << size << '\n';
            const auto den = train_toy_denoiser(data.images, sched, dp);
            save_checkpoint(fs::path(train_out) / "denoiser.json", den.model->to_json());
            ToyClassifierParams cp;
            cp.training.steps = cls_steps;
            cp.training.seed = seed + 1;
            const auto cls = train_toy_classifier(data.images, data.labels, cp);
            save_checkpoint(fs::path(train_out) / "classifier.json", cls.model->to_json());
            auto manifest = data.manifest();
            manifest["denoiser_loss"] = {{"head", den.log.head_mean(0.1)}, {"tail", den.log.tail_mean(0.1)}};
            manifest["classifier_train_accuracy"] = cls.train_accuracy;
            save_checkpoint(fs::path(train_out) / "dataset.json", manifest);
            for (int i = 0; i < std::min(n, 4); ++i) {
                save_image(data.images[i], fs::path(train_out) / ("example_" + std::to_string(i) + ".png"));
            }
            std::cout << manifest.dump(2) << '\n';
        } else if (*mk) {
            save_mask(make_benchmark_mask(parse_mask_kind(kind), height, width), out);
        } else if (*srv) {
            ServiceOptions opts = ServiceOptions::from_env();
            if (!data_root.empty()) opts.data_root = data_root;
            if (!denoiser.empty()) opts.denoiser = denoiser;
            if (!classifier.empty()) opts.classifier = classifier;
            if (opts.denoiser.empty()) throw Error(ErrorKind::Validation, "denoiser", "serve needs --denoiser");
            return serve(opts, host, port);
        }
    } catch (const Error& e) {
        std::cerr << "guidpaint: " << e.what() << '\n';
        return e.kind() == ErrorKind::Runtime ? kExitRuntime : kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "guidpaint: " << e.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}
