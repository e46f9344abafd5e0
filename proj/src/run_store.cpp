#include "guidpaint/run_store.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "guidpaint/error.hpp"
#include "guidpaint/toy_net.hpp"

namespace guidpaint {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Status machine

const char* to_string(RunStatus s) {
    switch (s) {
        case RunStatus::Created: return "created";
        case RunStatus::Sampling: return "sampling";
        case RunStatus::AwaitingSelection: return "awaiting-selection";
        case RunStatus::Refining: return "refining";
        case RunStatus::Done: return "done";
        case RunStatus::Failed: return "failed";
    }
    return "?";
}

RunStatus parse_run_status(const std::string& s) {
    for (auto st : {RunStatus::Created, RunStatus::Sampling, RunStatus::AwaitingSelection, RunStatus::Refining,
                    RunStatus::Done, RunStatus::Failed}) {
        if (s == to_string(st)) return st;
    }
    fail(ErrorKind::Validation, "unknown run status '" + s + "'");
}

bool is_terminal(RunStatus s) { return s == RunStatus::Done || s == RunStatus::Failed; }

bool can_transition(RunStatus from, RunStatus to) {
    if (is_terminal(from)) return false;
    if (to == RunStatus::Failed) return true;
    return static_cast<int>(to) == static_cast<int>(from) + 1;
}

// ---------------------------------------------------------------------------
// Config and state documents

nlohmann::json RunConfig::to_json() const {
    return {{"schedule", schedule},
            {"guidance", guidance},
            {"backends", {{"denoiser", backends.denoiser}, {"classifier", backends.classifier}}},
            {"inputs", {{"image", "inputs/gt.png"}, {"mask", "inputs/mask.png"}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("schedule")) c.schedule = j.at("schedule").get<ScheduleSpec>();
    if (j.contains("guidance")) c.guidance = j.at("guidance").get<GuidanceConfig>();
    if (j.contains("backends")) {
        c.backends.denoiser = j.at("backends").value("denoiser", std::string{});
        c.backends.classifier = j.at("backends").value("classifier", std::string{});
    }
    return c;
}

std::string RunConfig::digest() const {
    const auto text = to_json().dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

nlohmann::json to_json(const RunState& s) {
    return {{"run_id", s.run_id},
            {"status", to_string(s.status)},
            {"config_digest", s.config_digest},
            {"candidate_ids", s.candidate_ids},
            {"selected_id", s.selected_id ? nlohmann::json(*s.selected_id) : nlohmann::json(nullptr)},
            {"artifacts", s.artifacts},
            {"timestamps", s.timestamps},
            {"phase", s.phase},
            {"progress", {{"done", s.progress.done}, {"total", s.progress.total}}},
            {"error", s.error},
            {"idempotency_key", s.idempotency_key}};
}

RunState run_state_from_json(const nlohmann::json& j) {
    RunState s;
    s.run_id = j.at("run_id").get<std::string>();
    s.status = parse_run_status(j.at("status").get<std::string>());
    s.config_digest = j.value("config_digest", std::string{});
    s.candidate_ids = j.value("candidate_ids", std::vector<std::string>{});
    if (j.contains("selected_id") && !j.at("selected_id").is_null()) {
        s.selected_id = j.at("selected_id").get<std::string>();
    }
    s.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
    s.timestamps = j.value("timestamps", std::map<std::string, std::string>{});
    s.phase = j.value("phase", std::string{});
    if (j.contains("progress")) {
        s.progress.done = j.at("progress").value("done", std::size_t{0});
        s.progress.total = j.at("progress").value("total", std::size_t{0});
    }
    s.error = j.value("error", std::string{});
    s.idempotency_key = j.value("idempotency_key", std::string{});
    return s;
}

nlohmann::json to_json(const CandidateSummary& c) {
    return {{"id", c.id},
            {"index", c.index},
            {"rank", c.rank},
            {"t", c.t},
            {"score", c.score},
            {"branch_seed", c.branch_seed},
            {"preview", c.preview}};
}

std::string now_iso8601() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

std::string make_run_id() {
    static thread_local std::mt19937_64 rng{std::random_device{}() ^
                                            static_cast<std::uint64_t>(
                                                std::chrono::steady_clock::now().time_since_epoch().count())};
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << rng();
    return out.str();
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr char kStateMagic[4] = {'G', 'P', 'C', 'S'};
constexpr std::uint32_t kStateVersion = 1;

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) fail(ErrorKind::NotFound, "missing " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Runtime, "corrupt " + p.string() + ": " + e.what());
    }
}

// Write-then-rename so readers never observe a partial document.
void write_text_atomic(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) fail(ErrorKind::Runtime, "cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, p);
}

template <typename T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) fail(ErrorKind::Runtime, "truncated state file");
    return v;
}

std::string local_mask_path(std::size_t i) { return "inputs/local_" + std::to_string(i) + ".png"; }

bool valid_candidate_id(const std::string& id) {
    return !id.empty() && id.size() < 16 && std::all_of(id.begin(), id.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

void write_state_bin(const fs::path& path, const Candidate& c) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Runtime, "cannot write " + path.string());
    out.write(kStateMagic, 4);
    put(out, kStateVersion);
    put(out, static_cast<std::int32_t>(c.index));
    put(out, static_cast<std::int32_t>(c.t));
    put(out, c.branch_seed);
    const auto& s = c.state.shape();
    put(out, static_cast<std::int32_t>(s.channels));
    put(out, static_cast<std::int32_t>(s.height));
    put(out, static_cast<std::int32_t>(s.width));
    out.write(reinterpret_cast<const char*>(c.state.data()), static_cast<std::streamsize>(c.state.size() * sizeof(double)));
}

Candidate read_state_bin(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::NotFound, "missing " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kStateMagic, 4) != 0) fail(ErrorKind::Runtime, "not a candidate state file");
    if (get<std::uint32_t>(in) != kStateVersion) fail(ErrorKind::Runtime, "unsupported state file version");
    Candidate c;
    c.index = get<std::int32_t>(in);
    c.t = get<std::int32_t>(in);
    c.branch_seed = get<std::uint64_t>(in);
    Shape s;
    s.channels = get<std::int32_t>(in);
    s.height = get<std::int32_t>(in);
    s.width = get<std::int32_t>(in);
    std::vector<double> values(s.numel());
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) fail(ErrorKind::Runtime, "truncated state file");
    c.state = Tensor(s, std::move(values));
    c.id = std::to_string(c.index);
    return c;
}

// ---------------------------------------------------------------------------
// RunDirectory

RunDirectory RunDirectory::create(const fs::path& dir, RunRequest req, const std::string& run_id) {
    auto& cfg = req.config;
    if (req.image.empty()) throw Error(ErrorKind::Validation, "image", "image is required");
    if (!req.mask.compatible_with(req.image.shape())) {
        throw Error(ErrorKind::Validation, "mask",
                    "mask shape " + to_string(req.mask.shape()) + " does not match image shape " +
                        to_string(req.image.shape()));
    }
    for (std::size_t i = 0; i < req.local_specs.size(); ++i) {
        if (!req.local_specs[i].mask.compatible_with(req.image.shape())) {
            throw Error(ErrorKind::Validation, "local_specs[" + std::to_string(i) + "].mask",
                        "local mask does not match image shape " + to_string(req.image.shape()));
        }
    }
    if (!req.labels.empty()) cfg.guidance.labels = req.labels;
    if (!req.local_specs.empty()) {
        cfg.guidance.local_specs = req.local_specs;
        cfg.guidance.mode = GuidanceMode::Local;
    }

    NoiseSchedule sched = NoiseSchedule::linear(1);
    try {
        sched = cfg.schedule.build_schedule();
        cfg.schedule.build_skip();
    } catch (const Error& e) {
        throw Error(ErrorKind::Validation, "schedule", e.what());
    }
    if (cfg.backends.denoiser.empty()) throw Error(ErrorKind::Validation, "backends.denoiser", "no denoiser configured");

    const Tensor gt = quantize(req.image);
    std::unique_ptr<Denoiser> denoiser;
    try {
        denoiser = load_denoiser(cfg.backends.denoiser, cfg.schedule);
        denoiser->predict_eps(gt, sched.T());
    } catch (const Error& e) {
        throw Error(ErrorKind::Validation, "image", std::string("image is incompatible with the denoiser: ") + e.what());
    }

    std::unique_ptr<Classifier> classifier;
    if (!cfg.backends.classifier.empty()) classifier = load_classifier(cfg.backends.classifier);
    if (cfg.guidance.enable_cg && cfg.guidance.mode == GuidanceMode::Global && cfg.guidance.labels.empty()) {
        if (!classifier) throw Error(ErrorKind::Validation, "labels", "no labels given and no classifier to predict them");
        const auto pred = predict_labels(*classifier, gt, 1, req.mask.broadcast(gt.shape()));
        cfg.guidance.labels = {pred.ranking.front().label};
    }
    if (cfg.guidance.enable_cg && !classifier) {
        throw Error(ErrorKind::Validation, "backends.classifier", "classifier guidance needs a classifier");
    }
    if (classifier) {
        for (int l : cfg.guidance.labels) {
            if (l < 0 || l >= classifier->num_classes()) {
                throw Error(ErrorKind::Validation, "labels", "label " + std::to_string(l) + " is not known to the classifier");
            }
        }
        for (const auto& s : cfg.guidance.local_specs) {
            if (s.label < 0 || s.label >= classifier->num_classes()) {
                throw Error(ErrorKind::Validation, "local_specs", "label " + std::to_string(s.label) + " is not known to the classifier");
            }
        }
    }
    try {
        cfg.guidance.validate(sched.T());
    } catch (const Error& e) {
        throw Error(ErrorKind::Validation, "guidance", e.what());
    }

    fs::create_directories(dir / "inputs");
    fs::create_directories(dir / "candidates");
    RunDirectory run(dir);
    save_image(gt, dir / "inputs/gt.png");
    save_mask(req.mask, dir / "inputs/mask.png");
    for (std::size_t i = 0; i < cfg.guidance.local_specs.size(); ++i) {
        save_mask(cfg.guidance.local_specs[i].mask, dir / local_mask_path(i));
    }
    write_text_atomic(dir / "config.json", cfg.to_json().dump(2));

    RunState st;
    st.run_id = run_id;
    st.status = RunStatus::Created;
    st.config_digest = cfg.digest();
    st.timestamps[to_string(RunStatus::Created)] = now_iso8601();
    st.idempotency_key = req.idempotency_key;
    st.artifacts = {{"config", "config.json"}, {"image", "inputs/gt.png"}, {"mask", "inputs/mask.png"}};
    run.write_state(st);
    run.append_log("created run " + run_id + " (config " + st.config_digest + ")");
    return run;
}

bool RunDirectory::exists() const { return fs::exists(root_ / "state.json"); }

RunConfig RunDirectory::load_config() const { return RunConfig::from_json(read_json(root_ / "config.json")); }

InpaintTask RunDirectory::load_task() const {
    return InpaintTask(load_image(root_ / "inputs/gt.png"), load_mask(root_ / "inputs/mask.png"));
}

GuidanceConfig RunDirectory::load_guidance() const {
    const auto j = read_json(root_ / "config.json");
    GuidanceConfig g = j.at("guidance").get<GuidanceConfig>();
    const auto& specs = j.at("guidance").at("local_specs");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        g.local_specs.push_back({load_mask(root_ / local_mask_path(i)), specs[i].at("label").get<int>()});
    }
    return g;
}

RunState RunDirectory::read_state() const { return run_state_from_json(read_json(root_ / "state.json")); }

void RunDirectory::write_state(const RunState& s) const { write_text_atomic(root_ / "state.json", to_json(s).dump(2)); }

void RunDirectory::write_candidate(const Candidate& c) const {
    const fs::path d = root_ / "candidates" / c.id;
    fs::create_directories(d);
    write_state_bin(d / "state.bin", c);
    save_image(c.preview, d / "preview.png");
    write_text_atomic(d / "candidate.json", nlohmann::json{{"id", c.id},
                                                           {"index", c.index},
                                                           {"t", c.t},
                                                           {"score", c.score},
                                                           {"branch_seed", c.branch_seed}}
                                                .dump(2));
    // Full-precision preview for exact reloads.
    Candidate preview = c;
    preview.state = c.preview;
    write_state_bin(d / "preview.bin", preview);
}

Candidate RunDirectory::read_candidate(const std::string& id) const {
    if (!valid_candidate_id(id)) fail(ErrorKind::NotFound, "unknown candidate '" + id + "'");
    const fs::path d = root_ / "candidates" / id;
    if (!fs::exists(d / "state.bin")) fail(ErrorKind::NotFound, "unknown candidate '" + id + "'");
    Candidate c = read_state_bin(d / "state.bin");
    c.preview = read_state_bin(d / "preview.bin").state;
    c.score = read_json(d / "candidate.json").at("score").get<double>();
    return c;
}

std::vector<Candidate> RunDirectory::read_candidates() const {
    std::vector<Candidate> out;
    for (const auto& id : read_state().candidate_ids) out.push_back(read_candidate(id));
    return out;
}

std::vector<CandidateSummary> RunDirectory::candidate_summaries() const {
    const auto cands = read_candidates();
    const auto order = rank_candidates(cands);
    std::vector<CandidateSummary> out;
    for (std::size_t r = 0; r < order.size(); ++r) {
        const auto& c = cands[order[r]];
        out.push_back({c.id, c.index, static_cast<int>(r), c.t, c.score, c.branch_seed,
                       "candidates/" + c.id + "/preview.png"});
    }
    return out;
}

std::optional<std::string> RunDirectory::read_selected() const {
    std::ifstream in(root_ / "selected.txt");
    if (!in) return std::nullopt;
    std::string id;
    in >> id;
    return id;
}

void RunDirectory::write_result(const std::string& selected_id, const Tensor& output, const MetricReport& metrics,
                                const std::string& digest) const {
    save_image(output, root_ / "result.png");
    Candidate result;
    result.id = selected_id;
    result.state = output;
    write_state_bin(root_ / "result.bin", result);
    auto m = to_json(metrics);
    m["config_digest"] = digest;
    write_text_atomic(root_ / "metrics.json", m.dump(2));
}

void RunDirectory::append_log(const std::string& line) const {
    std::ofstream out(root_ / "log.txt", std::ios::app);
    out << now_iso8601() << ' ' << line << '\n';
}

fs::path RunDirectory::resolve_artifact(const std::string& relative) const {
    if (relative.empty()) fail(ErrorKind::Validation, "empty artifact path");
    const fs::path rel(relative);
    if (rel.is_absolute()) fail(ErrorKind::Validation, "artifact paths must be relative");
    for (const auto& part : rel) {
        if (part == ".." || part == ".") fail(ErrorKind::Validation, "artifact path escapes the run directory");
    }
    const fs::path base = fs::weakly_canonical(root_);
    const fs::path full = fs::weakly_canonical(root_ / rel);
    const auto [end, _] = std::mismatch(base.begin(), base.end(), full.begin(), full.end());
    if (end != base.end()) fail(ErrorKind::Validation, "artifact path escapes the run directory");
    if (!fs::is_regular_file(full)) fail(ErrorKind::NotFound, "no artifact '" + relative + "'");
    return full;
}

// ---------------------------------------------------------------------------
// Execution

RunResources RunResources::load(const RunDirectory& dir) {
    RunConfig cfg = dir.load_config();
    GuidanceConfig guidance = dir.load_guidance();
    RunResources r{cfg, cfg.schedule.build_schedule(), cfg.schedule.build_skip(), std::move(guidance), nullptr, nullptr};
    r.denoiser = load_denoiser(cfg.backends.denoiser, cfg.schedule);
    if (!cfg.backends.classifier.empty()) r.classifier = load_classifier(cfg.backends.classifier);
    return r;
}

SamplerContext RunResources::context() const {
    return SamplerContext{*denoiser, classifier.get(), schedule, skip, guidance};
}

RunState transition(const RunDirectory& dir, RunStatus to, const std::string& error) {
    RunState st = dir.read_state();
    if (!can_transition(st.status, to)) {
        fail(ErrorKind::Conflict, std::string("run is ") + to_string(st.status) + ", cannot move to " + to_string(to));
    }
    st.status = to;
    st.timestamps[to_string(to)] = now_iso8601();
    if (to == RunStatus::Failed) st.error = error;
    if (is_terminal(to) || to == RunStatus::AwaitingSelection) st.phase.clear();
    dir.write_state(st);
    dir.append_log(std::string("status -> ") + to_string(to) + (error.empty() ? "" : ": " + error));
    return st;
}

namespace {

template <typename Fn>
auto fail_run_on_error(const RunDirectory& dir, Fn&& fn) {
    try {
        return fn();
    } catch (const std::exception& e) {
        try {
            transition(dir, RunStatus::Failed, e.what());
        } catch (...) {
        }
        throw;
    }
}

}  // namespace

std::vector<Candidate> execute_sampling(const RunDirectory& dir, const ExecutionOptions& opts,
                                        const std::function<void(RunStatus)>& on_status) {
    auto st = transition(dir, RunStatus::Sampling);
    st.phase = "stochastic";
    dir.write_state(st);
    if (on_status) on_status(RunStatus::Sampling);
    return fail_run_on_error(dir, [&]() {
        const auto res = RunResources::load(dir);
        const InpaintTask task = dir.load_task();
        const auto t0 = std::chrono::steady_clock::now();
        auto cands = run_stochastic_phase(res.context(), task, opts);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        RunState s = dir.read_state();
        for (const auto& c : cands) {
            dir.write_candidate(c);
            s.candidate_ids.push_back(c.id);
            s.artifacts["candidates/" + c.id + "/preview"] = "candidates/" + c.id + "/preview.png";
        }
        dir.write_state(s);
        dir.append_log("stochastic phase: " + std::to_string(cands.size()) + " candidates at t=" +
                       std::to_string(cands.front().t) + " in " + std::to_string(ms) + " ms");
        transition(dir, RunStatus::AwaitingSelection);
        if (on_status) on_status(RunStatus::AwaitingSelection);
        return cands;
    });
}

std::string resolve_selection(const RunDirectory& dir, const std::string& selection) {
    if (selection != "auto") {
        dir.read_candidate(selection);
        return selection;
    }
    const auto summaries = dir.candidate_summaries();
    if (summaries.empty()) fail(ErrorKind::Conflict, "run has no candidates");
    return summaries.front().id;
}

std::string begin_refinement(const RunDirectory& dir, const std::string& selection) {
    RunState st = dir.read_state();
    if (st.selected_id || st.status == RunStatus::Refining || st.status == RunStatus::Done) {
        fail(ErrorKind::Conflict, "run already has a selection");
    }
    if (st.status != RunStatus::AwaitingSelection) {
        fail(ErrorKind::Conflict, std::string("run is ") + to_string(st.status) + ", not awaiting selection");
    }
    const std::string id = resolve_selection(dir, selection);
    st = transition(dir, RunStatus::Refining);
    st.selected_id = id;
    st.phase = "refinement";
    dir.write_state(st);
    write_text_atomic(dir.root() / "selected.txt", id + "\n");
    dir.append_log("selected candidate " + id + (selection == "auto" ? " (auto)" : ""));
    return id;
}

Tensor finish_refinement(const RunDirectory& dir, const ProgressFn& progress) {
    return fail_run_on_error(dir, [&]() {
        const RunState st = dir.read_state();
        require(st.status == RunStatus::Refining && st.selected_id.has_value(), "run is not refining");
        const auto res = RunResources::load(dir);
        const InpaintTask task = dir.load_task();
        const Candidate cand = dir.read_candidate(*st.selected_id);
        const auto t0 = std::chrono::steady_clock::now();
        const Tensor out = run_deterministic_refinement(res.context(), task, cand, [&](std::size_t d, std::size_t t) {
            if (progress) progress({d, t});
        });
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        const auto metrics = evaluate_inpainting(out, task.ground_truth, Mask(task.mask));
        dir.write_result(*st.selected_id, out, metrics, st.config_digest);
        dir.append_log("refinement finished in " + std::to_string(ms) + " ms; psnr_unknown=" +
                       std::to_string(metrics.psnr_unknown));
        RunState s = dir.read_state();
        s.artifacts["result"] = "result.png";
        s.artifacts["metrics"] = "metrics.json";
        s.artifacts["selected"] = "selected.txt";
        s.artifacts["log"] = "log.txt";
        dir.write_state(s);
        transition(dir, RunStatus::Done);
        return out;
    });
}

Tensor execute_refinement(const RunDirectory& dir, const std::string& selection,
                          const std::function<void(RunStatus)>& on_status, const ProgressFn& progress) {
    begin_refinement(dir, selection);
    if (on_status) on_status(RunStatus::Refining);
    Tensor out = finish_refinement(dir, progress);
    if (on_status) on_status(RunStatus::Done);
    return out;
}

}  // namespace guidpaint
