#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidpaint/data.hpp"
#include "guidpaint/metrics.hpp"
#include "guidpaint/sampler.hpp"
#include "guidpaint/schedule.hpp"

namespace guidpaint {

enum class RunStatus { Created, Sampling, AwaitingSelection, Refining, Done, Failed };

const char* to_string(RunStatus s);
RunStatus parse_run_status(const std::string& s);
/// Forward along created → sampling → awaiting-selection → refining → done;
/// failed is reachable from any active state.
bool can_transition(RunStatus from, RunStatus to);
bool is_terminal(RunStatus s);

struct BackendRefs {
    std::string denoiser;    // checkpoint path
    std::string classifier;  // checkpoint path; empty when guidance is off
};

/// Everything needed to re-execute a run, as stored in config.json.
struct RunConfig {
    ScheduleSpec schedule;
    GuidanceConfig guidance;  // local-spec masks are stored as files next to config.json
    BackendRefs backends;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    /// Hex FNV-1a digest of the canonical config JSON.
    std::string digest() const;
};

struct Progress {
    std::size_t done = 0;
    std::size_t total = 0;
};

struct RunState {
    std::string run_id;
    RunStatus status = RunStatus::Created;
    std::string config_digest;
    std::vector<std::string> candidate_ids;
    std::optional<std::string> selected_id;
    std::map<std::string, std::string> artifacts;  // name -> path relative to the run directory
    std::map<std::string, std::string> timestamps;  // status name -> ISO-8601 UTC
    std::string phase;  // "stochastic" or "refinement" while work is running
    Progress progress;
    std::string error;
    std::string idempotency_key;
};

nlohmann::json to_json(const RunState& s);
RunState run_state_from_json(const nlohmann::json& j);

struct CandidateSummary {
    std::string id;
    int index = 0;
    int rank = 0;  // 0 = what auto-selection picks
    int t = 0;
    double score = 0.0;
    std::uint64_t branch_seed = 0;
    std::string preview;  // artifact path
};

nlohmann::json to_json(const CandidateSummary& c);

/// What create_run receives: config plus decoded inputs.
struct RunRequest {
    RunConfig config;
    Tensor image;
    Mask mask;
    std::vector<int> labels;  // overrides config.guidance.labels when non-empty
    std::vector<LocalSpec> local_specs;
    std::string idempotency_key;
};

std::string now_iso8601();
std::string make_run_id();

/// One run on disk:
///   config.json, inputs/{gt.png, mask.png, local_<i>.png}, state.json,
///   candidates/<id>/{state.bin, preview.png, candidate.json}, selected.txt,
///   result.png, metrics.json, log.txt
class RunDirectory {
public:
    explicit RunDirectory(std::filesystem::path root) : root_(std::move(root)) {}

    /// Validates the request, fills missing labels from the classifier and writes the directory.
    static RunDirectory create(const std::filesystem::path& dir, RunRequest request, const std::string& run_id);

    const std::filesystem::path& root() const { return root_; }
    bool exists() const;

    RunConfig load_config() const;
    /// Ground truth, known-region mask and the full guidance config with local masks.
    InpaintTask load_task() const;
    GuidanceConfig load_guidance() const;

    RunState read_state() const;
    void write_state(const RunState& s) const;

    void write_candidate(const Candidate& c) const;
    Candidate read_candidate(const std::string& id) const;
    std::vector<Candidate> read_candidates() const;
    std::vector<CandidateSummary> candidate_summaries() const;

    std::optional<std::string> read_selected() const;
    void write_result(const std::string& selected_id, const Tensor& output, const MetricReport& metrics,
                      const std::string& digest) const;

    void append_log(const std::string& line) const;

    /// Path of an artifact; rejects anything escaping the run directory.
    std::filesystem::path resolve_artifact(const std::string& relative) const;

private:
    std::filesystem::path root_;
};

void write_state_bin(const std::filesystem::path& path, const Candidate& c);
Candidate read_state_bin(const std::filesystem::path& path);

/// Loaded backends plus the tables a run needs.
struct RunResources {
    RunConfig config;
    NoiseSchedule schedule;
    SkipSequence skip;
    GuidanceConfig guidance;
    std::unique_ptr<Denoiser> denoiser;
    std::unique_ptr<Classifier> classifier;

    static RunResources load(const RunDirectory& dir);
    SamplerContext context() const;
};

using ProgressFn = std::function<void(const Progress&)>;

/// created → sampling → awaiting-selection. Persists every candidate.
std::vector<Candidate> execute_sampling(const RunDirectory& dir, const ExecutionOptions& opts = {},
                                        const std::function<void(RunStatus)>& on_status = {});

/// awaiting-selection → refining → done. selection is a candidate id or "auto".
Tensor execute_refinement(const RunDirectory& dir, const std::string& selection,
                          const std::function<void(RunStatus)>& on_status = {}, const ProgressFn& progress = {});

/// Validates and records the selection, moving the run to refining. Returns the candidate id.
std::string begin_refinement(const RunDirectory& dir, const std::string& selection);
/// Runs refinement for the recorded selection and writes the result.
Tensor finish_refinement(const RunDirectory& dir, const ProgressFn& progress = {});

/// Resolves "auto" through the shared ranking.
std::string resolve_selection(const RunDirectory& dir, const std::string& selection);

/// Moves the persisted state to a new status, enforcing the transition order.
RunState transition(const RunDirectory& dir, RunStatus to, const std::string& error = {});

}  // namespace guidpaint
