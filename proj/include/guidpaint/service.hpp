#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidpaint/error.hpp"
#include "guidpaint/run_store.hpp"

namespace httplib {
class Server;
}

namespace guidpaint {

struct ServiceOptions {
    std::filesystem::path data_root = "runs";
    // Backends are fixed by the server; clients cannot point at arbitrary files.
    std::string denoiser;
    std::string classifier;
    std::size_t max_body_bytes = 16u << 20;
    std::size_t max_pixels = 512 * 512;
    bool parallel_branches = true;

    /// GUIDPAINT_DATA_ROOT, GUIDPAINT_DENOISER, GUIDPAINT_CLASSIFIER override the defaults.
    static ServiceOptions from_env(ServiceOptions defaults);
    static ServiceOptions from_env() { return from_env(ServiceOptions()); }
};

/// Error carrying a machine-readable code for clients, e.g. "phase_too_early".
class ServiceError : public Error {
public:
    ServiceError(ErrorKind kind, std::string code, const std::string& what)
        : Error(kind, what), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

struct CreateResult {
    RunState state;
    nlohmann::json config;  // normalized config as persisted
    bool replayed = false;  // idempotency key matched an existing run
};

/// Owns the run directories under data_root and the worker threads driving them.
class RunService {
public:
    explicit RunService(ServiceOptions options);
    ~RunService();
    RunService(const RunService&) = delete;
    RunService& operator=(const RunService&) = delete;

    const ServiceOptions& options() const { return options_; }

    /// Persists the run and schedules its stochastic phase.
    CreateResult create_run(RunRequest request);
    RunState get_run(const std::string& run_id) const;
    /// Ranked best first. Throws a phase_too_early conflict before awaiting-selection.
    std::vector<CandidateSummary> list_candidates(const std::string& run_id) const;
    /// Records the selection and schedules refinement. Returns the state after the move to refining.
    RunState select(const std::string& run_id, const std::string& selection);
    std::filesystem::path artifact(const std::string& run_id, const std::string& path) const;

    /// Blocks until pred holds for the run or the timeout expires; returns the last state seen.
    RunState wait_for(const std::string& run_id, const std::function<bool(const RunState&)>& pred,
                      std::chrono::milliseconds timeout) const;
    /// Joins every finished or running worker.
    void drain();

    RunDirectory directory(const std::string& run_id) const;

private:
    void launch(std::function<void()> job);
    void set_progress(const std::string& run_id, Progress p);
    void notify();
    void recover();

    ServiceOptions options_;
    mutable std::mutex mutex_;
    mutable std::condition_variable changed_;
    std::map<std::string, std::string> idempotency_;  // key -> run id
    std::map<std::string, Progress> progress_;
    struct Worker {
        std::thread thread;
        std::shared_ptr<std::atomic<bool>> done;
    };
    std::vector<Worker> workers_;
    std::mutex op_mutex_;  // serializes create and select
};

int http_status(ErrorKind kind);
nlohmann::json error_body(const std::exception& e);

std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Decodes a JSON create-run body: {schedule, guidance, image, mask, labels, local_specs, idempotency_key}.
/// Images and masks are base64 PNG strings.
RunRequest parse_run_request(const nlohmann::json& body, const ServiceOptions& options);

/// Registers the run API on server.
void register_routes(httplib::Server& server, RunService& service);

/// Blocking HTTP server on host:port.
int serve(const ServiceOptions& options, const std::string& host, int port);

}  // namespace guidpaint
