#include "guidpaint/service.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <iostream>

#include <httplib.h>

namespace guidpaint {

namespace fs = std::filesystem;

ServiceOptions ServiceOptions::from_env(ServiceOptions o) {
    if (const char* v = std::getenv("GUIDPAINT_DATA_ROOT"); v && *v) o.data_root = v;
    if (const char* v = std::getenv("GUIDPAINT_DENOISER"); v && *v) o.denoiser = v;
    if (const char* v = std::getenv("GUIDPAINT_CLASSIFIER"); v && *v) o.classifier = v;
    return o;
}

// ---------------------------------------------------------------------------
// Request decoding

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    static const auto table = [] {
        std::array<int, 256> t{};
        t.fill(-1);
        const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
        for (int i = 0; i < 64; ++i) t[static_cast<unsigned char>(alphabet[i])] = i;
        t['-'] = 62;  // url-safe variant
        t['_'] = 63;
        return t;
    }();
    if (text.rfind("data:", 0) == 0) {
        const auto comma = text.find(',');
        require(comma != std::string_view::npos, "malformed data URL");
        text.remove_prefix(comma + 1);
    }
    std::vector<std::uint8_t> out;
    out.reserve(text.size() * 3 / 4);
    std::uint32_t acc = 0;
    int bits = 0;
    for (char ch : text) {
        if (ch == '=') break;
        if (ch == '\n' || ch == '\r' || ch == ' ' || ch == '\t') continue;
        const int v = table[static_cast<unsigned char>(ch)];
        require(v >= 0, "invalid base64 character");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
        }
    }
    return out;
}

namespace {

using FileParts = std::map<std::string, std::string>;

std::vector<std::uint8_t> field_bytes(const nlohmann::json& body, const std::string& name, const FileParts* files) {
    if (body.contains(name) && body.at(name).is_string()) {
        try {
            return base64_decode(body.at(name).get<std::string>());
        } catch (const Error& e) {
            throw Error(ErrorKind::Validation, name, name + ": " + e.what());
        }
    }
    if (files) {
        if (auto it = files->find(name); it != files->end()) return {it->second.begin(), it->second.end()};
    }
    throw Error(ErrorKind::Validation, name, name + " is required");
}

void check_pixels(const Tensor& t, const std::string& field, const ServiceOptions& options) {
    if (t.shape().plane() > options.max_pixels) {
        throw Error(ErrorKind::TooLarge, field,
                    field + " has " + std::to_string(t.shape().plane()) + " pixels; the limit is " +
                        std::to_string(options.max_pixels));
    }
}

Tensor decode_image_field(const nlohmann::json& body, const std::string& name, const FileParts* files,
                          const ServiceOptions& options) {
    const auto bytes = field_bytes(body, name, files);
    Tensor t;
    try {
        t = decode_png(bytes);
    } catch (const Error& e) {
        throw Error(ErrorKind::Validation, name, name + ": " + e.what());
    }
    check_pixels(t, name, options);
    return t;
}

Mask decode_mask_field(const nlohmann::json& body, const std::string& name, const FileParts* files,
                       const ServiceOptions& options) {
    const auto bytes = field_bytes(body, name, files);
    Mask m;
    try {
        m = decode_mask_png(bytes);
    } catch (const Error& e) {
        throw Error(ErrorKind::Validation, name, name + ": " + e.what());
    }
    check_pixels(m.values(), name, options);
    return m;
}

RunRequest parse_request(const nlohmann::json& body, const ServiceOptions& options, const FileParts* files) {
    if (!body.is_object()) throw Error(ErrorKind::Validation, "body", "request body must be a JSON object");
    RunRequest req;
    const nlohmann::json& cfg = body.contains("config") ? body.at("config") : body;
    try {
        if (cfg.contains("schedule")) req.config.schedule = cfg.at("schedule").get<ScheduleSpec>();
    } catch (const std::exception& e) {
        throw Error(ErrorKind::Validation, "schedule", std::string("schedule: ") + e.what());
    }
    try {
        if (cfg.contains("guidance")) req.config.guidance = cfg.at("guidance").get<GuidanceConfig>();
    } catch (const std::exception& e) {
        throw Error(ErrorKind::Validation, "guidance", std::string("guidance: ") + e.what());
    }
    req.config.backends = {options.denoiser, options.classifier};

    req.image = decode_image_field(body, "image", files, options);
    req.mask = decode_mask_field(body, "mask", files, options);
    try {
        req.labels = body.value("labels", std::vector<int>{});
    } catch (const std::exception& e) {
        throw Error(ErrorKind::Validation, "labels", "labels must be a list of integers");
    }
    if (body.contains("local_specs")) {
        const auto& specs = body.at("local_specs");
        if (!specs.is_array()) throw Error(ErrorKind::Validation, "local_specs", "local_specs must be a list");
        for (std::size_t i = 0; i < specs.size(); ++i) {
            const std::string field = "local_specs[" + std::to_string(i) + "]";
            const auto& s = specs[i];
            if (!s.is_object() || !s.contains("label") || !s.at("label").is_number_integer()) {
                throw Error(ErrorKind::Validation, field + ".label", field + " needs an integer label");
            }
            nlohmann::json holder = nlohmann::json::object();
            if (s.contains("mask")) holder["mask"] = s.at("mask");
            FileParts part;
            if (files) {
                if (auto it = files->find("local_mask_" + std::to_string(i)); it != files->end()) {
                    part["mask"] = it->second;
                }
            }
            try {
                req.local_specs.push_back({decode_mask_field(holder, "mask", &part, options), s.at("label").get<int>()});
            } catch (const Error& e) {
                throw Error(e.kind(), field + ".mask", field + ".mask: " + e.what());
            }
        }
    }
    req.idempotency_key = body.value("idempotency_key", std::string{});
    return req;
}

}  // namespace

RunRequest parse_run_request(const nlohmann::json& body, const ServiceOptions& options) {
    return parse_request(body, options, nullptr);
}

// ---------------------------------------------------------------------------
// RunService

RunService::RunService(ServiceOptions options) : options_(std::move(options)) {
    fs::create_directories(options_.data_root);
    recover();
}

RunService::~RunService() { drain(); }

void RunService::recover() {
    for (const auto& entry : fs::directory_iterator(options_.data_root)) {
        if (!entry.is_directory()) continue;
        RunDirectory dir(entry.path());
        if (!dir.exists()) continue;
        try {
            RunState st = dir.read_state();
            if (!st.idempotency_key.empty()) idempotency_[st.idempotency_key] = st.run_id;
            if (!is_terminal(st.status) && st.status != RunStatus::AwaitingSelection) {
                transition(dir, RunStatus::Failed, "interrupted by a service restart");
            }
        } catch (const std::exception& e) {
            std::cerr << "skipping run directory " << entry.path() << ": " << e.what() << '\n';
        }
    }
}

RunDirectory RunService::directory(const std::string& run_id) const {
    const bool plain = !run_id.empty() && std::all_of(run_id.begin(), run_id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_';
    });
    RunDirectory dir(options_.data_root / run_id);
    if (!plain || !dir.exists()) fail(ErrorKind::NotFound, "unknown run '" + run_id + "'");
    return dir;
}

void RunService::launch(std::function<void()> job) {
    std::lock_guard lock(mutex_);
    // Reap finished workers so a long-lived server does not accumulate threads.
    for (auto it = workers_.begin(); it != workers_.end();) {
        if (it->done->load()) {
            it->thread.join();
            it = workers_.erase(it);
        } else {
            ++it;
        }
    }
    auto done = std::make_shared<std::atomic<bool>>(false);
    std::thread thread([this, done, job = std::move(job)] {
        try {
            job();
        } catch (const std::exception& e) {
            std::cerr << "run worker: " << e.what() << '\n';
        }
        done->store(true);
        notify();
    });
    workers_.push_back({std::move(thread), std::move(done)});
}

void RunService::notify() {
    std::lock_guard lock(mutex_);
    changed_.notify_all();
}

void RunService::set_progress(const std::string& run_id, Progress p) {
    std::lock_guard lock(mutex_);
    progress_[run_id] = p;
    changed_.notify_all();
}

void RunService::drain() {
    for (;;) {
        std::vector<Worker> workers;
        {
            std::lock_guard lock(mutex_);
            workers.swap(workers_);
        }
        if (workers.empty()) return;
        for (auto& w : workers) w.thread.join();
    }
}

CreateResult RunService::create_run(RunRequest request) {
    std::lock_guard op(op_mutex_);
    const std::string key = request.idempotency_key;
    if (!key.empty()) {
        std::string existing;
        {
            std::lock_guard lock(mutex_);
            if (auto it = idempotency_.find(key); it != idempotency_.end()) existing = it->second;
        }
        if (!existing.empty()) {
            const auto dir = directory(existing);
            return {get_run(existing), dir.load_config().to_json(), true};
        }
    }

    request.config.backends = {options_.denoiser, options_.classifier};
    std::string run_id;
    do {
        run_id = make_run_id();
    } while (fs::exists(options_.data_root / run_id));
    const fs::path path = options_.data_root / run_id;
    RunDirectory dir(path);
    try {
        dir = RunDirectory::create(path, std::move(request), run_id);
    } catch (...) {
        std::error_code ec;
        fs::remove_all(path, ec);
        throw;
    }
    {
        std::lock_guard lock(mutex_);
        if (!key.empty()) idempotency_[key] = run_id;
        progress_[run_id] = {};
    }
    CreateResult result{dir.read_state(), dir.load_config().to_json(), false};

    launch([this, dir, run_id] {
        ExecutionOptions eo;
        eo.parallel = options_.parallel_branches;
        eo.progress = [this, run_id](std::size_t done, std::size_t total) { set_progress(run_id, {done, total}); };
        execute_sampling(dir, eo, [this](RunStatus) { notify(); });
    });
    return result;
}

RunState RunService::get_run(const std::string& run_id) const {
    RunState st = directory(run_id).read_state();
    if (st.status == RunStatus::Sampling || st.status == RunStatus::Refining) {
        std::lock_guard lock(mutex_);
        if (auto it = progress_.find(run_id); it != progress_.end()) st.progress = it->second;
    }
    return st;
}

std::vector<CandidateSummary> RunService::list_candidates(const std::string& run_id) const {
    const auto dir = directory(run_id);
    const RunState st = dir.read_state();
    if (st.status == RunStatus::Created || st.status == RunStatus::Sampling) {
        throw ServiceError(ErrorKind::Conflict, "phase_too_early",
                           std::string("run is ") + to_string(st.status) + "; candidates are not ready");
    }
    if (st.candidate_ids.empty()) {
        throw ServiceError(ErrorKind::Conflict, "no_candidates", "run failed before producing candidates: " + st.error);
    }
    return dir.candidate_summaries();
}

RunState RunService::select(const std::string& run_id, const std::string& selection) {
    const auto dir = directory(run_id);
    {
        std::lock_guard op(op_mutex_);
        const RunState st = dir.read_state();
        if (st.status == RunStatus::Created || st.status == RunStatus::Sampling) {
            throw ServiceError(ErrorKind::Conflict, "phase_too_early",
                               std::string("run is ") + to_string(st.status) + "; candidates are not ready");
        }
        if (st.selected_id) {
            throw ServiceError(ErrorKind::Conflict, "already_selected",
                               "candidate " + *st.selected_id + " was already selected for this run");
        }
        begin_refinement(dir, selection);
    }
    set_progress(run_id, {});
    launch([this, dir, run_id] {
        finish_refinement(dir, [this, run_id](const Progress& p) { set_progress(run_id, p); });
    });
    return get_run(run_id);
}

fs::path RunService::artifact(const std::string& run_id, const std::string& path) const {
    return directory(run_id).resolve_artifact(path);
}

RunState RunService::wait_for(const std::string& run_id, const std::function<bool(const RunState&)>& pred,
                              std::chrono::milliseconds timeout) const {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        RunState st = get_run(run_id);
        if (pred(st) || std::chrono::steady_clock::now() >= deadline) return st;
        std::unique_lock lock(mutex_);
        changed_.wait_for(lock, std::chrono::milliseconds(50));
    }
}

// ---------------------------------------------------------------------------
// HTTP

int http_status(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Validation: return 400;
        case ErrorKind::NotFound: return 404;
        case ErrorKind::Conflict: return 409;
        case ErrorKind::TooLarge: return 413;
        case ErrorKind::Unsupported: return 422;
        case ErrorKind::Runtime: return 500;
    }
    return 500;
}

nlohmann::json error_body(const std::exception& e) {
    nlohmann::json err{{"kind", "runtime"}, {"code", "runtime"}, {"message", e.what()}};
    if (const auto* ge = dynamic_cast<const Error*>(&e)) {
        err["kind"] = to_string(ge->kind());
        err["code"] = to_string(ge->kind());
        if (!ge->field().empty()) err["field"] = ge->field();
    }
    if (const auto* se = dynamic_cast<const ServiceError*>(&e)) err["code"] = se->code();
    if (dynamic_cast<const nlohmann::json::exception*>(&e)) {
        err["kind"] = err["code"] = "validation";
    }
    return {{"error", err}};
}

namespace {

int status_for(const std::exception& e) {
    if (const auto* ge = dynamic_cast<const Error*>(&e)) return http_status(ge->kind());
    if (dynamic_cast<const nlohmann::json::exception*>(&e)) return 400;
    return 500;
}

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
            fn(req, res);
        } catch (const std::exception& e) {
            send_json(res, status_for(e), error_body(e));
        }
    };
}

std::string content_type_for(const fs::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".png") return "image/png";
    if (ext == ".json") return "application/json";
    if (ext == ".txt") return "text/plain; charset=utf-8";
    if (ext == ".pgm") return "image/x-portable-graymap";
    return "application/octet-stream";
}

nlohmann::json state_json(const RunState& st) { return to_json(st); }

}  // namespace

void register_routes(httplib::Server& server, RunService& service) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type, Idempotency-Key"}});
    server.set_payload_max_length(service.options().max_body_bytes);

    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
        const ErrorKind kind = res.status == 413 ? ErrorKind::TooLarge
                               : res.status == 404 ? ErrorKind::NotFound
                               : res.status >= 500 ? ErrorKind::Runtime
                                                   : ErrorKind::Validation;
        const int status = res.status;
        send_json(res, status, error_body(Error(kind, httplib::status_message(status))));
        return httplib::Server::HandlerResponse::Handled;
    });

    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, {{"ok", true}});
    });

    server.Post("/runs", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        RunRequest request;
        if (req.is_multipart_form_data()) {
            nlohmann::json body = nlohmann::json::object();
            FileParts files;
            for (const auto& [name, part] : req.files) {
                if (name == "config" || name == "labels" || name == "local_specs") {
                    body[name] = nlohmann::json::parse(part.content);
                } else if (name == "idempotency_key") {
                    body[name] = part.content;
                } else {
                    files[name] = part.content;
                }
            }
            if (body.contains("config") && body["config"].is_object()) {
                for (const char* k : {"labels", "local_specs", "idempotency_key"}) {
                    if (!body.contains(k) && body["config"].contains(k)) body[k] = body["config"][k];
                }
            }
            request = parse_request(body, service.options(), &files);
        } else {
            request = parse_run_request(nlohmann::json::parse(req.body), service.options());
        }
        if (req.has_header("Idempotency-Key")) request.idempotency_key = req.get_header_value("Idempotency-Key");
        const auto created = service.create_run(std::move(request));
        send_json(res, created.replayed ? 200 : 201,
                  {{"run_id", created.state.run_id},
                   {"status", to_string(created.state.status)},
                   {"config", created.config},
                   {"replayed", created.replayed}});
    }));

    server.Get(R"(/runs/([^/]+))", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        send_json(res, 200, state_json(service.get_run(req.matches[1])));
    }));

    server.Get(R"(/runs/([^/]+)/candidates)", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        nlohmann::json list = nlohmann::json::array();
        for (const auto& c : service.list_candidates(id)) list.push_back(to_json(c));
        send_json(res, 200, {{"run_id", id}, {"candidates", list}});
    }));

    server.Get(R"(/runs/([^/]+)/artifacts/(.+))",
               guarded([&service](const httplib::Request& req, httplib::Response& res) {
                   const auto path = service.artifact(req.matches[1], req.matches[2]);
                   const auto bytes = read_file(path);
                   res.status = 200;
                   res.set_content(std::string(bytes.begin(), bytes.end()), content_type_for(path));
               }));

    server.Post(R"(/runs/([^/]+)/select)", guarded([&service](const httplib::Request& req, httplib::Response& res) {
        const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
        std::string selection;
        const nlohmann::json& value = body.is_object() ? body.value("candidate_id", nlohmann::json()) : body;
        if (value.is_string()) {
            selection = value.get<std::string>();
        } else if (value.is_number_integer()) {
            selection = std::to_string(value.get<long long>());
        } else {
            throw Error(ErrorKind::Validation, "candidate_id", "candidate_id must be a candidate id or \"auto\"");
        }
        const auto st = service.select(req.matches[1], selection);
        send_json(res, 202,
                  {{"run_id", st.run_id}, {"status", to_string(st.status)}, {"selected_id", *st.selected_id}});
    }));
}

int serve(const ServiceOptions& options, const std::string& host, int port) {
    RunService service(options);
    httplib::Server server;
    register_routes(server, service);
    std::cerr << "guidpaint: serving " << options.data_root << " on http://" << host << ':' << port << '\n';
    if (!server.listen(host, port)) {
        std::cerr << "guidpaint: cannot listen on " << host << ':' << port << '\n';
        return 3;
    }
    return 0;
}

}  // namespace guidpaint
