#pragma once

// HTTP job service around `run`: content-addressed asset uploads, a FIFO job
// queue served by a worker pool, progress polling, snapshot download and
// cooperative cancellation. State lives on the filesystem:
//
//   <store>/assets/<sha256>
//   <store>/jobs/<id>/job.json
//   <store>/jobs/<id>/out/{content,snapshot_*,final}.png, report.json, loss.csv

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include <boost/uuid/uuid.hpp>
#include <boost/uuid/uuid_generators.hpp>
#include <boost/uuid/uuid_io.hpp>
#include <httplib.h>

#include "config.hpp"
#include "image.hpp"
#include "io.hpp"
#include "reconstruct.hpp"

namespace pentimento {

enum class JobState { queued, running, done, failed, cancelled };

inline const char* to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
    case JobState::cancelled: return "cancelled";
  }
  return "unknown";
}

inline std::optional<JobState> parse_job_state(std::string_view s) {
  for (auto st : {JobState::queued, JobState::running, JobState::done, JobState::failed, JobState::cancelled})
    if (s == to_string(st)) return st;
  return std::nullopt;
}

inline bool is_terminal(JobState s) {
  return s == JobState::done || s == JobState::failed || s == JobState::cancelled;
}

/// queued -> running -> {done | failed | cancelled}; a queued job may also be
/// cancelled, or failed when it cannot be resumed.
inline bool can_transition(JobState from, JobState to) {
  switch (from) {
    case JobState::queued: return to == JobState::running || to == JobState::cancelled || to == JobState::failed;
    case JobState::running: return is_terminal(to);
    default: return false;
  }
}

struct Job {
  std::string id;
  std::uint64_t seq = 0;  // submission order
  JobState state = JobState::queued;
  Json request;           // config as submitted, asset ids instead of paths
  ReconstructionConfig config;
  std::size_t iteration = 0;
  std::vector<LossBreakdown> losses;
  std::vector<std::string> snapshots;
  std::string created;
  std::string updated;
  std::optional<std::string> error;

  void advance(JobState to) {
    if (!can_transition(state, to))
      throw std::logic_error(std::string("illegal job transition ") + to_string(state) + " -> " + to_string(to));
    state = to;
  }
};

inline Json to_json(const Job& job) {
  Json losses = Json::array();
  for (const auto& l : job.losses) losses.push_back(to_json(l));
  return {{"id", job.id},
          {"state", to_string(job.state)},
          {"config", job.request},
          {"progress", {{"iteration", job.iteration}, {"losses", losses}}},
          {"snapshots", job.snapshots},
          {"created", job.created},
          {"updated", job.updated},
          {"error", job.error ? Json(*job.error) : Json(nullptr)}};
}

namespace detail {

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, int(ms));
  return buf;
}

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr))
    throw std::runtime_error("SHA-256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

inline bool is_hex_id(std::string_view s, std::size_t len) {
  return s.size() == len && std::all_of(s.begin(), s.end(), [](char c) {
           return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
         });
}

inline std::size_t env_size(const char* name, std::size_t fallback) {
  const char* v = std::getenv(name);
  if (!v || !*v) return fallback;
  try {
    return std::size_t(std::stoul(v));
  } catch (const std::exception&) {
    return fallback;
  }
}

}  // namespace detail

struct ServiceOptions {
  std::filesystem::path store = "store";
  std::filesystem::path weights_path;  // network every job runs with
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency() / 2);
  std::optional<std::filesystem::path> static_dir;
  std::size_t max_asset_bytes = 32u << 20;

  /// PENTIMENTO_STORE, PENTIMENTO_WEIGHTS, PENTIMENTO_WORKERS, PENTIMENTO_STATIC.
  static ServiceOptions from_env() {
    ServiceOptions o;
    if (const char* s = std::getenv("PENTIMENTO_STORE"); s && *s) o.store = s;
    if (const char* s = std::getenv("PENTIMENTO_WEIGHTS"); s && *s) o.weights_path = s;
    else o.weights_path = o.store / "weights.nstw";
    o.workers = std::max<std::size_t>(1, detail::env_size("PENTIMENTO_WORKERS", o.workers));
    if (const char* s = std::getenv("PENTIMENTO_STATIC"); s && *s) o.static_dir = s;
    return o;
  }
};

inline int default_port() { return int(detail::env_size("PENTIMENTO_PORT", 8712)); }

class StudioService {
 public:
  explicit StudioService(ServiceOptions options) : options_(std::move(options)) {
    std::filesystem::create_directories(assets_dir());
    std::filesystem::create_directories(jobs_dir());
    recover();
    routes();
    for (std::size_t i = 0; i < std::max<std::size_t>(1, options_.workers); ++i)
      workers_.emplace_back([this](std::stop_token st) { work(st); });
  }

  ~StudioService() { shutdown(); }

  StudioService(const StudioService&) = delete;
  StudioService& operator=(const StudioService&) = delete;

  /// Binds the listener; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host = "0.0.0.0", int port = 8712) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  /// Serves requests until shutdown(). Call after bind().
  void serve() { server_.listen_after_bind(); }

  void wait_until_ready() const { server_.wait_until_ready(); }

  /// Stops the listener and the workers. Jobs still running are left as
  /// `running` on disk and surface as interrupted on the next start.
  void shutdown() {
    {
      std::lock_guard lock(mu_);
      if (stopping_) return;
      stopping_ = true;
      for (auto& [id, src] : running_) src.request_stop();
    }
    queue_cv_.notify_all();
    server_.stop();
    for (auto& w : workers_) w.request_stop();
    queue_cv_.notify_all();
    workers_.clear();
  }

  httplib::Server& http() noexcept { return server_; }
  const ServiceOptions& options() const noexcept { return options_; }

  std::optional<Json> job_json(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return to_json(it->second);
  }

 private:
  std::filesystem::path assets_dir() const { return options_.store / "assets"; }
  std::filesystem::path jobs_dir() const { return options_.store / "jobs"; }
  std::filesystem::path job_dir(const std::string& id) const { return jobs_dir() / id; }

  static void send_error(httplib::Response& res, int status, std::string code, std::string message,
                         std::optional<std::string> field = std::nullopt) {
    Json body = {{"code", std::move(code)}, {"message", std::move(message)}};
    if (field) body["field"] = *field;
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_json(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  // Caller holds mu_.
  void persist(const Job& job) const {
    Json j = to_json(job);
    j["seq"] = job.seq;
    j["resolved_config"] = pentimento::to_json(job.config);
    std::filesystem::create_directories(job_dir(job.id));
    write_file_atomic(job_dir(job.id) / "job.json", j.dump());
  }

  void recover() {
    std::vector<Job*> requeue;
    for (const auto& entry : std::filesystem::directory_iterator(jobs_dir())) {
      const auto file = entry.path() / "job.json";
      if (!std::filesystem::exists(file)) continue;
      try {
        const auto bytes = read_file_bytes(file);
        const Json j = Json::parse(bytes.begin(), bytes.end());
        Job job;
        job.id = j.at("id").get<std::string>();
        job.seq = j.value("seq", std::uint64_t(0));
        job.state = parse_job_state(j.at("state").get<std::string>()).value_or(JobState::failed);
        job.request = j.at("config");
        job.config = config_from_json(j.at("resolved_config"));
        job.iteration = j.at("progress").at("iteration").get<std::size_t>();
        for (const auto& l : j.at("progress").at("losses"))
          job.losses.push_back({l.at("total"), l.at("content"), l.at("style"), l.at("tv")});
        job.snapshots = j.at("snapshots").get<std::vector<std::string>>();
        job.created = j.at("created").get<std::string>();
        job.updated = j.at("updated").get<std::string>();
        if (j.contains("error") && j["error"].is_string()) job.error = j["error"].get<std::string>();
        if (job.state == JobState::running) {
          job.advance(JobState::failed);
          job.error = "interrupted";
          job.updated = detail::utc_now();
          persist(job);
        }
        next_seq_ = std::max(next_seq_, job.seq + 1);
        auto [it, _] = jobs_.emplace(job.id, std::move(job));
        if (it->second.state == JobState::queued) requeue.push_back(&it->second);
      } catch (const std::exception&) {
        // Unreadable job records are skipped.
      }
    }
    std::sort(requeue.begin(), requeue.end(), [](const Job* a, const Job* b) { return a->seq < b->seq; });
    for (const Job* j : requeue) queue_.push_back(j->id);
  }

  void routes() {
    server_.set_payload_max_length(options_.max_asset_bytes + 1);
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      const char* code = res.status == 413 ? "too_large" : res.status == 404 ? "not_found" : "error";
      send_error(res, res.status, code, httplib::status_message(res.status));
    });
    if (options_.static_dir) server_.set_mount_point("/", options_.static_dir->string());

    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"status", "ok"}});
    });
    server_.Post("/v1/assets", [this](const httplib::Request& req, httplib::Response& res) { post_asset(req, res); });
    server_.Post("/v1/jobs", [this](const httplib::Request& req, httplib::Response& res) { post_job(req, res); });
    server_.Get(R"(/v1/jobs/([0-9a-f-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (auto j = job_json(req.matches[1])) send_json(res, 200, *j);
      else send_error(res, 404, "job_not_found", "no job " + std::string(req.matches[1]));
    });
    server_.Get(R"(/v1/jobs/([0-9a-f-]+)/snapshots/(\d+))",
                [this](const httplib::Request& req, httplib::Response& res) { get_snapshot(req, res); });
    server_.Delete(R"(/v1/jobs/([0-9a-f-]+))",
                   [this](const httplib::Request& req, httplib::Response& res) { cancel_job(req, res); });
  }

  void post_asset(const httplib::Request& req, httplib::Response& res) {
    if (req.body.size() > options_.max_asset_bytes) {
      send_error(res, 413, "too_large", "asset exceeds " + std::to_string(options_.max_asset_bytes) + " bytes");
      return;
    }
    const std::span bytes(reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size());
    try {
      decode_image(bytes);
    } catch (const DecodeError& e) {
      send_error(res, 415, "unsupported_media", e.what());
      return;
    }
    const std::string id = detail::sha256_hex(req.body);
    const auto path = assets_dir() / id;
    {
      std::lock_guard lock(asset_mu_);
      if (!std::filesystem::exists(path)) write_file_atomic(path, bytes);
    }
    send_json(res, 200, {{"asset_id", id}});
  }

  void post_job(const httplib::Request& req, httplib::Response& res) {
    Json body = Json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) {
      send_error(res, 400, "bad_request", "body must be a JSON object");
      return;
    }
    for (const char* reserved : {"content_path", "style_path", "mask_path", "weights_path", "output_dir"})
      if (body.contains(reserved)) {
        send_error(res, 422, "invalid_config", "set by the service; use *_asset fields", reserved);
        return;
      }

    Json resolved = body;
    for (const char* field : {"content_asset", "style_asset", "mask_asset"}) {
      resolved.erase(field);
      const bool optional = std::string_view(field) == "mask_asset";
      if (!body.contains(field) || body[field].is_null()) {
        if (optional) continue;
        send_error(res, 422, "invalid_config", "required", field);
        return;
      }
      if (!body[field].is_string() || !detail::is_hex_id(body[field].get<std::string>(), 64)) {
        send_error(res, 422, "invalid_config", "must be a 64-hex-digit asset id", field);
        return;
      }
      const auto path = assets_dir() / body[field].get<std::string>();
      if (!std::filesystem::exists(path)) {
        send_error(res, 404, "asset_not_found", "no asset " + body[field].get<std::string>(), field);
        return;
      }
      const std::string target = std::string(field).replace(std::string_view(field).find("_asset"), 6, "_path");
      resolved[target] = path.string();
    }

    const std::string id = boost::uuids::to_string(boost::uuids::random_generator()());
    resolved["weights_path"] = options_.weights_path.string();
    resolved["output_dir"] = (job_dir(id) / "out").string();

    Job job;
    try {
      job.config = config_from_json(resolved);
    } catch (const InvalidConfig& e) {
      Json issues = Json::array();
      for (const auto& i : e.issues()) issues.push_back({{"field", i.field}, {"message", i.message}});
      Json err = {{"code", "invalid_config"},
                  {"message", e.issues().front().message},
                  {"field", e.issues().front().field},
                  {"issues", issues}};
      send_json(res, 422, err);
      return;
    }
    job.id = id;
    job.request = body;
    job.created = job.updated = detail::utc_now();
    {
      std::lock_guard lock(mu_);
      if (stopping_) {
        send_error(res, 503, "shutting_down", "service is stopping");
        return;
      }
      job.seq = next_seq_++;
      persist(job);
      jobs_.emplace(id, std::move(job));
      queue_.push_back(id);
    }
    queue_cv_.notify_one();
    send_json(res, 202, {{"job_id", id}});
  }

  void get_snapshot(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    std::filesystem::path file;
    {
      std::lock_guard lock(mu_);
      auto it = jobs_.find(id);
      if (it == jobs_.end()) {
        send_error(res, 404, "job_not_found", "no job " + id);
        return;
      }
      std::size_t k = 0;
      try {
        k = std::stoul(std::string(req.matches[2]));
      } catch (const std::exception&) {
        k = std::size_t(-1);
      }
      if (k >= it->second.snapshots.size()) {
        send_error(res, 404, "snapshot_not_found",
                   "job has " + std::to_string(it->second.snapshots.size()) + " snapshots");
        return;
      }
      file = it->second.config.output_dir / (it->second.snapshots[k] + ".png");
    }
    try {
      const auto bytes = read_file_bytes(file);
      res.status = 200;
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    } catch (const Error& e) {
      send_error(res, 404, "snapshot_not_found", e.what());
    }
  }

  void cancel_job(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    std::lock_guard lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) {
      send_error(res, 404, "job_not_found", "no job " + id);
      return;
    }
    Job& job = it->second;
    if (job.state == JobState::done || job.state == JobState::failed) {
      send_error(res, 409, "conflict", std::string("job already ") + to_string(job.state));
      return;
    }
    if (job.state != JobState::cancelled) {
      job.advance(JobState::cancelled);
      job.updated = detail::utc_now();
      if (auto r = running_.find(id); r != running_.end()) r->second.request_stop();
      persist(job);
    }
    send_json(res, 200, to_json(job));
  }

  void work(std::stop_token worker_stop) {
    while (true) {
      std::string id;
      std::stop_source job_stop;
      ReconstructionConfig config;
      {
        std::unique_lock lock(mu_);
        queue_cv_.wait(lock, worker_stop, [&] { return !queue_.empty() || stopping_; });
        if (stopping_ || worker_stop.stop_requested()) return;
        id = queue_.front();
        queue_.pop_front();
        Job& job = jobs_.at(id);
        if (job.state != JobState::queued) continue;  // cancelled while waiting
        job.advance(JobState::running);
        job.updated = detail::utc_now();
        persist(job);
        running_.emplace(id, job_stop);
        config = job.config;
      }

      RunObserver observer;
      observer.on_iteration = [&](std::size_t iteration, const LossBreakdown& losses) {
        std::lock_guard lock(mu_);
        Job& job = jobs_.at(id);
        if (job.state != JobState::running) return;
        job.iteration = std::max(job.iteration, iteration);
        job.losses.push_back(losses);
        job.updated = detail::utc_now();
      };
      observer.on_snapshot = [&](const Snapshot& snap) {
        std::lock_guard lock(mu_);
        Job& job = jobs_.at(id);
        if (job.state != JobState::running) return;
        job.snapshots.push_back(snap.path.stem().string());
        job.updated = detail::utc_now();
        persist(job);
      };

      std::optional<std::string> failure;
      try {
        run(config, observer, job_stop.get_token());
      } catch (const std::exception& e) {
        failure = e.what();
      }

      std::lock_guard lock(mu_);
      running_.erase(id);
      Job& job = jobs_.at(id);
      if (job.state != JobState::running) continue;  // cancelled by DELETE
      if (stopping_ && job_stop.stop_requested()) return;  // left running: interrupted
      if (failure) {
        job.advance(JobState::failed);
        job.error = *failure;
      } else {
        job.advance(JobState::done);
      }
      job.updated = detail::utc_now();
      persist(job);
    }
  }

  ServiceOptions options_;
  httplib::Server server_;

  mutable std::mutex mu_;  // guards jobs_, queue_, running_, stopping_, next_seq_
  std::map<std::string, Job> jobs_;
  std::deque<std::string> queue_;
  std::map<std::string, std::stop_source> running_;
  std::condition_variable_any queue_cv_;
  bool stopping_ = false;
  std::uint64_t next_seq_ = 0;

  std::mutex asset_mu_;
  std::vector<std::jthread> workers_;
};

}  // namespace pentimento
