#include <gtest/gtest.h>

#include <chrono>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "pentimento/gradcheck.hpp"
#include "pentimento/service.hpp"

using namespace pentimento;
using namespace std::chrono_literals;

namespace {

std::string to_body(const std::vector<std::uint8_t>& b) { return {b.begin(), b.end()}; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// An in-process service on an ephemeral port.
class Server {
 public:
  explicit Server(const std::filesystem::path& store, std::size_t workers = 2, std::size_t max_asset = 32u << 20) {
    ServiceOptions o;
    o.store = store;
    o.weights_path = store / "weights.nstw";
    o.workers = workers;
    o.max_asset_bytes = max_asset;
    service_ = std::make_unique<StudioService>(o);
    port_ = service_->bind("127.0.0.1", 0);
    thread_ = std::thread([this] { service_->serve(); });
    service_->wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(30, 0);
  }
  ~Server() { stop(); }

  void stop() {
    if (!service_) return;
    service_->shutdown();
    thread_.join();
    service_.reset();
  }

  httplib::Client& http() { return *client_; }

  std::string upload(const std::vector<std::uint8_t>& bytes) {
    auto res = client_->Post("/v1/assets", to_body(bytes), "image/png");
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, 200) << res->body;
    return Json::parse(res->body).at("asset_id").get<std::string>();
  }

  httplib::Result submit(const Json& body) { return client_->Post("/v1/jobs", body.dump(), "application/json"); }

  Json job(const std::string& id) {
    auto res = client_->Get("/v1/jobs/" + id);
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    return Json::parse(res->body);
  }

  Json wait_for(const std::string& id, const std::function<bool(const Json&)>& pred,
                std::chrono::seconds limit = 120s) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    Json j = job(id);
    while (!pred(j) && std::chrono::steady_clock::now() < deadline) {
      std::this_thread::sleep_for(20ms);
      j = job(id);
    }
    return j;
  }

  Json wait_terminal(const std::string& id) {
    return wait_for(id, [](const Json& j) {
      const auto s = j["state"].get<std::string>();
      return s == "done" || s == "failed" || s == "cancelled";
    });
  }

 private:
  std::unique_ptr<StudioService> service_;
  std::thread thread_;
  int port_ = 0;
  std::unique_ptr<httplib::Client> client_;
};

class ServiceTest : public ::testing::Test {
 protected:
  oracle::TempDir store{"store"};

  void SetUp() override { save_weights(make_random_weights({}), store / "weights.nstw"); }

  static Json job_body(const std::string& content, const std::string& style, std::int64_t steps,
                       std::uint64_t seed = 1) {
    const LossConfig l = random_net_loss_config();
    Json taps = Json::array();
    for (const auto& t : l.style_taps) taps.push_back({{"layer", t.layer}, {"weight", t.weight}});
    return {{"content_asset", content},
            {"style_asset", style},
            {"size", 64},
            {"seed", seed},
            {"loss", {{"content_taps", l.content_taps}, {"style_taps", taps}}},
            {"optimizer", {{"steps", steps}, {"snapshot_every", 5}}}};
  }
};

int state_rank(const std::string& s) {
  if (s == "queued") return 0;
  if (s == "running") return 1;
  return 2;
}

}  // namespace

TEST_F(ServiceTest, Healthz) {
  Server s(store.path());
  auto res = s.http().Get("/healthz");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(Json::parse(res->body), (Json{{"status", "ok"}}));
}

TEST_F(ServiceTest, AssetsAreContentAddressed) {
  Server s(store.path());
  const auto png = oracle::make_png(1, 1, 1, {200});
  const std::string a = s.upload(png), b = s.upload(png);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 64u);
  EXPECT_EQ(a.find_first_not_of("0123456789abcdef"), std::string::npos);
  EXPECT_EQ(slurp(store / ("assets/" + a)), to_body(png));
  EXPECT_NE(s.upload(oracle::make_png(1, 1, 1, {201})), a);
}

TEST_F(ServiceTest, CorruptAssetIs415) {
  Server s(store.path());
  auto res = s.http().Post("/v1/assets", "not an image", "application/octet-stream");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 415);
  const Json j = Json::parse(res->body);
  EXPECT_EQ(j["code"], "unsupported_media");
  EXPECT_FALSE(j["message"].get<std::string>().empty());
}

TEST_F(ServiceTest, OversizedAssetIs413) {
  Server s(store.path(), 1, 2048);
  std::vector<std::uint8_t> big(64 * 64);
  std::mt19937_64 rng(5);
  for (auto& b : big) b = std::uint8_t(rng());
  auto res = s.http().Post("/v1/assets", to_body(oracle::make_png(64, 64, 1, big)), "image/png");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 413);
}

TEST_F(ServiceTest, JobValidation) {
  Server s(store.path());
  const std::string c = s.upload(oracle::content_fixture_png()), st = s.upload(oracle::style_fixture_png());

  auto res = s.http().Post("/v1/jobs", "{oops", "application/json");
  EXPECT_EQ(res->status, 400);

  Json body = job_body(c, std::string(64, 'a'), 5);
  res = s.submit(body);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(Json::parse(res->body)["field"], "style_asset");

  body = job_body(c, st, 0);
  res = s.submit(body);
  EXPECT_EQ(res->status, 422);
  EXPECT_EQ(Json::parse(res->body)["field"], "optimizer.steps");

  body = job_body(c, st, 5);
  body.erase("style_asset");
  res = s.submit(body);
  EXPECT_EQ(res->status, 422);
  EXPECT_EQ(Json::parse(res->body)["field"], "style_asset");

  body = job_body(c, st, 5);
  body["content_path"] = "/etc/passwd";
  EXPECT_EQ(s.submit(body)->status, 422);

  EXPECT_EQ(s.http().Get("/v1/jobs/00000000-0000-0000-0000-000000000000")->status, 404);
}

TEST_F(ServiceTest, JobRunsToDone) {
  Server s(store.path());
  const std::string c = s.upload(oracle::content_fixture_png()), st = s.upload(oracle::style_fixture_png());
  auto res = s.submit(job_body(c, st, 12));
  ASSERT_EQ(res->status, 202);
  const std::string id = Json::parse(res->body)["job_id"];
  const std::string first = s.job(id)["state"];
  EXPECT_TRUE(first == "queued" || first == "running") << first;

  const Json done = s.wait_terminal(id);
  EXPECT_EQ(done["state"], "done") << done.dump();
  EXPECT_EQ(done["progress"]["iteration"], 12);
  EXPECT_EQ(done["progress"]["losses"].size(), 12u);
  ASSERT_EQ(done["snapshots"].size(), 3u);
  for (int k = 0; k < 3; ++k) {
    auto png = s.http().Get("/v1/jobs/" + id + "/snapshots/" + std::to_string(k));
    ASSERT_EQ(png->status, 200);
    EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
    EXPECT_NO_THROW(decode_image(std::span(reinterpret_cast<const std::uint8_t*>(png->body.data()), png->body.size())));
  }
  EXPECT_EQ(s.http().Get("/v1/jobs/" + id + "/snapshots/3")->status, 404);
  EXPECT_EQ(s.http().Delete("/v1/jobs/" + id)->status, 409);
}

TEST_F(ServiceTest, ProgressIsLiveAndMonotone) {
  Server s(store.path(), 1);
  const std::string c = s.upload(oracle::content_fixture_png()), st = s.upload(oracle::style_fixture_png());
  const std::string id = Json::parse(s.submit(job_body(c, st, 200))->body)["job_id"];
  int prev_rank = 0;
  std::size_t prev_iter = 0;
  bool increased = false;
  while (true) {
    const Json j = s.job(id);
    const int rank = state_rank(j["state"]);
    const std::size_t iter = j["progress"]["iteration"];
    EXPECT_GE(rank, prev_rank);
    EXPECT_GE(iter, prev_iter);
    increased = increased || (iter > prev_iter && prev_iter > 0);
    prev_rank = rank;
    prev_iter = iter;
    if (rank == 2) break;
    std::this_thread::sleep_for(50ms);
  }
  EXPECT_TRUE(increased);
  EXPECT_EQ(prev_iter, 200u);
}

TEST_F(ServiceTest, CancelRetainsSnapshots) {
  Server s(store.path(), 1);
  const std::string c = s.upload(oracle::content_fixture_png()), st = s.upload(oracle::style_fixture_png());
  const std::string id = Json::parse(s.submit(job_body(c, st, 5000))->body)["job_id"];
  s.wait_for(id, [](const Json& j) { return j["snapshots"].size() >= 2; });
  auto res = s.http().Delete("/v1/jobs/" + id);
  ASSERT_EQ(res->status, 200);
  Json j = s.job(id);
  EXPECT_EQ(j["state"], "cancelled");
  const auto kept = j["snapshots"].size();
  EXPECT_GE(kept, 2u);
  std::this_thread::sleep_for(300ms);
  j = s.job(id);
  EXPECT_EQ(j["state"], "cancelled");
  EXPECT_EQ(j["snapshots"].size(), kept);
  for (std::size_t k = 0; k < kept; ++k)
    EXPECT_EQ(s.http().Get("/v1/jobs/" + id + "/snapshots/" + std::to_string(k))->status, 200);
  EXPECT_EQ(s.http().Delete("/v1/jobs/" + id)->status, 200);
}

TEST_F(ServiceTest, CancelWhileQueued) {
  Server s(store.path(), 1);
  const std::string c = s.upload(oracle::content_fixture_png()), st = s.upload(oracle::style_fixture_png());
  const std::string busy = Json::parse(s.submit(job_body(c, st, 5000))->body)["job_id"];
  const std::string waiting = Json::parse(s.submit(job_body(c, st, 5))->body)["job_id"];
  EXPECT_EQ(s.job(waiting)["state"], "queued");
  EXPECT_EQ(s.http().Delete("/v1/jobs/" + waiting)->status, 200);
  EXPECT_EQ(s.http().Delete("/v1/jobs/" + busy)->status, 200);
  std::this_thread::sleep_for(200ms);
  const Json j = s.job(waiting);
  EXPECT_EQ(j["state"], "cancelled");
  EXPECT_EQ(j["progress"]["iteration"], 0);
}

TEST_F(ServiceTest, RestartMarksRunningInterrupted) {
  std::string done_id, running_id;
  {
    Server s(store.path(), 1);
    const std::string c = s.upload(oracle::content_fixture_png()), st = s.upload(oracle::style_fixture_png());
    done_id = Json::parse(s.submit(job_body(c, st, 6))->body)["job_id"];
    EXPECT_EQ(s.wait_terminal(done_id)["state"], "done");
    running_id = Json::parse(s.submit(job_body(c, st, 5000))->body)["job_id"];
    s.wait_for(running_id, [](const Json& j) { return j["snapshots"].size() >= 1; });
  }
  Server s(store.path(), 1);
  const Json interrupted = s.job(running_id);
  EXPECT_EQ(interrupted["state"], "failed");
  EXPECT_EQ(interrupted["error"], "interrupted");
  EXPECT_EQ(s.http().Get("/v1/jobs/" + running_id + "/snapshots/0")->status, 200);

  const Json done = s.job(done_id);
  EXPECT_EQ(done["state"], "done");
  EXPECT_EQ(done["progress"]["iteration"], 6);
  for (std::size_t k = 0; k < done["snapshots"].size(); ++k)
    EXPECT_EQ(s.http().Get("/v1/jobs/" + done_id + "/snapshots/" + std::to_string(k))->status, 200);
}

TEST_F(ServiceTest, ConcurrentJobsMatchSequentialRuns) {
  Server s(store.path(), 3);
  const std::string c = s.upload(oracle::content_fixture_png()), st = s.upload(oracle::style_fixture_png());
  std::vector<std::string> ids;
  for (std::uint64_t seed : {1, 2, 3}) {
    Json body = job_body(c, st, 15, seed);
    body["init"] = "noise";
    ids.push_back(Json::parse(s.submit(body)->body)["job_id"]);
  }
  for (const auto& id : ids) ASSERT_EQ(s.wait_terminal(id)["state"], "done");

  for (std::size_t i = 0; i < ids.size(); ++i) {
    ReconstructionConfig cfg = config_from_json(
        Json::parse(slurp(store / ("jobs/" + ids[i] + "/job.json")))["resolved_config"]);
    cfg.output_dir = store / ("sequential_" + std::to_string(i));
    run(cfg);
    EXPECT_EQ(slurp(cfg.output_dir / "loss.csv"), slurp(store / ("jobs/" + ids[i] + "/out/loss.csv")));
    EXPECT_EQ(slurp(cfg.output_dir / "final.png"), slurp(store / ("jobs/" + ids[i] + "/out/final.png")));
  }
}
