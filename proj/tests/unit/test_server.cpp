#include <doctest.h>

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <set>
#include <thread>

#include "isim/ingest.hpp"
#include "isim/io.hpp"
#include "isim/server.hpp"

// After Eigen: <resolv.h> defines _res, which Eigen uses as a parameter name.
#include <httplib.h>

using namespace isim;
using namespace std::chrono_literals;

namespace {

SimModels synth_models(double per_kind) {
  SynthConfig c;
  c.seed = 6;
  c.ped_per_route = 20;
  c.veh_per_route = 15;
  const auto s = synth_generate(c);
  std::vector<std::vector<double>> pf, vf;
  for (const auto& t : s.corpus) (t.kind == AgentKind::Pedestrian ? pf : vf).push_back(vectorize_trajectory(t).flatten());
  SimModels m;
  m.gmm = {std::make_shared<GmmModel>(fit_em(pf, AgentKind::Pedestrian, 4, 1)),
           std::make_shared<GmmModel>(fit_em(vf, AgentKind::Vehicle, 6, 1))};
  for (AgentKind k : {AgentKind::Pedestrian, AgentKind::Vehicle}) {
    auto d = std::make_shared<TodDensityModel>();
    d->kind = k;
    d->components = {{1.0, 12.0, 1e6}};
    d->amplitude = per_kind * 24.0;
    m.density[kind_index(k)] = d;
  }
  return m;
}

// Reads the event stream on a background thread until `done` says stop.
class StreamReader {
 public:
  StreamReader(int port, std::function<bool(const std::vector<Json>&)> done) : done_(std::move(done)) {
    thread_ = std::thread([this, port] {
      httplib::Client cli("127.0.0.1", port);
      cli.set_read_timeout(5, 0);
      cli.Get("/api/stream", [this](const char* data, std::size_t len) {
        std::lock_guard lk(mu_);
        buf_.append(data, len);
        for (std::size_t p; (p = buf_.find("\n\n")) != std::string::npos;) {
          const std::string frame = buf_.substr(0, p);
          buf_.erase(0, p + 2);
          if (frame.rfind("data: ", 0) == 0) messages_.push_back(Json::parse(frame.substr(6)));
        }
        if (done_(messages_)) finished_ = true;
        return !finished_.load();
      });
      finished_ = true;
    });
  }
  ~StreamReader() {
    if (thread_.joinable()) thread_.join();
  }

  bool wait(std::chrono::milliseconds limit) {
    const auto end = std::chrono::steady_clock::now() + limit;
    while (!finished_ && std::chrono::steady_clock::now() < end) std::this_thread::sleep_for(10ms);
    return finished_;
  }
  std::vector<Json> messages() {
    std::lock_guard lk(mu_);
    return messages_;
  }

 private:
  std::function<bool(const std::vector<Json>&)> done_;
  std::thread thread_;
  std::mutex mu_;
  std::string buf_;
  std::vector<Json> messages_;
  std::atomic<bool> finished_{false};
};

std::vector<Json> of_type(const std::vector<Json>& all, const std::string& type) {
  std::vector<Json> out;
  for (const auto& m : all)
    if (m["type"] == type) out.push_back(m);
  return out;
}

Json post(int port, const std::string& body, int* status = nullptr) {
  httplib::Client cli("127.0.0.1", port);
  const auto res = cli.Post("/api/command", body, "application/json");
  REQUIRE(res);
  if (status) *status = res->status;
  return Json::parse(res->body);
}

Json get(int port, const std::string& path) {
  httplib::Client cli("127.0.0.1", port);
  const auto res = cli.Get(path);
  REQUIRE(res);
  REQUIRE(res->status == 200);
  return Json::parse(res->body);
}

ServeOptions local() {
  ServeOptions o;
  o.port = 0;
  return o;
}

SimConfig fast(double speed = 20.0) {
  SimConfig c;
  c.refine = false;
  c.speed = speed;
  return c;
}

}  // namespace

TEST_CASE("hello then snapshots with increasing ticks") {
  ControlServer srv(fast(), synth_models(2), local());
  srv.start();
  StreamReader r(srv.port(), [](const std::vector<Json>& m) { return of_type(m, "snapshot").size() >= 6; });
  REQUIRE(r.wait(20s));
  const auto msgs = r.messages();
  REQUIRE(!msgs.empty());
  CHECK(msgs[0]["type"] == "hello");
  CHECK(msgs[0]["schema_version"] == 1);
  const auto snaps = of_type(msgs, "snapshot");
  // The first snapshot is the state at connect time; later ones follow ticks.
  for (std::size_t i = 2; i < snaps.size(); ++i) CHECK(snaps[i]["tick"].get<int>() > snaps[i - 1]["tick"].get<int>());
  CHECK(get(srv.port(), "/api/hello")["type"] == "hello");
  CHECK(get(srv.port(), "/api/snapshot")["type"] == "snapshot");
  srv.stop();
}

TEST_CASE("pause freezes the tick and snapshots repeat it") {
  ControlServer srv(fast(), synth_models(2), local());
  srv.start();
  std::this_thread::sleep_for(150ms);
  const Json ack = post(srv.port(), R"({"type":"pause","id":7})");
  CHECK(ack["type"] == "ack");
  CHECK(ack["command_id"] == 7);
  CHECK(ack["result"]["status"] == "ok");
  const auto tick = get(srv.port(), "/api/snapshot")["tick"].get<int>();
  std::this_thread::sleep_for(100ms);
  const Json later = get(srv.port(), "/api/snapshot");
  CHECK(later["tick"].get<int>() == tick);
  CHECK(later["paused"] == true);

  StreamReader r(srv.port(), [](const std::vector<Json>& m) { return of_type(m, "snapshot").size() >= 3; });
  REQUIRE(r.wait(20s));
  for (const auto& s : of_type(r.messages(), "snapshot")) {
    CHECK(s["tick"].get<int>() == tick);
    CHECK(s["paused"] == true);
  }
  CHECK(post(srv.port(), R"({"type":"resume"})")["result"]["status"] == "ok");
  std::this_thread::sleep_for(200ms);
  CHECK(get(srv.port(), "/api/snapshot")["tick"].get<int>() > tick);
  srv.stop();
}

TEST_CASE("two clients see a spawn in the same tick") {
  ControlServer srv(fast(5.0), synth_models(0), local());
  srv.start();
  std::atomic<bool> posted{false};
  std::set<std::int64_t> ids;
  std::mutex ids_mu;
  // Stop once a snapshot after the spawn carries every new id.
  auto saw_all = [&](const std::vector<Json>& m) {
    if (!posted) return false;
    std::lock_guard lk(ids_mu);
    for (const auto& s : of_type(m, "snapshot")) {
      std::size_t hit = 0;
      for (const auto& a : s["agents"]) hit += ids.count(a["id"].get<std::int64_t>());
      if (!ids.empty() && hit == ids.size()) return true;
    }
    return false;
  };
  StreamReader a(srv.port(), saw_all), b(srv.port(), saw_all);
  std::this_thread::sleep_for(300ms);

  const Json ack = post(srv.port(), R"({"type":"spawn","kind":"veh","count":2,"components":[3]})");
  REQUIRE(ack["result"]["status"] == "ok");
  const auto scheduled = ack["result"]["scheduled_tick"].get<std::int64_t>();
  // Ids come from the tick record of the scheduled tick.
  for (int tries = 0; tries < 100; ++tries) {
    const Json s = get(srv.port(), "/api/snapshot");
    if (s["tick"].get<std::int64_t>() >= scheduled) {
      std::lock_guard lk(ids_mu);
      for (const auto& ag : s["agents"])
        if (ag["kind"] == "veh" && ag["component"] == 3) ids.insert(ag["id"].get<std::int64_t>());
      break;
    }
    std::this_thread::sleep_for(20ms);
  }
  CHECK(ids.size() == 2);
  posted = true;
  REQUIRE(a.wait(20s));
  REQUIRE(b.wait(20s));

  auto first_tick = [&](const std::vector<Json>& m) {
    for (const auto& s : of_type(m, "snapshot")) {
      std::size_t hit = 0;
      for (const auto& ag : s["agents"]) hit += ids.count(ag["id"].get<std::int64_t>());
      if (hit == ids.size()) return s["tick"].get<std::int64_t>();
    }
    return std::int64_t(-1);
  };
  const auto ta = first_tick(a.messages()), tb = first_tick(b.messages());
  CHECK(ta == scheduled);
  CHECK(ta == tb);
  srv.stop();
}

TEST_CASE("malformed and rejected commands") {
  ControlServer srv(fast(), synth_models(1), local());
  srv.start();
  int status = 0;
  Json e = post(srv.port(), "{nope", &status);
  CHECK(status == 400);
  CHECK(e["type"] == "error");
  CHECK(e["code"] == "parse_error");
  e = post(srv.port(), R"({"type":"fly"})", &status);
  CHECK(status == 400);
  CHECK(e["code"] == "unsupported");
  const Json ack = post(srv.port(), R"({"type":"set_speed","multiplier":0})", &status);
  CHECK(status == 200);
  CHECK(ack["result"]["status"] == "error");
  CHECK(ack["result"]["code"] == "InvalidSpeed");
  srv.stop();
}

TEST_CASE("headless tick budget and trace") {
  ServeOptions o = local();
  o.headless = true;
  o.ticks = 30;
  o.exit_when_done = true;
  o.record = true;
  ControlServer srv(fast(), synth_models(2), o);
  srv.start();
  const auto t0 = std::chrono::steady_clock::now();
  srv.wait();
  CHECK(std::chrono::steady_clock::now() - t0 < 20s);
  CHECK(srv.trace().ticks.size() == 30);
}

TEST_CASE("bind failure") {
  ControlServer first(fast(), synth_models(1), local());
  first.start();
  ServeOptions o;
  o.port = first.port();
  ControlServer second(fast(), synth_models(1), o);
  try {
    second.start();
    FAIL("expected BindError");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::BindError);
  }
  first.stop();
}
