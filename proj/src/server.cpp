#include "isim/server.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <future>
#include <mutex>
#include <thread>

#include "isim/io.hpp"
#include "isim/wire.hpp"

namespace isim {

namespace {

constexpr const char* kBuiltinPage = R"html(<!doctype html>
<html><head><meta charset="utf-8"><title>isim</title>
<style>body{font:13px monospace;margin:0;background:#111;color:#ddd}canvas{display:block}
#bar{position:fixed;top:4px;left:4px}</style></head>
<body><div id="bar"><span id="st">connecting</span>
<button onclick="cmd({type:'pause'})">pause</button><button onclick="cmd({type:'resume'})">resume</button></div>
<canvas id="c"></canvas>
<script>
const c=document.getElementById('c'),g=c.getContext('2d');let ext=15;
function cmd(m){fetch('/api/command',{method:'POST',body:JSON.stringify(m)});}
function draw(s){c.width=innerWidth;c.height=innerHeight;const k=Math.min(c.width,c.height)/(2*ext);
g.clearRect(0,0,c.width,c.height);for(const a of s.agents){g.fillStyle=a.kind==='ped'?'#4cf':'#fa4';
const x=c.width/2+a.pos[0]*k,y=c.height/2-a.pos[1]*k;g.fillRect(x-3,y-3,6,6);}
document.getElementById('st').textContent='tick '+s.tick+(s.paused?' (paused)':'');}
const es=new EventSource('/api/stream');es.onmessage=e=>{const m=JSON.parse(e.data);
if(m.type==='hello')ext=m.extent;else if(m.type==='snapshot')draw(m);};
</script></body></html>)html";

struct Subscriber {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::string> queue;
  bool closed = false;
};

struct Inbound {
  Command command;
  std::promise<CommandResult> done;
};

}  // namespace

struct ControlServer::Impl {
  ServeOptions opts;
  Simulator sim;
  httplib::Server http;
  std::thread http_thread, engine_thread;
  int bound_port = 0;

  std::mutex sub_mu;
  std::vector<std::shared_ptr<Subscriber>> subs;

  std::mutex in_mu;
  std::condition_variable in_cv;
  std::deque<std::shared_ptr<Inbound>> inbound;
  std::atomic<bool> running{false};
  std::atomic<bool> finished{false};
  std::int64_t next_command_id = 1;

  mutable std::mutex view_mu;
  std::string hello, snapshot;
  SimTrace final_trace;
  bool trace_written = false;
  double fps = 0.0;

  Impl(SimConfig cfg, SimModels models, ServeOptions o) : opts(std::move(o)), sim(std::move(cfg), std::move(models)) {
    sim.set_recording(opts.record || !opts.trace_out.empty());
  }

  void broadcast(const std::string& msg) {
    std::lock_guard lk(sub_mu);
    for (auto& s : subs) {
      std::lock_guard sl(s->mu);
      s->queue.push_back(msg);
      while (s->queue.size() > 1024) s->queue.pop_front();
      s->cv.notify_one();
    }
  }

  void publish_snapshot() {
    std::string snap = encode_snapshot(sim).dump();
    {
      std::lock_guard lk(view_mu);
      snapshot = snap;
    }
    broadcast(snap);
  }

  void apply(const Command& cmd, std::promise<CommandResult>* done) {
    const CommandResult r = sim.apply(cmd);
    broadcast(encode_ack(cmd.id, r).dump());
    if (done) done->set_value(r);
  }

  void finish_trace() {
    std::lock_guard lk(view_mu);
    if (trace_written) return;
    trace_written = true;
    final_trace = sim.trace();
    if (!opts.trace_out.empty()) save_trace(opts.trace_out, final_trace);
  }

  void engine() {
    using clock = std::chrono::steady_clock;
    std::vector<Command> script = opts.script;
    std::stable_sort(script.begin(), script.end(),
                     [](const Command& a, const Command& b) { return a.at_tick < b.at_tick; });
    std::size_t next = 0;
    auto deadline = clock::now();
    auto fps_start = clock::now();
    int fps_ticks = 0;
    publish_snapshot();
    while (running) {
      while (next < script.size() && (script[next].at_tick <= sim.state().tick + 1 || sim.state().paused))
        apply(script[next++], nullptr);
      std::deque<std::shared_ptr<Inbound>> batch;
      {
        std::lock_guard lk(in_mu);
        batch.swap(inbound);
      }
      for (auto& in : batch) apply(in->command, &in->done);

      const bool budget_spent = opts.ticks > 0 && sim.state().tick >= opts.ticks;
      if (budget_spent) {
        if (!finished) {
          finish_trace();
          finished = true;
          in_cv.notify_all();
        }
        if (opts.exit_when_done) break;
      }
      const auto period = std::chrono::duration_cast<clock::duration>(
          std::chrono::duration<double>(sim.config().dt / sim.state().speed));
      if (budget_spent || sim.state().paused) {
        if (sim.state().paused && !budget_spent) publish_snapshot();
        std::unique_lock lk(in_mu);
        in_cv.wait_for(lk, opts.headless ? std::chrono::milliseconds(20) : std::chrono::duration_cast<std::chrono::milliseconds>(period),
                       [&] { return !running || !inbound.empty(); });
        deadline = clock::now();
        continue;
      }

      sim.step();
      publish_snapshot();
      ++fps_ticks;
      const auto now = clock::now();
      if (now - fps_start > std::chrono::seconds(1)) {
        fps = fps_ticks / std::chrono::duration<double>(now - fps_start).count();
        std::array<std::size_t, 2> active{0, 0};
        for (const auto& a : sim.state().agents) ++active[kind_index(a.kind)];
        broadcast(encode_metrics(fps, active).dump());
        fps_start = now;
        fps_ticks = 0;
      }
      if (!opts.headless) {
        deadline += period;
        if (deadline < now) deadline = now;
        std::unique_lock lk(in_mu);
        in_cv.wait_until(lk, deadline, [&] { return !running.load(); });
      }
    }
    finish_trace();
    finished = true;
    in_cv.notify_all();
  }

  void routes() {
    http.new_task_queue = [] { return new httplib::ThreadPool(16); };
    if (!opts.assets_dir.empty()) {
      if (!http.set_mount_point("/", opts.assets_dir))
        throw Error(Errc::IoError, "assets directory '" + opts.assets_dir + "' does not exist");
    } else {
      http.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kBuiltinPage, "text/html"); });
    }
    http.Get("/api/hello", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(hello, "application/json");
    });
    http.Get("/api/snapshot", [this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard lk(view_mu);
      res.set_content(snapshot, "application/json");
    });
    http.Get("/api/stream", [this](const httplib::Request&, httplib::Response& res) {
      auto sub = std::make_shared<Subscriber>();
      {
        std::lock_guard lk(sub_mu);
        sub->queue.push_back(hello);
        std::lock_guard vl(view_mu);
        sub->queue.push_back(snapshot);
        subs.push_back(sub);
      }
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider(
          "text/event-stream",
          [this, sub](std::size_t, httplib::DataSink& sink) {
            std::unique_lock lk(sub->mu);
            sub->cv.wait_for(lk, std::chrono::seconds(1), [&] { return !sub->queue.empty() || sub->closed; });
            if (sub->closed || !running) return false;
            if (sub->queue.empty()) {
              const std::string ping = ": keepalive\n\n";
              return sink.write(ping.data(), ping.size());
            }
            while (!sub->queue.empty()) {
              const std::string frame = "data: " + sub->queue.front() + "\n\n";
              sub->queue.pop_front();
              if (!sink.write(frame.data(), frame.size())) return false;
            }
            return true;
          },
          [this, sub](bool) {
            std::lock_guard lk(sub_mu);
            subs.erase(std::remove(subs.begin(), subs.end(), sub), subs.end());
          });
    });
    http.Post("/api/command", [this](const httplib::Request& req, httplib::Response& res) {
      DecodedCommand d = decode_command(req.body);
      if (!d.command) {
        res.status = 400;
        res.set_content(d.error.dump(), "application/json");
        return;
      }
      auto in = std::make_shared<Inbound>();
      in->command = std::move(*d.command);
      auto fut = in->done.get_future();
      {
        std::lock_guard lk(in_mu);
        if (in->command.id == 0) in->command.id = next_command_id;
        next_command_id = std::max(next_command_id, in->command.id) + 1;
        inbound.push_back(in);
      }
      in_cv.notify_all();
      if (fut.wait_for(std::chrono::seconds(10)) != std::future_status::ready) {
        res.status = 503;
        res.set_content(encode_error("timeout", "engine did not apply the command").dump(), "application/json");
        return;
      }
      res.set_content(encode_ack(in->command.id, fut.get()).dump(), "application/json");
    });
  }
};

ControlServer::ControlServer(SimConfig cfg, SimModels models, ServeOptions opts)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(models), std::move(opts))) {}

ControlServer::~ControlServer() { stop(); }

void ControlServer::start() {
  auto& m = *impl_;
  m.hello = encode_hello(m.sim, m.opts.extent).dump();
  m.routes();
  // SO_REUSEADDR only; the library default also sets SO_REUSEPORT, which
  // would let a second server share a port that is already taken.
  m.http.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  if (m.opts.port == 0)
    m.bound_port = m.http.bind_to_any_port(m.opts.host);
  else
    m.bound_port = m.http.bind_to_port(m.opts.host, m.opts.port) ? m.opts.port : -1;
  if (m.bound_port <= 0)
    throw Error(Errc::BindError, "cannot bind " + m.opts.host + ":" + std::to_string(m.opts.port));
  m.running = true;
  m.engine_thread = std::thread([&m] { m.engine(); });
  m.http_thread = std::thread([&m] { m.http.listen_after_bind(); });
}

void ControlServer::stop() {
  auto& m = *impl_;
  const bool was = m.running.exchange(false);
  m.in_cv.notify_all();
  {
    std::lock_guard lk(m.sub_mu);
    for (auto& s : m.subs) {
      std::lock_guard sl(s->mu);
      s->closed = true;
      s->cv.notify_all();
    }
  }
  if (m.engine_thread.joinable()) m.engine_thread.join();
  if (was || m.http.is_running()) m.http.stop();
  if (m.http_thread.joinable()) m.http_thread.join();
}

void ControlServer::wait(const std::atomic<bool>* interrupted) {
  auto& m = *impl_;
  std::unique_lock lk(m.in_mu);
  while (!m.in_cv.wait_for(lk, std::chrono::milliseconds(200), [&] {
    return !m.running || (m.opts.exit_when_done && m.finished) || (interrupted && *interrupted);
  })) {
  }
  lk.unlock();
  stop();
}

int ControlServer::port() const { return impl_->bound_port; }

SimTrace ControlServer::trace() const {
  std::lock_guard lk(impl_->view_mu);
  return impl_->final_trace;
}

void serve(SimConfig cfg, SimModels models, ServeOptions opts, const std::atomic<bool>* interrupted) {
  ControlServer server(std::move(cfg), std::move(models), std::move(opts));
  server.start();
  server.wait(interrupted);
}

}  // namespace isim
