#pragma once

// HTTP front door for a live simulation. One engine thread owns the
// simulator; clients subscribe to a server-sent-event stream of Hello and
// Snapshot messages and post commands that are applied at tick boundaries.

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "isim/sim.hpp"

namespace isim {

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;          // 0 picks a free port
  std::string assets_dir;   // static UI files; a built-in page when empty
  bool headless = false;    // no wall-clock pacing
  std::int64_t ticks = 0;   // stop ticking after this many (0 = unbounded)
  std::vector<Command> script;
  std::string trace_out;    // written when the tick budget is reached or on stop
  bool record = false;      // keep the trace in memory even without trace_out
  bool exit_when_done = false;
  double extent = 15.0;
};

class ControlServer {
 public:
  ControlServer(SimConfig cfg, SimModels models, ServeOptions opts);
  ~ControlServer();
  ControlServer(const ControlServer&) = delete;
  ControlServer& operator=(const ControlServer&) = delete;

  // Binds and starts the HTTP and engine threads; throws BindError.
  void start();
  void stop();
  // Blocks until stop(), `*interrupted` turning true or, with
  // exit_when_done, the tick budget being spent.
  void wait(const std::atomic<bool>* interrupted = nullptr);
  int port() const;
  SimTrace trace() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Blocking convenience wrapper used by the CLI.
void serve(SimConfig cfg, SimModels models, ServeOptions opts, const std::atomic<bool>* interrupted = nullptr);

}  // namespace isim
