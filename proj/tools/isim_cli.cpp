// Command-line front end over the isim C API.

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "isim/isim.h"

namespace {

using Json = nlohmann::json;

struct Failure {
  int code;
};

void check(isim_status s, const std::string& what) {
  if (s == ISIM_OK) return;
  std::fprintf(stderr, "isim: %s failed: %s\n", what.c_str(), isim_last_error());
  throw Failure{static_cast<int>(s)};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  isim_string_free(s);
  return out;
}

template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};

using Corpus = Handle<isim_corpus, isim_corpus_free>;
using Scenes = Handle<isim_scenes, isim_scenes_free>;
using Gmm = Handle<isim_gmm, isim_gmm_free>;
using Density = Handle<isim_density, isim_density_free>;
using Forecaster = Handle<isim_forecaster, isim_forecaster_free>;
using Sim = Handle<isim_sim, isim_sim_free>;

isim_kind kind_of(const std::string& tag) {
  if (tag == "ped" || tag == "pedestrian") return ISIM_PED;
  if (tag == "veh" || tag == "vehicle") return ISIM_VEH;
  std::fprintf(stderr, "isim: unknown kind '%s' (expected ped or veh)\n", tag.c_str());
  throw Failure{ISIM_E_INVALID_INPUT};
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    std::fprintf(stderr, "isim: cannot read '%s'\n", path.c_str());
    throw Failure{ISIM_E_IO};
  }
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void load_corpus(Corpus& c, const std::string& path, bool lenient) {
  char* skipped = nullptr;
  check(isim_corpus_load(path.c_str(), lenient ? 0 : 1, c.out(), &skipped), "loading " + path);
  const Json s = Json::parse(take(skipped));
  for (const auto& k : s)
    std::fprintf(stderr, "isim: skipped line %d: %s\n", k["line"].get<int>(), k["reason"].get<std::string>().c_str());
}

// Comma-separated pair "ped.json,veh.json"; either side may be empty.
std::pair<std::string, std::string> split_pair(const std::string& v) {
  const auto comma = v.find(',');
  if (comma == std::string::npos) return {v, ""};
  return {v.substr(0, comma), v.substr(comma + 1)};
}

struct SimInputs {
  std::string gmm, density, model, config;
  std::optional<std::uint64_t> seed;
  std::optional<double> start_hour;
  bool no_refine = false;
  bool poisson = false;

  void add(CLI::App* app) {
    app->add_option("--gmm", gmm, "ped.json,veh.json mixture models")->required();
    app->add_option("--density", density, "ped_tod.json,veh_tod.json time-of-day models");
    app->add_option("--model", model, "forecaster checkpoint");
    app->add_option("--config", config, "simulation config JSON");
    app->add_option("--seed", seed, "simulation seed");
    app->add_option("--start-hour", start_hour, "clock hour at t = 0");
    app->add_flag("--no-refine", no_refine, "agents follow their priors");
    app->add_flag("--poisson", poisson, "draw the population target");
  }

  void build(Sim& sim, Gmm (&g)[2], Density (&d)[2], Forecaster& f) const {
    const auto [gp, gv] = split_pair(gmm);
    if (!gp.empty()) check(isim_gmm_load(gp.c_str(), g[0].out()), "loading " + gp);
    if (!gv.empty()) check(isim_gmm_load(gv.c_str(), g[1].out()), "loading " + gv);
    const auto [dp, dv] = split_pair(density);
    if (!dp.empty()) check(isim_density_load(dp.c_str(), d[0].out()), "loading " + dp);
    if (!dv.empty()) check(isim_density_load(dv.c_str(), d[1].out()), "loading " + dv);
    if (!model.empty()) check(isim_forecaster_load(model.c_str(), f.out()), "loading " + model);
    Json cfg = config.empty() ? Json::object() : Json::parse(read_text(config));
    if (seed) cfg["seed"] = *seed;
    if (start_hour) cfg["start_hour"] = *start_hour;
    if (no_refine) cfg["refine"] = false;
    if (poisson) cfg["poisson_counts"] = true;
    check(isim_sim_new(cfg.dump().c_str(), g[0].get(), g[1].get(), d[0].get(), d[1].get(), f.get(), sim.out()),
          "creating the simulator");
  }
};

volatile int g_interrupted = 0;

void on_signal(int) { g_interrupted = 1; }

void on_ready(const char* host, int port, void*) {
  std::fprintf(stderr, "isim: serving on http://%s:%d\n", host, port);
}

void on_epoch(int epoch, double loss, void* user) {
  auto* csv = static_cast<std::ofstream*>(user);
  if (csv && *csv) *csv << epoch << ',' << loss << '\n';
  std::fprintf(stderr, "epoch %d loss %.6f\n", epoch, loss);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intersection trajectory simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", isim_version());

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic intersection corpus");
  std::string gen_config, gen_out, gen_counts, gen_labels;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--config", gen_config, "generator config JSON");
  gen->add_option("--out", gen_out, "corpus JSONL")->required();
  gen->add_option("--counts", gen_counts, "hourly counts CSV");
  gen->add_option("--labels", gen_labels, "route label CSV");
  gen->add_option("--seed", gen_seed, "override the config seed");

  // filter
  auto* filter = app.add_subcommand("filter", "drop trajectories truncated inside the region");
  std::string f_in, f_out, f_region;
  double f_half = 15.0, f_margin = 1.0;
  bool f_lenient = false;
  filter->add_option("--in", f_in, "corpus JSONL")->required();
  filter->add_option("--out", f_out, "filtered corpus JSONL")->required();
  filter->add_option("--half-width", f_half, "square region half-width");
  filter->add_option("--region", f_region, "convex polygon JSON [[x,y],...]");
  filter->add_option("--margin", f_margin, "boundary tolerance in metres");
  filter->add_flag("--lenient", f_lenient, "skip malformed lines");

  // extract-scenes
  auto* extract = app.add_subcommand("extract-scenes", "sample fixed-length scenes from a corpus");
  std::string x_in, x_out;
  int x_frames = 20;
  std::size_t x_count = 500;
  double x_dt = 0.4;
  std::uint64_t x_seed = 0;
  bool x_lenient = false;
  extract->add_option("--in", x_in, "corpus JSONL")->required();
  extract->add_option("--out", x_out, "scenes JSONL")->required();
  extract->add_option("--frames", x_frames, "frames per scene");
  extract->add_option("--count", x_count, "number of scenes");
  extract->add_option("--dt", x_dt, "scene frame interval in seconds");
  extract->add_option("--seed", x_seed, "window sampling seed");
  extract->add_flag("--lenient", x_lenient, "skip malformed lines");

  // fit-gmm
  auto* fitg = app.add_subcommand("fit-gmm", "fit a trajectory mixture model for one agent kind");
  std::string g_in, g_out, g_kind = "ped";
  int g_m = 12, g_k = 20;
  std::uint64_t g_seed = 0;
  bool g_lenient = false;
  fitg->add_option("--in", g_in, "corpus JSONL")->required();
  fitg->add_option("--out", g_out, "model JSON")->required();
  fitg->add_option("--kind", g_kind, "ped or veh");
  fitg->add_option("--components", g_m, "number of components");
  fitg->add_option("--waypoints", g_k, "waypoints per feature");
  fitg->add_option("--seed", g_seed, "initialisation seed");
  fitg->add_flag("--lenient", g_lenient, "skip malformed lines");

  // fit-tod
  auto* fitt = app.add_subcommand("fit-tod", "fit a time-of-day density to hourly counts");
  std::string t_counts, t_out, t_kind = "ped";
  int t_m = 0;
  double t_shift = 8.0;
  fitt->add_option("--counts", t_counts, "hourly counts CSV")->required();
  fitt->add_option("--out", t_out, "model JSON")->required();
  fitt->add_option("--kind", t_kind, "ped or veh");
  fitt->add_option("--components", t_m, "number of components (0: kind default)");
  fitt->add_option("--shift", t_shift, "axis shift in hours");

  // train
  auto* train = app.add_subcommand("train", "train a forecaster on scenes");
  std::string r_scenes, r_out, r_init, r_loss, r_mode = "wpts";
  int r_epochs = 20, r_obs = 8, r_pred = 12, r_hidden = 32, r_embed = 32, r_batch = 8;
  double r_lr = 1e-2, r_clip = 5.0, r_dt = 0.4;
  std::uint64_t r_seed = 0;
  train->add_option("--scenes", r_scenes, "scenes JSONL")->required();
  train->add_option("--out", r_out, "checkpoint JSON")->required();
  train->add_option("--init", r_init, "resume from a checkpoint");
  train->add_option("--mode", r_mode, "supervision: none, dest or wpts");
  train->add_option("--epochs", r_epochs, "training epochs");
  train->add_option("--obs-len", r_obs, "observed steps");
  train->add_option("--pred-len", r_pred, "predicted steps per chunk");
  train->add_option("--hidden", r_hidden, "recurrent state size");
  train->add_option("--embed", r_embed, "input embedding size");
  train->add_option("--batch", r_batch, "scenes per update");
  train->add_option("--lr", r_lr, "learning rate");
  train->add_option("--clip", r_clip, "gradient norm clip");
  train->add_option("--dt", r_dt, "step interval in seconds");
  train->add_option("--seed", r_seed, "initialisation and shuffle seed");
  train->add_option("--loss-csv", r_loss, "per-epoch loss CSV");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "ADE/FDE of forecasters and baselines on scenes");
  std::string e_scenes, e_csv, e_json;
  std::vector<std::string> e_models, e_baselines;
  int e_obs = 8, e_horizon = 32;
  double e_dt = 0.4;
  bool e_mean_l2 = false;
  eval->add_option("--scenes", e_scenes, "scenes JSONL")->required();
  eval->add_option("--model", e_models, "checkpoint JSON (repeatable)");
  eval->add_option("--baseline", e_baselines, "cv or prior (repeatable)");
  eval->add_option("--obs-len", e_obs, "observed frames");
  eval->add_option("--horizon", e_horizon, "predicted frames");
  eval->add_option("--dt", e_dt, "frame interval for baselines");
  eval->add_flag("--mean-l2", e_mean_l2, "mean Euclidean error instead of RMSE");
  eval->add_option("--csv", e_csv, "write the table as CSV");
  eval->add_option("--json", e_json, "write the full reports as JSON");

  // simulate
  auto* simulate = app.add_subcommand("simulate", "headless simulation run");
  SimInputs s_in;
  int s_ticks = 1000;
  std::string s_script, s_out;
  s_in.add(simulate);
  simulate->add_option("--ticks", s_ticks, "ticks to run");
  simulate->add_option("--script", s_script, "command script JSON");
  simulate->add_option("--out", s_out, "trace JSONL");

  // outliers
  auto* outl = app.add_subcommand("outliers", "rank trajectories by mixture log-likelihood z-score");
  std::string o_gmm, o_in, o_out;
  double o_threshold = 20.0;
  int o_top = 10, o_k = 0;
  bool o_lenient = false;
  outl->add_option("--gmm", o_gmm, "model JSON")->required();
  outl->add_option("--in", o_in, "corpus JSONL")->required();
  outl->add_option("--threshold", o_threshold, "minimum |z|");
  outl->add_option("--top", o_top, "entries to print (0: all)");
  outl->add_option("--waypoints", o_k, "waypoints per feature (0: from the model)");
  outl->add_option("--out", o_out, "write all outliers as JSON");
  outl->add_flag("--lenient", o_lenient, "skip malformed lines");

  // serve
  auto* srv = app.add_subcommand("serve", "live simulation with an HTTP control interface");
  SimInputs v_in;
  std::string v_bind = "127.0.0.1:8080", v_script, v_assets, v_trace;
  bool v_headless = false, v_exit = false;
  std::int64_t v_ticks = 0;
  v_in.add(srv);
  srv->add_option("--bind", v_bind, "host:port (port 0 picks a free one)");
  srv->add_flag("--headless", v_headless, "tick as fast as possible");
  srv->add_option("--script", v_script, "command script JSON");
  srv->add_option("--ticks", v_ticks, "stop ticking after this many (0: unbounded)");
  srv->add_option("--trace-out", v_trace, "trace JSONL written when ticking stops");
  srv->add_option("--assets", v_assets, "static UI directory");
  srv->add_flag("--exit-when-done", v_exit, "exit once the tick budget is spent");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      Json cfg = gen_config.empty() ? Json::object() : Json::parse(read_text(gen_config));
      if (gen_seed) cfg["seed"] = *gen_seed;
      Corpus c;
      check(isim_synth_generate(cfg.dump().c_str(), c.out()), "generating");
      check(isim_corpus_save(c.get(), gen_out.c_str()), "writing " + gen_out);
      if (!gen_counts.empty()) check(isim_synth_save_counts(c.get(), gen_counts.c_str()), "writing " + gen_counts);
      if (!gen_labels.empty()) check(isim_synth_save_labels(c.get(), gen_labels.c_str()), "writing " + gen_labels);
      std::size_t n = 0;
      isim_corpus_size(c.get(), &n);
      std::printf("%zu trajectories\n", n);
    } else if (*filter) {
      Corpus c, kept;
      load_corpus(c, f_in, f_lenient);
      const std::string poly = f_region.empty() ? "" : read_text(f_region);
      std::size_t dropped = 0;
      check(isim_filter_truncated(c.get(), f_half, poly.empty() ? nullptr : poly.c_str(), f_margin, kept.out(), &dropped),
            "filtering");
      check(isim_corpus_save(kept.get(), f_out.c_str()), "writing " + f_out);
      std::size_t n = 0;
      isim_corpus_size(kept.get(), &n);
      std::printf("kept %zu, dropped %zu\n", n, dropped);
    } else if (*extract) {
      Corpus c;
      Scenes s;
      load_corpus(c, x_in, x_lenient);
      check(isim_scenes_extract(c.get(), x_frames, x_count, x_dt, x_seed, s.out()), "extracting scenes");
      check(isim_scenes_save(s.get(), x_out.c_str()), "writing " + x_out);
      std::size_t n = 0;
      isim_scenes_size(s.get(), &n);
      std::printf("%zu scenes\n", n);
    } else if (*fitg) {
      Corpus c;
      Gmm g;
      load_corpus(c, g_in, g_lenient);
      char* report = nullptr;
      check(isim_gmm_fit(c.get(), kind_of(g_kind), g_m, g_k, g_seed, g.out(), &report), "fitting");
      check(isim_gmm_save(g.get(), g_out.c_str()), "writing " + g_out);
      std::printf("%s\n", take(report).c_str());
    } else if (*fitt) {
      double counts[24];
      Density d;
      const isim_kind k = kind_of(t_kind);
      check(isim_density_load_counts(t_counts.c_str(), k, counts), "reading " + t_counts);
      check(isim_density_fit(counts, k, t_m, t_shift, d.out()), "fitting");
      check(isim_density_save(d.get(), t_out.c_str()), "writing " + t_out);
      std::printf("hour expected\n");
      for (int h = 0; h < 24; ++h) {
        unsigned e = 0;
        isim_density_expected(d.get(), h, &e);
        std::printf("%4d %8u\n", h, e);
      }
    } else if (*train) {
      Scenes s;
      Forecaster f;
      check(isim_scenes_load(r_scenes.c_str(), s.out()), "loading " + r_scenes);
      if (!r_init.empty()) {
        check(isim_forecaster_load(r_init.c_str(), f.out()), "loading " + r_init);
      } else {
        const Json hp{{"embed", r_embed}, {"hidden", r_hidden}, {"obs_len", r_obs},
                      {"pred_len", r_pred}, {"dt", r_dt},       {"mode", r_mode}};
        check(isim_forecaster_new(hp.dump().c_str(), r_seed, f.out()), "creating the forecaster");
      }
      std::ofstream csv;
      if (!r_loss.empty()) {
        csv.open(r_loss);
        csv << "epoch,loss\n";
      }
      const Json opts{{"lr", r_lr}, {"batch", r_batch}, {"clip", r_clip}, {"seed", r_seed}};
      double loss = 0.0;
      check(isim_forecaster_train(f.get(), s.get(), opts.dump().c_str(), r_epochs, on_epoch,
                                  r_loss.empty() ? nullptr : &csv, &loss),
            "training");
      check(isim_forecaster_save(f.get(), r_out.c_str()), "writing " + r_out);
      std::printf("final loss %.6f\n", loss);
    } else if (*eval) {
      Scenes s;
      check(isim_scenes_load(e_scenes.c_str(), s.out()), "loading " + e_scenes);
      if (e_models.empty() && e_baselines.empty()) e_baselines = {"cv", "prior"};
      const Json opts{{"obs_len", e_obs}, {"horizon", e_horizon}, {"dt", e_dt}, {"mean_l2", e_mean_l2}};
      Json rows = Json::array(), reports = Json::array();
      for (const auto& b : e_baselines) {
        char* rep = nullptr;
        check(isim_evaluate(nullptr, b.c_str(), s.get(), opts.dump().c_str(), &rep), "evaluating " + b);
        Json r = Json::parse(take(rep));
        rows.push_back({{"model", b}, {"pred_len", e_horizon}, {"goal", "-"}, {"ade", r["ade"]}, {"fde", r["fde"]},
                        {"fps", r["fps"]}});
        r["model"] = b;
        reports.push_back(r);
      }
      for (const auto& path : e_models) {
        Forecaster f;
        check(isim_forecaster_load(path.c_str(), f.out()), "loading " + path);
        char* info = nullptr;
        check(isim_forecaster_info(f.get(), &info), "reading " + path);
        const Json hp = Json::parse(take(info));
        char* rep = nullptr;
        check(isim_evaluate(f.get(), "model", s.get(), opts.dump().c_str(), &rep), "evaluating " + path);
        Json r = Json::parse(take(rep));
        const std::string name = std::filesystem::path(path).stem().string();
        rows.push_back({{"model", name}, {"pred_len", hp["pred_len"]}, {"goal", hp["mode"]}, {"ade", r["ade"]},
                        {"fde", r["fde"]}, {"fps", r["fps"]}});
        r["model"] = name;
        r["hyper"] = hp;
        reports.push_back(r);
      }
      char* table = nullptr;
      check(isim_format_table(rows.dump().c_str(), 0, &table), "formatting");
      std::printf("%s", take(table).c_str());
      if (!e_csv.empty()) {
        check(isim_format_table(rows.dump().c_str(), 1, &table), "formatting");
        std::ofstream(e_csv) << take(table);
      }
      if (!e_json.empty()) std::ofstream(e_json) << reports.dump(2) << '\n';
    } else if (*simulate) {
      Sim sim;
      Gmm g[2];
      Density d[2];
      Forecaster f;
      s_in.build(sim, g, d, f);
      char* summary = nullptr;
      check(isim_sim_run(sim.get(), s_ticks, s_script.empty() ? nullptr : s_script.c_str(),
                         s_out.empty() ? nullptr : s_out.c_str(), &summary),
            "simulating");
      std::printf("%s\n", take(summary).c_str());
    } else if (*outl) {
      Gmm g;
      Corpus c;
      check(isim_gmm_load(o_gmm.c_str(), g.out()), "loading " + o_gmm);
      load_corpus(c, o_in, o_lenient);
      char* list = nullptr;
      check(isim_gmm_outliers(g.get(), c.get(), o_threshold, o_k, &list), "scoring");
      const Json all = Json::parse(take(list));
      if (!o_out.empty()) std::ofstream(o_out) << all.dump(2) << '\n';
      std::printf("%6s %10s %12s %14s\n", "rank", "agent_id", "zscore", "log_lik");
      for (std::size_t i = 0; i < all.size() && (o_top <= 0 || i < std::size_t(o_top)); ++i)
        std::printf("%6zu %10lld %12.3f %14.3f\n", i + 1, all[i]["agent_id"].get<long long>(),
                    all[i]["zscore"].get<double>(), all[i]["log_likelihood"].get<double>());
    } else if (*srv) {
      Sim sim;
      Gmm g[2];
      Density d[2];
      Forecaster f;
      v_in.build(sim, g, d, f);
      const auto colon = v_bind.rfind(':');
      Json opts{{"host", colon == std::string::npos ? v_bind : v_bind.substr(0, colon)},
                {"port", colon == std::string::npos ? 8080 : std::stoi(v_bind.substr(colon + 1))},
                {"headless", v_headless},
                {"ticks", v_ticks},
                {"script", v_script},
                {"trace_out", v_trace},
                {"assets", v_assets},
                {"exit_when_done", v_exit}};
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      check(isim_sim_serve(sim.get(), opts.dump().c_str(), &g_interrupted, on_ready, nullptr), "serving");
    }
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "isim: %s\n", e.what());
    return 1;
  }
  return 0;
}
