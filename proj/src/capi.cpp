#include "isim/isim.h"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <thread>

#include "isim/core.hpp"
#include "isim/density.hpp"
#include "isim/forecaster.hpp"
#include "isim/gmm.hpp"
#include "isim/ingest.hpp"
#include "isim/io.hpp"
#include "isim/metrics.hpp"
#include "isim/server.hpp"
#include "isim/sim.hpp"
#include "isim/wire.hpp"

struct isim_corpus {
  std::vector<isim::Trajectory> trajectories;
  std::vector<std::string> labels;  // synthetic only
  std::optional<std::array<std::array<double, 24>, 2>> hourly;
};

struct isim_scenes {
  std::vector<isim::Scene> scenes;
};

struct isim_gmm {
  std::shared_ptr<const isim::GmmModel> model;
};

struct isim_density {
  std::shared_ptr<const isim::TodDensityModel> model;
};

struct isim_forecaster {
  std::shared_ptr<isim::ForecastModel> model;
};

struct isim_sim {
  isim::SimConfig config;
  isim::SimModels models;
  std::unique_ptr<isim::Simulator> sim;
};

namespace {

using isim::Errc;
using isim::Error;
using isim::Json;

thread_local std::string g_last_error;

struct NullArgument {};

isim_status fail(isim_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

template <class F>
isim_status guard(F&& f) noexcept {
  try {
    f();
    g_last_error.clear();
    return ISIM_OK;
  } catch (const NullArgument&) {
    return fail(ISIM_E_NULL_ARGUMENT, "null argument");
  } catch (const Error& e) {
    return fail(static_cast<isim_status>(static_cast<int>(e.code())), e.what());
  } catch (const Json::exception& e) {
    return fail(ISIM_E_PARSE, std::string("ParseError: ") + e.what());
  } catch (const std::bad_alloc&) {
    return fail(ISIM_E_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(ISIM_E_INTERNAL, e.what());
  } catch (...) {
    return fail(ISIM_E_INTERNAL, "unknown exception");
  }
}

template <class... P>
void require(const P*... ptrs) {
  if (((ptrs == nullptr) || ...)) throw NullArgument{};
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void put_json(char** out, const Json& j) {
  if (out) *out = dup_string(j.dump());
}

Json parse_options(const char* text) {
  if (!text || !*text) return Json::object();
  Json j = Json::parse(text);
  if (!j.is_object()) throw Error(Errc::ParseError, "options must be a JSON object");
  return j;
}

isim::AgentKind to_kind(isim_kind k) {
  if (k != ISIM_PED && k != ISIM_VEH) throw Error(Errc::InvalidInput, "unknown agent kind");
  return k == ISIM_PED ? isim::AgentKind::Pedestrian : isim::AgentKind::Vehicle;
}

struct KindFeatures {
  std::vector<std::vector<double>> features;
  std::vector<std::int64_t> ids;
};

KindFeatures features_of(const isim_corpus& c, isim::AgentKind kind, int waypoints) {
  KindFeatures out;
  for (const auto& t : c.trajectories) {
    if (t.kind != kind) continue;
    out.features.push_back(isim::vectorize_trajectory(t, waypoints).flatten());
    out.ids.push_back(t.agent_id);
  }
  return out;
}

isim::ForecastHyper hyper_from_json(const Json& j) {
  isim::ForecastHyper hp;
  hp.embed = j.value("embed", hp.embed);
  hp.hidden = j.value("hidden", hp.hidden);
  hp.grid.cells = j.value("grid_cells", hp.grid.cells);
  hp.grid.cell_size = j.value("cell_size", hp.grid.cell_size);
  hp.obs_len = j.value("obs_len", hp.obs_len);
  hp.pred_len = j.value("pred_len", hp.pred_len);
  hp.dt = j.value("dt", hp.dt);
  if (j.contains("mode")) hp.mode = isim::parse_supervision(j["mode"].get<std::string>());
  return hp;
}

Json summarize(const isim::SimTrace& trace) {
  std::size_t spawned = 0, exited = 0, forced = 0;
  for (const auto& t : trace.ticks) {
    spawned += t.spawned.size() + t.cmd_spawned.size();
    for (const auto& r : t.removed) (r.status == isim::AgentStatus::Exited ? exited : forced) += 1;
  }
  Json j{{"ticks", trace.ticks.size()},
         {"spawned", spawned},
         {"exited", exited},
         {"force_removed", forced},
         {"refinement_calls", trace.refinement_calls},
         {"refinement_seconds", trace.refinement_seconds},
         {"wall_seconds", trace.wall_seconds},
         {"min_separation", nullptr}};
  try {
    const auto s = isim::min_separation(trace);
    j["min_separation"] = {{"distance", s.distance}, {"tick", s.tick}, {"first", s.first}, {"second", s.second}};
  } catch (const Error&) {
    // Fewer than two co-present agents: stays null.
  }
  return j;
}

}  // namespace

extern "C" {

const char* isim_version(void) { return "1.0.0"; }

const char* isim_last_error(void) { return g_last_error.c_str(); }

const char* isim_status_name(isim_status status) {
  switch (status) {
    case ISIM_OK: return "Ok";
    case ISIM_E_NULL_ARGUMENT: return "NullArgument";
    case ISIM_E_INTERNAL: return "Internal";
    default: break;
  }
  const int v = static_cast<int>(status);
  if (v > 0 && v <= static_cast<int>(Errc::BindError)) return isim::errc_name(static_cast<Errc>(v)).data();
  return "Unknown";
}

void isim_string_free(char* s) { std::free(s); }

/* Corpus */

isim_status isim_corpus_load(const char* path, int strict, isim_corpus** out, char** skipped_json) {
  return guard([&] {
    require(path, out);
    auto load = isim::load_corpus(path, strict != 0);
    auto c = std::make_unique<isim_corpus>();
    c->trajectories = std::move(load.trajectories);
    if (skipped_json) {
      Json s = Json::array();
      for (const auto& k : load.skipped) s.push_back({{"line", k.line}, {"reason", k.reason}});
      put_json(skipped_json, s);
    }
    *out = c.release();
  });
}

isim_status isim_corpus_save(const isim_corpus* c, const char* path) {
  return guard([&] {
    require(c, path);
    isim::save_corpus(path, c->trajectories);
  });
}

isim_status isim_corpus_size(const isim_corpus* c, size_t* out) {
  return guard([&] {
    require(c, out);
    *out = c->trajectories.size();
  });
}

void isim_corpus_free(isim_corpus* c) { delete c; }

isim_status isim_synth_generate(const char* config_json, isim_corpus** out) {
  return guard([&] {
    require(out);
    auto r = isim::synth_generate(isim::synth_config_from_json(parse_options(config_json)));
    auto c = std::make_unique<isim_corpus>();
    c->trajectories = std::move(r.corpus);
    c->labels = std::move(r.labels);
    c->hourly = r.hourly;
    *out = c.release();
  });
}

isim_status isim_synth_save_counts(const isim_corpus* c, const char* path) {
  return guard([&] {
    require(c, path);
    if (!c->hourly) throw Error(Errc::InvalidInput, "corpus has no synthetic hourly counts");
    isim::save_hourly_counts(path, *c->hourly);
  });
}

isim_status isim_synth_save_labels(const isim_corpus* c, const char* path) {
  return guard([&] {
    require(c, path);
    if (c->labels.size() != c->trajectories.size()) throw Error(Errc::InvalidInput, "corpus has no route labels");
    std::ofstream f(path);
    if (!f) throw Error(Errc::IoError, std::string("cannot write '") + path + "'");
    f << "agent_id,label\n";
    for (std::size_t i = 0; i < c->labels.size(); ++i) f << c->trajectories[i].agent_id << ',' << c->labels[i] << '\n';
    if (!f) throw Error(Errc::IoError, std::string("write failed for '") + path + "'");
  });
}

isim_status isim_filter_truncated(const isim_corpus* c, double half_width, const char* polygon_json, double margin,
                                  isim_corpus** out, size_t* dropped) {
  return guard([&] {
    require(c, out);
    isim::Region region;
    if (polygon_json) {
      for (const auto& v : Json::parse(polygon_json)) region.vertices.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
    } else {
      region = isim::Region::square(half_width);
    }
    region.validate();
    auto r = isim::filter_truncated(c->trajectories, region, margin);
    auto o = std::make_unique<isim_corpus>();
    if (c->labels.size() == c->trajectories.size()) {
      std::vector<bool> gone(c->trajectories.size(), false);
      for (auto i : r.dropped) gone[i] = true;
      for (std::size_t i = 0; i < gone.size(); ++i)
        if (!gone[i]) o->labels.push_back(c->labels[i]);
    }
    o->trajectories = std::move(r.kept);
    o->hourly = c->hourly;
    if (dropped) *dropped = r.dropped.size();
    *out = o.release();
  });
}

/* Scenes */

isim_status isim_scenes_extract(const isim_corpus* c, int frames, size_t count, double dt, uint64_t seed,
                                isim_scenes** out) {
  return guard([&] {
    require(c, out);
    auto s = std::make_unique<isim_scenes>();
    s->scenes = isim::extract_scenes(c->trajectories, frames, count, dt, seed);
    *out = s.release();
  });
}

isim_status isim_scenes_load(const char* path, isim_scenes** out) {
  return guard([&] {
    require(path, out);
    auto s = std::make_unique<isim_scenes>();
    s->scenes = isim::load_scenes(path);
    *out = s.release();
  });
}

isim_status isim_scenes_save(const isim_scenes* s, const char* path) {
  return guard([&] {
    require(s, path);
    isim::save_scenes(path, s->scenes);
  });
}

isim_status isim_scenes_size(const isim_scenes* s, size_t* out) {
  return guard([&] {
    require(s, out);
    *out = s->scenes.size();
  });
}

void isim_scenes_free(isim_scenes* s) { delete s; }

/* Mixture models */

isim_status isim_gmm_fit(const isim_corpus* c, isim_kind kind, int components, int waypoints, uint64_t seed,
                         isim_gmm** out, char** report_json) {
  return guard([&] {
    require(c, out);
    const auto k = to_kind(kind);
    const auto feats = features_of(*c, k, waypoints);
    isim::GmmFitReport report;
    auto g = std::make_unique<isim_gmm>();
    g->model = std::make_shared<const isim::GmmModel>(isim::fit_em(feats.features, k, components, seed, {}, &report));
    put_json(report_json, {{"iterations", report.iterations},
                           {"converged", report.converged},
                           {"collapse_restarts", report.collapse_restarts},
                           {"samples", feats.features.size()},
                           {"log_likelihood", report.log_likelihood.empty() ? 0.0 : report.log_likelihood.back()}});
    *out = g.release();
  });
}

isim_status isim_gmm_load(const char* path, isim_gmm** out) {
  return guard([&] {
    require(path, out);
    auto g = std::make_unique<isim_gmm>();
    g->model = std::make_shared<const isim::GmmModel>(isim::load_gmm(path));
    *out = g.release();
  });
}

isim_status isim_gmm_save(const isim_gmm* g, const char* path) {
  return guard([&] {
    require(g, path);
    isim::write_json_file(path, isim::to_json(*g->model));
  });
}

isim_status isim_gmm_info(const isim_gmm* g, int* components, int* dimension, isim_kind* kind) {
  return guard([&] {
    require(g);
    if (components) *components = g->model->components();
    if (dimension) *dimension = g->model->dimension();
    if (kind) *kind = g->model->kind() == isim::AgentKind::Pedestrian ? ISIM_PED : ISIM_VEH;
  });
}

isim_status isim_gmm_log_pdf(const isim_gmm* g, const double* z, size_t dimension, double* out) {
  return guard([&] {
    require(g, z, out);
    if (dimension != std::size_t(g->model->dimension())) throw Error(Errc::InvalidInput, "feature dimension mismatch");
    *out = isim::log_pdf(*g->model, std::span<const double>(z, dimension));
  });
}

isim_status isim_gmm_sample(const isim_gmm* g, const int* components, size_t ncomponents, size_t n, uint64_t seed,
                            double* z_out, int* component_out) {
  return guard([&] {
    require(g);
    if (ncomponents > 0) require(components);
    isim::Rng rng(seed);
    const auto draws = ncomponents == 0
                           ? isim::sample(*g->model, n, rng)
                           : isim::sample_conditional(*g->model, isim::ComponentSet(components, components + ncomponents),
                                                      n, rng);
    const std::size_t d = std::size_t(g->model->dimension());
    for (std::size_t i = 0; i < draws.size(); ++i) {
      if (z_out) std::copy(draws[i].z.begin(), draws[i].z.end(), z_out + i * d);
      if (component_out) component_out[i] = draws[i].component;
    }
  });
}

isim_status isim_gmm_outliers(const isim_gmm* g, const isim_corpus* c, double threshold, int waypoints,
                              char** json_out) {
  return guard([&] {
    require(g, c, json_out);
    if (waypoints <= 0) waypoints = static_cast<int>((g->model->dimension() - 9) / 2);
    const auto feats = features_of(*c, g->model->kind(), waypoints);
    Json list = Json::array();
    for (const auto& o : isim::zscore_outliers(*g->model, feats.features, threshold))
      list.push_back({{"agent_id", feats.ids[o.index]}, {"zscore", o.zscore}, {"log_likelihood", o.log_likelihood}});
    put_json(json_out, list);
  });
}

void isim_gmm_free(isim_gmm* g) { delete g; }

/* Time-of-day density */

isim_status isim_density_fit(const double counts[24], isim_kind kind, int components, double shift_hours,
                             isim_density** out) {
  return guard([&] {
    require(counts, out);
    const auto k = to_kind(kind);
    auto d = std::make_unique<isim_density>();
    d->model = std::make_shared<const isim::TodDensityModel>(isim::fit_tod(
        std::span<const double>(counts, 24), k, components > 0 ? components : isim::default_tod_components(k),
        shift_hours));
    *out = d.release();
  });
}

isim_status isim_density_load_counts(const char* csv_path, isim_kind kind, double counts_out[24]) {
  return guard([&] {
    require(csv_path, counts_out);
    const auto v = isim::load_hourly_counts(csv_path, to_kind(kind));
    std::copy(v.begin(), v.end(), counts_out);
  });
}

isim_status isim_density_load(const char* path, isim_density** out) {
  return guard([&] {
    require(path, out);
    auto d = std::make_unique<isim_density>();
    d->model = std::make_shared<const isim::TodDensityModel>(isim::load_density(path));
    *out = d.release();
  });
}

isim_status isim_density_save(const isim_density* d, const char* path) {
  return guard([&] {
    require(d, path);
    isim::write_json_file(path, isim::to_json(*d->model));
  });
}

isim_status isim_density_expected(const isim_density* d, double hour, unsigned* out) {
  return guard([&] {
    require(d, out);
    *out = isim::expected_count(*d->model, hour);
  });
}

void isim_density_free(isim_density* d) { delete d; }

/* Forecaster */

isim_status isim_forecaster_new(const char* hyper_json, uint64_t seed, isim_forecaster** out) {
  return guard([&] {
    require(out);
    auto f = std::make_unique<isim_forecaster>();
    f->model = std::make_shared<isim::ForecastModel>(
        isim::ForecastModel::initialize(hyper_from_json(parse_options(hyper_json)), seed));
    *out = f.release();
  });
}

isim_status isim_forecaster_load(const char* path, isim_forecaster** out) {
  return guard([&] {
    require(path, out);
    auto f = std::make_unique<isim_forecaster>();
    f->model = std::make_shared<isim::ForecastModel>(isim::load_forecaster(path));
    *out = f.release();
  });
}

isim_status isim_forecaster_save(const isim_forecaster* f, const char* path) {
  return guard([&] {
    require(f, path);
    isim::write_json_file(path, isim::to_json(*f->model));
  });
}

isim_status isim_forecaster_info(const isim_forecaster* f, char** hyper_json) {
  return guard([&] {
    require(f, hyper_json);
    const auto& hp = f->model->hyper();
    put_json(hyper_json, {{"embed", hp.embed},
                          {"hidden", hp.hidden},
                          {"grid_cells", hp.grid.cells},
                          {"cell_size", hp.grid.cell_size},
                          {"obs_len", hp.obs_len},
                          {"pred_len", hp.pred_len},
                          {"dt", hp.dt},
                          {"mode", std::string(isim::supervision_tag(hp.mode))},
                          {"parameters", isim::parameter_count(hp)}});
  });
}

void isim_forecaster_free(isim_forecaster* f) { delete f; }

isim_status isim_forecaster_train(isim_forecaster* f, const isim_scenes* s, const char* options_json, int epochs,
                                  isim_epoch_callback cb, void* user, double* final_loss) {
  return guard([&] {
    require(f, s);
    const Json j = parse_options(options_json);
    isim::TrainOptions opts;
    opts.lr = j.value("lr", opts.lr);
    opts.momentum = j.value("momentum", opts.momentum);
    opts.batch = j.value("batch", opts.batch);
    opts.clip = j.value("clip", opts.clip);
    opts.seed = j.value("seed", opts.seed);
    // Training mutates a copy so a failure leaves the handle untouched.
    auto model = std::make_shared<isim::ForecastModel>(*f->model);
    isim::fit_normalization(*model, s->scenes);
    const auto samples = isim::build_training_samples(*model, s->scenes);
    if (samples.empty()) throw Error(Errc::EmptyBatch, "no training samples in the scenes");
    isim::Trainer trainer(*model, opts);
    double loss = 0.0;
    for (int e = 0; e < epochs; ++e) {
      loss = trainer.epoch(samples);
      if (cb) cb(e + 1, loss, user);
    }
    if (final_loss) *final_loss = loss;
    f->model = std::move(model);
  });
}

isim_status isim_evaluate(const isim_forecaster* f, const char* predictor, const isim_scenes* s,
                          const char* options_json, char** report_json) {
  return guard([&] {
    require(predictor, s, report_json);
    const Json j = parse_options(options_json);
    isim::EvalOptions opts;
    opts.obs_len = j.value("obs_len", opts.obs_len);
    opts.horizon = j.value("horizon", opts.horizon);
    opts.dt = j.value("dt", opts.dt);
    opts.mean_l2 = j.value("mean_l2", opts.mean_l2);
    const std::string which = predictor;
    isim::Predictor p;
    if (which == "model") {
      require(f);
      p = isim::model_predictor(isim::ModelSet::single(*f->model));
    } else if (which == "cv") {
      p = isim::constant_velocity_predictor(opts.dt);
    } else if (which == "prior") {
      p = isim::prior_predictor(opts.dt);
    } else {
      throw Error(Errc::InvalidInput, "unknown predictor '" + which + "'");
    }
    const auto r = isim::evaluate(p, s->scenes, opts);
    double over = 0.0;
    std::size_t n = 0;
    for (const auto& a : r.agents)
      if (a.final_present) {
        over += a.overshoot;
        ++n;
      }
    put_json(report_json, {{"ade", r.ade},
                           {"fde", r.fde},
                           {"fps", r.fps()},
                           {"scenes", r.scenes},
                           {"agents", r.agents.size()},
                           {"horizon", r.horizon},
                           {"overshoot", n ? over / double(n) : 0.0}});
  });
}

isim_status isim_format_table(const char* rows_json, int csv, char** out) {
  return guard([&] {
    require(rows_json, out);
    const Json all = Json::parse(rows_json);
    if (!all.is_array()) throw Error(Errc::InvalidInput, "rows must be a JSON array");
    std::vector<isim::TableRow> rows;
    for (const auto& r : all)
      rows.push_back({r.at("model").get<std::string>(), r.value("pred_len", 0), r.value("goal", std::string("-")),
                      r.at("ade").get<double>(), r.at("fde").get<double>(), r.value("fps", 0.0)});
    *out = dup_string(csv ? isim::format_table_csv(rows) : isim::format_table(rows));
  });
}

/* Simulation */

isim_status isim_sim_new(const char* config_json, const isim_gmm* ped, const isim_gmm* veh,
                         const isim_density* ped_tod, const isim_density* veh_tod, const isim_forecaster* model,
                         isim_sim** out) {
  return guard([&] {
    require(out);
    auto s = std::make_unique<isim_sim>();
    const Json j = parse_options(config_json);
    isim::SimConfig base;
    if (model) {
      const auto& hp = model->model->hyper();
      base.dt = hp.dt;
      base.obs_len = hp.obs_len;
      base.pred_len = hp.pred_len;
    }
    s->config = isim::sim_config_from_json(j, base);
    if (ped) s->models.gmm[0] = ped->model;
    if (veh) s->models.gmm[1] = veh->model;
    if (ped_tod) s->models.density[0] = ped_tod->model;
    if (veh_tod) s->models.density[1] = veh_tod->model;
    if (model) s->models.shared = model->model;
    for (int k = 0; k < 2; ++k)
      if (s->models.gmm[k] && s->models.gmm[k]->kind() != (k == 0 ? isim::AgentKind::Pedestrian : isim::AgentKind::Vehicle))
        throw Error(Errc::ConfigMismatch, std::string("mixture for ") + (k == 0 ? "ped" : "veh") +
                                              " was fitted on the other kind");
    s->sim = std::make_unique<isim::Simulator>(s->config, s->models);
    *out = s.release();
  });
}

isim_status isim_sim_step(isim_sim* sim, char** tick_json) {
  return guard([&] {
    require(sim);
    const auto r = sim->sim->step();
    put_json(tick_json, isim::to_json(r));
  });
}

isim_status isim_sim_apply(isim_sim* sim, const char* command_json, char** result_json) {
  return guard([&] {
    require(sim, command_json);
    const auto d = isim::decode_command(command_json);
    if (!d.command) {
      const auto code = d.error.value("code", std::string());
      throw Error(code == "unsupported" ? Errc::Unsupported : Errc::ParseError, d.error.value("detail", std::string()));
    }
    put_json(result_json, isim::to_json(sim->sim->apply(*d.command)));
  });
}

isim_status isim_sim_snapshot(const isim_sim* sim, char** snapshot_json) {
  return guard([&] {
    require(sim, snapshot_json);
    put_json(snapshot_json, isim::encode_snapshot(*sim->sim));
  });
}

isim_status isim_sim_save_trace(const isim_sim* sim, const char* path) {
  return guard([&] {
    require(sim, path);
    isim::save_trace(path, sim->sim->trace());
  });
}

isim_status isim_sim_run(const isim_sim* sim, int ticks, const char* script_path, const char* trace_path,
                         char** summary_json) {
  return guard([&] {
    require(sim);
    if (ticks < 0) throw Error(Errc::InvalidInput, "tick count must be non-negative");
    std::vector<isim::Command> script;
    if (script_path) script = isim::load_script(script_path);
    const auto trace = isim::run(sim->config, sim->models, ticks, script);
    if (trace_path) isim::save_trace(trace_path, trace);
    put_json(summary_json, summarize(trace));
  });
}

isim_status isim_sim_serve(const isim_sim* sim, const char* options_json, const volatile int* interrupted,
                           isim_ready_callback ready, void* user) {
  return guard([&] {
    require(sim);
    const Json j = parse_options(options_json);
    isim::ServeOptions o;
    o.host = j.value("host", o.host);
    o.port = j.value("port", o.port);
    o.assets_dir = j.value("assets", o.assets_dir);
    o.headless = j.value("headless", o.headless);
    o.ticks = j.value("ticks", o.ticks);
    if (j.contains("script") && !j["script"].get<std::string>().empty()) o.script = isim::load_script(j["script"]);
    o.trace_out = j.value("trace_out", o.trace_out);
    o.exit_when_done = j.value("exit_when_done", o.exit_when_done);
    o.extent = j.value("extent", o.extent);

    isim::ControlServer server(sim->config, sim->models, o);
    server.start();
    if (ready) ready(o.host.c_str(), server.port(), user);
    std::atomic<bool> flag{false}, done{false};
    std::thread watcher;
    if (interrupted)
      watcher = std::thread([&] {
        while (!done) {
          if (*interrupted) {
            flag = true;
            return;
          }
          std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
      });
    server.wait(&flag);
    done = true;
    if (watcher.joinable()) watcher.join();
  });
}

void isim_sim_free(isim_sim* sim) { delete sim; }

}  // extern "C"
