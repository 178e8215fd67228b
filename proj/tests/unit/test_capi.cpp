#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "isim/isim.h"

using Json = nlohmann::json;

namespace {

// Takes ownership of a string returned by the library.
Json take(char* s) {
  REQUIRE(s);
  Json j = Json::parse(s);
  isim_string_free(s);
  return j;
}

struct Models {
  isim_corpus* corpus = nullptr;
  isim_gmm* ped = nullptr;
  isim_gmm* veh = nullptr;
  isim_density* ped_tod = nullptr;
  isim_density* veh_tod = nullptr;

  Models() {
    REQUIRE(isim_synth_generate(R"({"seed":3,"ped_per_route":15,"veh_per_route":12})", &corpus) == ISIM_OK);
    REQUIRE(isim_gmm_fit(corpus, ISIM_PED, 4, 1, 1, &ped, nullptr) == ISIM_OK);
    REQUIRE(isim_gmm_fit(corpus, ISIM_VEH, 6, 1, 1, &veh, nullptr) == ISIM_OK);
    double flat[24];
    for (double& c : flat) c = 40.0;
    REQUIRE(isim_density_fit(flat, ISIM_PED, 1, 0.0, &ped_tod) == ISIM_OK);
    REQUIRE(isim_density_fit(flat, ISIM_VEH, 1, 0.0, &veh_tod) == ISIM_OK);
  }
  ~Models() {
    isim_density_free(veh_tod);
    isim_density_free(ped_tod);
    isim_gmm_free(veh);
    isim_gmm_free(ped);
    isim_corpus_free(corpus);
  }
};

}  // namespace

TEST_CASE("status names and errors") {
  CHECK(std::string(isim_version()).size() > 0);
  CHECK(std::string(isim_status_name(ISIM_OK)) == "Ok");
  CHECK(std::string(isim_status_name(ISIM_E_BIND)) == "BindError");
  isim_corpus* c = nullptr;
  CHECK(isim_corpus_load("does/not/exist.jsonl", 0, &c, nullptr) == ISIM_E_IO);
  CHECK(c == nullptr);
  CHECK(std::string(isim_last_error()).find("does/not/exist.jsonl") != std::string::npos);
  CHECK(isim_corpus_size(nullptr, nullptr) == ISIM_E_NULL_ARGUMENT);
  CHECK(isim_synth_generate("{not json", &c) == ISIM_E_PARSE);
  isim_corpus_free(nullptr);
  isim_gmm_free(nullptr);
  isim_sim_free(nullptr);
}

TEST_CASE("corpus, scenes and mixture through handles") {
  Models m;
  size_t n = 0;
  REQUIRE(isim_corpus_size(m.corpus, &n) == ISIM_OK);
  CHECK(n == 8 * 15 + 12 * 12);

  REQUIRE(isim_corpus_save(m.corpus, "capi_corpus.jsonl") == ISIM_OK);
  isim_corpus* back = nullptr;
  char* skipped = nullptr;
  REQUIRE(isim_corpus_load("capi_corpus.jsonl", 1, &back, &skipped) == ISIM_OK);
  CHECK(take(skipped).empty());
  size_t n2 = 0;
  isim_corpus_size(back, &n2);
  CHECK(n2 == n);

  isim_corpus* kept = nullptr;
  size_t dropped = 99;
  REQUIRE(isim_filter_truncated(back, 15.0, nullptr, 1.0, &kept, &dropped) == ISIM_OK);
  CHECK(dropped == 0);
  isim_corpus_free(kept);
  isim_corpus_free(back);

  int comps = 0, dim = 0;
  isim_kind kind = ISIM_PED;
  REQUIRE(isim_gmm_info(m.veh, &comps, &dim, &kind) == ISIM_OK);
  CHECK(comps == 6);
  CHECK(kind == ISIM_VEH);
  REQUIRE(dim > 0);

  std::vector<double> z(std::size_t(3 * dim));
  int drawn[3];
  const int only[] = {2};
  REQUIRE(isim_gmm_sample(m.veh, only, 1, 3, 9, z.data(), drawn) == ISIM_OK);
  for (int k : drawn) CHECK(k == 2);
  double lp = 0.0;
  REQUIRE(isim_gmm_log_pdf(m.veh, z.data(), std::size_t(dim), &lp) == ISIM_OK);
  CHECK(std::isfinite(lp));
  CHECK(isim_gmm_log_pdf(m.veh, z.data(), std::size_t(dim) - 1, &lp) == ISIM_E_INVALID_INPUT);
  const int bad[] = {6};
  CHECK(isim_gmm_sample(m.veh, bad, 1, 1, 9, z.data(), drawn) == ISIM_E_INVALID_CONDITION);

  REQUIRE(isim_gmm_save(m.veh, "capi_veh.json") == ISIM_OK);
  isim_gmm* loaded = nullptr;
  REQUIRE(isim_gmm_load("capi_veh.json", &loaded) == ISIM_OK);
  double lp2 = 0.0;
  isim_gmm_log_pdf(loaded, z.data(), std::size_t(dim), &lp2);
  CHECK(lp2 == lp);
  isim_gmm_free(loaded);

  char* outliers = nullptr;
  REQUIRE(isim_gmm_outliers(m.ped, m.corpus, 0.0, 1, &outliers) == ISIM_OK);
  const Json o = take(outliers);
  REQUIRE(o.size() == 8 * 15);
  for (std::size_t i = 1; i < o.size(); ++i)
    CHECK(std::abs(o[i - 1]["zscore"].get<double>()) >= std::abs(o[i]["zscore"].get<double>()));

  isim_scenes* scenes = nullptr;
  REQUIRE(isim_scenes_extract(m.corpus, 20, 12, 0.4, 5, &scenes) == ISIM_OK);
  size_t ns = 0;
  isim_scenes_size(scenes, &ns);
  CHECK(ns == 12);
  char* report = nullptr;
  REQUIRE(isim_evaluate(nullptr, "cv", scenes, R"({"obs_len":8,"horizon":12})", &report) == ISIM_OK);
  const Json r = take(report);
  CHECK(r["horizon"] == 12);
  CHECK(r["ade"].get<double>() >= 0.0);
  CHECK(isim_evaluate(nullptr, "model", scenes, nullptr, &report) == ISIM_E_NULL_ARGUMENT);
  CHECK(isim_evaluate(nullptr, "oracle", scenes, nullptr, &report) == ISIM_E_INVALID_INPUT);
  isim_scenes_free(scenes);
}

TEST_CASE("density handle") {
  double counts[24];
  for (int h = 0; h < 24; ++h) counts[h] = h == 9 ? 100.0 : 0.0;
  isim_density* d = nullptr;
  REQUIRE(isim_density_fit(counts, ISIM_VEH, 1, 0.0, &d) == ISIM_OK);
  unsigned v = 0;
  REQUIRE(isim_density_expected(d, 9.0, &v) == ISIM_OK);
  CHECK(v >= 90);
  CHECK(v <= 110);
  isim_density_free(d);
  for (double& c : counts) c = 0.0;
  CHECK(isim_density_fit(counts, ISIM_VEH, 1, 0.0, &d) != ISIM_OK);
}

TEST_CASE("forecaster training callback") {
  Models m;
  isim_scenes* scenes = nullptr;
  REQUIRE(isim_scenes_extract(m.corpus, 20, 4, 0.4, 2, &scenes) == ISIM_OK);
  isim_forecaster* f = nullptr;
  REQUIRE(isim_forecaster_new(R"({"embed":8,"hidden":12,"obs_len":8,"pred_len":12})", 4, &f) == ISIM_OK);
  char* info = nullptr;
  REQUIRE(isim_forecaster_info(f, &info) == ISIM_OK);
  const Json hp = take(info);
  CHECK(hp["hidden"] == 12);
  CHECK(hp["parameters"].get<int>() > 0);

  std::vector<double> losses;
  auto cb = [](int, double loss, void* user) { static_cast<std::vector<double>*>(user)->push_back(loss); };
  double final_loss = -1.0;
  REQUIRE(isim_forecaster_train(f, scenes, R"({"lr":0.01})", 3, cb, &losses, &final_loss) == ISIM_OK);
  REQUIRE(losses.size() == 3);
  CHECK(final_loss == losses.back());

  REQUIRE(isim_forecaster_save(f, "capi_model.json") == ISIM_OK);
  isim_forecaster* g = nullptr;
  REQUIRE(isim_forecaster_load("capi_model.json", &g) == ISIM_OK);
  char *ra = nullptr, *rb = nullptr;
  REQUIRE(isim_evaluate(f, "model", scenes, R"({"obs_len":8,"horizon":12})", &ra) == ISIM_OK);
  REQUIRE(isim_evaluate(g, "model", scenes, R"({"obs_len":8,"horizon":12})", &rb) == ISIM_OK);
  CHECK(take(ra)["ade"] == take(rb)["ade"]);
  isim_forecaster_free(g);
  isim_forecaster_free(f);
  isim_scenes_free(scenes);
}

TEST_CASE("simulation handle") {
  Models m;
  isim_sim* sim = nullptr;
  REQUIRE(isim_sim_new(R"({"seed":2,"refine":false})", m.ped, m.veh, m.ped_tod, m.veh_tod, nullptr, &sim) ==
          ISIM_OK);
  char* out = nullptr;
  REQUIRE(isim_sim_step(sim, &out) == ISIM_OK);
  CHECK(take(out)["tick"] == 1);

  REQUIRE(isim_sim_apply(sim, R"({"type":"spawn","kind":"veh","count":2,"components":[1]})", &out) == ISIM_OK);
  CHECK(take(out)["status"] == "ok");
  REQUIRE(isim_sim_apply(sim, R"({"type":"set_speed","multiplier":-1})", &out) == ISIM_OK);
  CHECK(take(out)["code"] == "InvalidSpeed");
  CHECK(isim_sim_apply(sim, R"({"type":"teleport"})", &out) == ISIM_E_UNSUPPORTED);
  CHECK(isim_sim_apply(sim, "{", &out) == ISIM_E_PARSE);

  REQUIRE(isim_sim_step(sim, &out) == ISIM_OK);
  const Json tick = take(out);
  CHECK(tick["cmd_spawned"].size() == 2);
  REQUIRE(isim_sim_snapshot(sim, &out) == ISIM_OK);
  const Json snap = take(out);
  CHECK(snap["type"] == "snapshot");
  CHECK(snap["tick"] == 2);
  REQUIRE(isim_sim_save_trace(sim, "capi_trace.jsonl") == ISIM_OK);

  char* summary = nullptr;
  REQUIRE(isim_sim_run(sim, 25, nullptr, "capi_run.jsonl", &summary) == ISIM_OK);
  const Json s = take(summary);
  CHECK(s["ticks"] == 25);
  CHECK(s["spawned"].get<int>() > 0);
  CHECK(isim_sim_run(sim, -1, nullptr, nullptr, &summary) == ISIM_E_INVALID_INPUT);
  isim_sim_free(sim);

  CHECK(isim_sim_new(R"({"speed":0})", m.ped, m.veh, nullptr, nullptr, nullptr, &sim) != ISIM_OK);
  CHECK(isim_sim_new("{}", m.veh, m.ped, nullptr, nullptr, nullptr, &sim) == ISIM_E_CONFIG_MISMATCH);
}

TEST_CASE("table formatting") {
  char* out = nullptr;
  REQUIRE(isim_format_table(R"([{"model":"cv","pred_len":0,"goal":"-","ade":1.5,"fde":2.5,"fps":100}])", 1, &out) ==
          ISIM_OK);
  const std::string csv = out;
  isim_string_free(out);
  CHECK(csv.rfind("Model,L_pd,Goal,ADE,FDE,FPS\n", 0) == 0);
  CHECK(isim_format_table("{}", 0, &out) != ISIM_OK);
}
