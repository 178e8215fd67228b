#pragma once

// JSON files: mixture and density models, forecaster checkpoints, command
// scripts and simulation traces.

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "isim/density.hpp"
#include "isim/forecaster.hpp"
#include "isim/gmm.hpp"
#include "isim/ingest.hpp"
#include "isim/sim.hpp"

namespace isim {

inline constexpr int kSchemaVersion = 1;

using Json = nlohmann::json;

Json to_json(const GmmModel& m);
GmmModel gmm_from_json(const Json& j);

Json to_json(const TodDensityModel& m);
TodDensityModel density_from_json(const Json& j);

Json to_json(const ForecastModel& m);
ForecastModel forecaster_from_json(const Json& j);

Json to_json(const SimConfig& c);
SimConfig sim_config_from_json(const Json& j, SimConfig base = {});

// Missing fields keep the defaults.
SynthConfig synth_config_from_json(const Json& j);

// Command bodies as {"type": ..., fields...}; unknown types throw Unsupported.
Json to_json(const Command& c);
Command command_from_json(const Json& j);

Json to_json(const CommandResult& r);

Json to_json(const TickRecord& r);
Json to_json(const CommandRecord& r);

// Header line {"config": ...}, then tick and command records in the order
// they happened.
void write_trace(std::ostream& out, const SimTrace& trace);
void save_trace(const std::string& path, const SimTrace& trace);

Json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const Json& j);

GmmModel load_gmm(const std::string& path);
TodDensityModel load_density(const std::string& path);
ForecastModel load_forecaster(const std::string& path);
// A JSON array of commands, each with "at_tick".
std::vector<Command> load_script(const std::string& path);

}  // namespace isim
