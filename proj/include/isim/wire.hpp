#pragma once

// Control-protocol messages. Every message is a JSON object tagged by "type".

#include <optional>
#include <string>
#include <string_view>

#include "isim/io.hpp"
#include "isim/sim.hpp"

namespace isim {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::size_t kTailLength = 8;

// Positions are rounded to the nearest millimetre on the wire.
double round_mm(double v);

// `extent` is the half-width of the drawable area in metres.
Json encode_hello(const Simulator& sim, double extent = 15.0);
Json encode_snapshot(const Simulator& sim);
Json encode_ack(std::int64_t command_id, const CommandResult& result);
Json encode_error(std::string_view code, std::string_view detail);
Json encode_metrics(double fps, const std::array<std::size_t, 2>& active);

struct DecodedCommand {
  std::optional<Command> command;
  Json error;  // Error message when command is empty
};

// Never throws; malformed input yields an Error message with code
// "parse_error", unknown types "unsupported".
DecodedCommand decode_command(std::string_view bytes);

}  // namespace isim
