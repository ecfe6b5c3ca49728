#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "im/config.hpp"
#include "im/trace.hpp"

namespace im {

// Minimal scripted application behavior: enough to express chain startup,
// scale-to-zero, keep-warm timer activity and fault recovery scenarios.
struct ScriptProgram {
  enum class Prim {
    Connect,      // connect <hostname>; blocks until connected/failed
    Send,         // send <n>; on the connection opened by this task's last connect
    Reply,        // reply <n>; on the connection that triggered this handler
    Close,        // close; the connection opened by this task's last connect
    ClosePeer,    // close_peer; the triggering connection
    Sleep,        // sleep <duration>
    SetTimer,     // set_timer <period>; periodic on_timer activations
    Exit,         // exit; process exits cleanly
    DeclareIdle,  // declare_idle; must be the task's last runnable instruction
  };
  struct Instr {
    Prim prim;
    std::string arg;
    DurationUs dur = 0;
    std::uint64_t n = 0;
  };
  std::vector<Instr> on_start, on_connection, on_data, on_timer;
};

struct Stimulus {
  enum class Kind { Connect, Fault };
  TimeUs at = 0;
  Kind kind = Kind::Connect;
  std::string host;
  // Connect only: how long the external client holds the connection open
  // after establishment, and an optional payload sent on establishment.
  std::optional<DurationUs> hold = 0;  // nullopt = hold forever
  std::uint64_t send = 0;
};

struct Scenario {
  std::map<std::string, ScriptProgram> scripts;  // keyed by function type
  std::vector<Stimulus> stimuli;
};

struct ScenarioError : std::runtime_error {
  int line;
  ScenarioError(int line_, const std::string& msg)
      : std::runtime_error("scenario:" + std::to_string(line_) + ": " + msg), line(line_) {}
};

Scenario parse_scenario(std::string_view text);

// Deterministic discrete-event simulation of the FaaS platform, network and
// scripted workloads. Identical (config, scenario, seed, horizon) inputs
// produce a bit-identical trace.
std::string run_scenario(const Config& config, const Scenario& scenario, std::uint64_t seed,
                         std::optional<TimeUs> horizon = std::nullopt);

}  // namespace im
