#include <signal.h>
#include <unistd.h>

#include <atomic>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "im/config.hpp"
#include "im/metrics.hpp"
#include "im/process_backend.hpp"
#include "im/sim.hpp"
#include "im/trace.hpp"

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_out(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path);
}

int cmd_sim_run(const std::string& config_path, const std::string& scenario_path,
                std::uint64_t seed, const std::string& trace_path,
                const std::string& horizon_str) {
  im::Config config = im::parse_config(slurp(config_path));
  im::Scenario scenario = im::parse_scenario(slurp(scenario_path));
  std::optional<im::TimeUs> horizon;
  if (!horizon_str.empty()) horizon = im::parse_duration(horizon_str);
  write_out(trace_path, im::run_scenario(config, scenario, seed, horizon));
  return 0;
}

int cmd_sim_diff(const std::string& golden_path, const std::string& trace_path) {
  std::string a = slurp(golden_path), b = slurp(trace_path);
  if (a == b) return 0;
  std::istringstream ia(a), ib(b);
  std::string la, lb;
  int line = 0;
  for (;;) {
    ++line;
    bool ga = static_cast<bool>(std::getline(ia, la));
    bool gb = static_cast<bool>(std::getline(ib, lb));
    if (!ga && !gb) break;  // differ only in trailing bytes
    if (!ga || !gb || la != lb) {
      std::cout << "traces diverge at line " << line << "\n";
      std::cout << "  golden: " << (ga ? la : std::string("<end of trace>")) << "\n";
      std::cout << "  trace:  " << (gb ? lb : std::string("<end of trace>")) << "\n";
      return 1;
    }
  }
  std::cout << "traces diverge in trailing bytes\n";
  return 1;
}

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }

int cmd_proc_up(const std::string& config_path, const std::string& trace_path,
                const std::string& portmap_path) {
  im::Config config = im::parse_config(slurp(config_path));
  im::TraceSink sink;
  std::ofstream trace_out;
  if (!trace_path.empty() && trace_path != "-") {
    trace_out.open(trace_path, std::ios::binary);
    if (!trace_out) throw std::runtime_error("cannot write " + trace_path);
    sink.stream_to(&trace_out);
  } else {
    sink.stream_to(&std::cout);
  }

  im::ProcessRuntime runtime(std::move(config), sink, portmap_path);
  if (!runtime.start()) return 1;
  std::cerr << "gateway up; port map written to " << runtime.portmap_path() << "\n";

  signal(SIGINT, on_signal);
  signal(SIGTERM, on_signal);
  while (!g_stop) usleep(50000);
  runtime.shutdown();
  return 0;
}

int cmd_metrics(const std::string& trace_path) {
  auto trace = im::parse_trace(slurp(trace_path));
  std::cout << im::format_metrics(im::compute_metrics(trace));
  return 0;
}

int cmd_inspect(const std::string& trace_path, const std::string& host) {
  auto trace = im::parse_trace(slurp(trace_path));
  std::string last_state = "unallocated";
  int shown = 0;
  for (const auto& r : trace) {
    if (r.host != host) continue;
    std::cout << im::serialize(r);
    ++shown;
    if (r.kind == "state")
      for (const auto& [k, v] : r.details)
        if (k == "to") last_state = v;
  }
  std::cout << "records " << shown << "\n";
  std::cout << "final_state " << last_state << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"imaginary-machines orchestration tool"};
  app.require_subcommand(1);

  std::string config_path, scenario_path, trace_path, golden_path, horizon_str, host;
  std::string portmap_path = "im_portmap.txt";
  std::uint64_t seed = 0;

  auto* sim = app.add_subcommand("sim", "deterministic simulation backend");
  sim->require_subcommand(1);
  auto* sim_run = sim->add_subcommand("run", "run a scenario and emit the trace");
  sim_run->add_option("--config", config_path)->required();
  sim_run->add_option("--scenario", scenario_path)->required();
  sim_run->add_option("--seed", seed);
  sim_run->add_option("--trace", trace_path)->description("output path; '-' for stdout");
  sim_run->add_option("--horizon", horizon_str)->description("cut the run at this virtual time");
  auto* sim_diff = sim->add_subcommand("diff", "byte-compare two traces");
  sim_diff->add_option("--golden", golden_path)->required();
  sim_diff->add_option("--trace", trace_path)->required();

  auto* proc = app.add_subcommand("proc", "local-process backend");
  auto* proc_up = proc->add_subcommand("up", "serve until SIGINT/SIGTERM");
  proc_up->add_option("--config", config_path)->required();
  proc_up->add_option("--trace", trace_path);
  proc_up->add_option("--portmap", portmap_path);

  auto* metrics = app.add_subcommand("metrics", "derive metrics from a trace");
  metrics->add_option("--trace", trace_path)->required();

  auto* inspect = app.add_subcommand("inspect", "per-host trace view");
  inspect->add_option("--trace", trace_path)->required();
  inspect->add_option("--host", host)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim_run->parsed()) return cmd_sim_run(config_path, scenario_path, seed, trace_path, horizon_str);
    if (sim_diff->parsed()) return cmd_sim_diff(golden_path, trace_path);
    if (proc_up->parsed()) return cmd_proc_up(config_path, trace_path, portmap_path);
    if (metrics->parsed()) return cmd_metrics(trace_path);
    if (inspect->parsed()) return cmd_inspect(trace_path, host);
  } catch (const im::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const im::ScenarioError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
