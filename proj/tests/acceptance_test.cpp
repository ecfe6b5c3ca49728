// End-to-end acceptance suite. Each criterion prints exactly one PASS/FAIL
// line; the process exits nonzero if any criterion fails.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "im/config.hpp"
#include "im/lifecycle.hpp"
#include "im/metrics.hpp"
#include "im/process_backend.hpp"
#include "im/sim.hpp"
#include "metrics_oracle.hpp"
#include "model_check.hpp"

using namespace im;

namespace {

int g_failures = 0;

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& what) {
  if (!cond) throw CheckFailed(what);
}

void criterion(const std::string& name, const std::function<std::string()>& fn) {
  try {
    std::string note = fn();
    std::cout << "PASS " << name;
    if (!note.empty()) std::cout << " (" << note << ")";
    std::cout << "\n" << std::flush;
  } catch (const std::exception& e) {
    ++g_failures;
    std::cout << "FAIL " << name << ": " << e.what() << "\n" << std::flush;
  }
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string data(const std::string& name) { return std::string(TEST_DATA_DIR) + "/" + name; }
std::string golden(const std::string& name) { return std::string(GOLDEN_DIR) + "/" + name; }

Config chain_config() { return parse_config(slurp(data("chain.conf"))); }

std::string first_divergence(const std::string& a, const std::string& b) {
  std::istringstream sa(a), sb(b);
  std::string la, lb;
  int n = 0;
  while (true) {
    bool ga = static_cast<bool>(std::getline(sa, la));
    bool gb = static_cast<bool>(std::getline(sb, lb));
    ++n;
    if (!ga && !gb) return "";
    if (ga != gb || la != lb) {
      return "line " + std::to_string(n) + ":\n  expected: " + (gb ? lb : "<eof>") +
             "\n  actual:   " + (ga ? la : "<eof>");
    }
  }
}

// --- criterion bodies -------------------------------------------------------

std::string check_admission_table() {
  struct Row {
    HostState state;
    bool resolvable;
    AdmissionDecision want;
  };
  const Row rows[] = {
      {HostState::Running, true, AdmissionDecision::Proceed},
      {HostState::Running, false, AdmissionDecision::Proceed},
      {HostState::Sleeping, true, AdmissionDecision::ResumeThenProceed},
      {HostState::Sleeping, false, AdmissionDecision::ResumeThenProceed},
      {HostState::Resuming, true, AdmissionDecision::ResumeThenProceed},
      {HostState::Resuming, false, AdmissionDecision::ResumeThenProceed},
      {HostState::Unallocated, true, AdmissionDecision::InstantiateThenProceed},
      {HostState::Unallocated, false, AdmissionDecision::Fail},
      {HostState::Starting, true, AdmissionDecision::InstantiateThenProceed},
      {HostState::Starting, false, AdmissionDecision::Fail},
      {HostState::Stopped, true, AdmissionDecision::Fail},
      {HostState::Stopped, false, AdmissionDecision::Fail},
      {HostState::Terminated, true, AdmissionDecision::Fail},
      {HostState::Terminated, false, AdmissionDecision::Fail},
      {HostState::Failed, true, AdmissionDecision::Fail},
      {HostState::Failed, false, AdmissionDecision::Fail},
  };
  for (const Row& row : rows) {
    AdmissionDecision got = admit_connection(row.state, row.resolvable);
    require(got == row.want,
            std::string("state ") + std::string(host_state_name(row.state)) +
                (row.resolvable ? " (resolvable)" : " (unresolvable)") + ": got " +
                std::string(admission_decision_name(got)) + ", want " +
                std::string(admission_decision_name(row.want)));
  }
  return "16 table entries";
}

std::string check_cold_start_timing() {
  Config cfg = chain_config();
  auto recs = parse_trace(run_scenario(cfg, parse_scenario(slurp(data("chain.scn"))), 1));
  TimeUs connect_t = -1, admit_t = -1, connected_t = -1;
  for (const auto& r : recs) {
    if (r.host == "web-1" && r.kind == "connect" && connect_t < 0) connect_t = r.time_us;
    if (r.host == "web-1" && r.kind == "admit" && admit_t < 0) admit_t = r.time_us;
    if (r.channel == Channel::AppVisible && r.kind == "connected" && connected_t < 0)
      connected_t = r.time_us;
  }
  require(connect_t == 100000, "connect request not at t=100ms");
  require(admit_t == connect_t + cfg.timing.cold_start_latency,
          "admission not exactly one cold-start latency after the request (got t=" +
              std::to_string(admit_t) + "us)");
  require(connected_t == admit_t + cfg.network.rtt,
          "client-visible connected not exactly one rtt after admission");
  return "admit at +200ms, client connected at +201ms";
}

std::string check_golden(const std::string& scn_name, const std::string& golden_name) {
  std::string want = slurp(golden(golden_name));
  std::string got = run_scenario(chain_config(), parse_scenario(slurp(data(scn_name))), 1);
  std::string diff = first_divergence(got, want);
  require(diff.empty(), "trace diverges from " + golden_name + " at " + diff);

  // structural sanity on top of the byte comparison: every connection gets
  // exactly one admission decision
  std::map<std::string, int> decisions;
  auto recs = parse_trace(got);
  for (const auto& r : recs) {
    if (r.kind != "admit" && r.kind != "reject") continue;
    for (const auto& [k, v] : r.details)
      if (k == "conn") ++decisions[v];
  }
  require(!decisions.empty(), "no admission decisions in trace");
  for (const auto& [conn, n] : decisions)
    require(n == 1, "connection " + conn + " decided " + std::to_string(n) + " times");
  return std::to_string(recs.size()) + " records byte-identical";
}

std::string check_model() {
  auto t0 = std::chrono::steady_clock::now();
  model_check::Explorer ex;
  bool ok = ex.run(6);
  auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  require(ok, ex.failure);
  require(secs < 30.0, "exploration took " + std::to_string(secs) + "s (budget 30s)");
  std::ostringstream note;
  note << ex.steps << " steps to depth 6 in " << std::fixed << std::setprecision(2) << secs << "s";
  return note.str();
}

std::string big_scenario() {
  // 50 hosts, 500 stimuli; generated deterministically.
  std::ostringstream os;
  os << "[script web]\n"
        "on_connection:\n"
        "  reply 32\n"
        "  declare_idle\n"
        "[stimuli]\n";
  std::mt19937_64 rng(2024);
  std::vector<std::pair<long long, std::string>> lines;
  for (int i = 0; i < 500; ++i) {
    long long at = 50000 + static_cast<long long>(rng() % 30000000);  // 50ms..30.05s
    int host = 1 + static_cast<int>(rng() % 50);
    std::ostringstream line;
    if (i % 40 == 39) {
      line << "fault web-" << host;
    } else {
      line << "connect web-" << host << " send " << (1 + rng() % 512) << " hold "
           << (rng() % 400) << "ms";
    }
    lines.emplace_back(at, line.str());
  }
  std::sort(lines.begin(), lines.end());
  for (const auto& [at, rest] : lines) os << "at " << at << "us " << rest << "\n";
  return os.str();
}

std::string check_determinism() {
  Config cfg = parse_config(
      "[rule]\npattern = web-*\nfunction_type = web\nmax_instances = 50\n"
      "[timing]\ncold_start_latency = 200ms\nresume_latency = 20ms\n"
      "idle_debounce = 500ms\nkeep_warm_period = 3s\nsleep_ttl = 8s\nconnect_timeout = 5s\n"
      "[network]\nsubnet = 10.2.0.0/24\nrtt = 1ms\njitter = 500us\n"
      "[limits]\nmax_lifetime = off\nmax_restarts = 100\n");
  Scenario scn = parse_scenario(big_scenario());
  std::string reference = run_scenario(cfg, scn, 777);
  require(!reference.empty(), "empty trace");
  std::hash<std::string> h;
  std::size_t ref_hash = h(reference);
  for (int i = 1; i < 100; ++i) {
    std::string again = run_scenario(cfg, scn, 777);
    require(h(again) == ref_hash && again == reference,
            "run " + std::to_string(i) + " diverged from run 0 under the same seed");
  }
  std::string other = run_scenario(cfg, scn, 778);
  require(other != reference, "different seeds produced identical traces despite jitter");
  return "100 identical runs, " + std::to_string(parse_trace(reference).size()) +
         " records each; seed change diverges";
}

bool host_ever_entered(const std::string& trace, const std::string& host, const std::string& state,
                       TimeUs* when = nullptr) {
  for (const auto& r : parse_trace(trace)) {
    if (r.kind != "state" || r.host != host) continue;
    for (const auto& [k, v] : r.details)
      if (k == "to" && v == state) {
        if (when) *when = r.time_us;
        return true;
      }
  }
  return false;
}

std::string check_external_policies() {
  auto cfg_with = [](const std::string& policy_lines) {
    return parse_config(
        "[rule]\npattern = web-*\nfunction_type = web\nmax_instances = 2\n" + policy_lines +
        "[timing]\ncold_start_latency = 200ms\nresume_latency = 20ms\n"
        "idle_debounce = 500ms\nkeep_warm_period = 6s\nsleep_ttl = 8s\nconnect_timeout = 5s\n"
        "[network]\nsubnet = 10.3.0.0/24\nrtt = 1ms\n"
        "[limits]\nmax_lifetime = off\n");
  };
  Scenario inbound_hold = parse_scenario(
      "[script web]\non_connection:\n  declare_idle\n"
      "[stimuli]\nat 100ms connect web-1 hold forever\n");

  // keep_running: a live external connection pins the host awake
  std::string t1 = run_scenario(cfg_with("external_policy = keep_running\n"), inbound_hold, 1,
                                TimeUs{20 * kSecond});
  require(!host_ever_entered(t1, "web-1", "sleeping"), "keep_running host suspended anyway");
  require(!host_ever_entered(t1, "web-1", "terminated"), "keep_running host terminated anyway");

  // preemptible: the host suspends under the connection and the client sees a reset
  std::string t2 = run_scenario(cfg_with("external_policy = preemptible\n"), inbound_hold, 1,
                                TimeUs{20 * kSecond});
  TimeUs slept = 0;
  require(host_ever_entered(t2, "web-1", "sleeping", &slept), "preemptible host never suspended");
  bool reset_seen = false;
  for (const auto& r : parse_trace(t2))
    if (r.channel == Channel::AppVisible && r.kind == "connection-reset") reset_seen = true;
  require(reset_seen, "client was not told about the preempted connection");
  require(host_ever_entered(t2, "web-1", "terminated"), "idle preemptible host never retired");

  // warm_for(2s): suspension is deferred until the host has been idle that long
  std::string t3 = run_scenario(cfg_with("external_policy = warm_for(2s)\n"), inbound_hold, 1,
                                TimeUs{20 * kSecond});
  TimeUs slept3 = 0;
  require(host_ever_entered(t3, "web-1", "sleeping", &slept3), "warm_for host never suspended");
  require(slept3 >= slept + 1500 * kMillisecond,
          "warm_for(2s) suspended no later than plain preemptible");

  // preemptible + endpoint-role distinction: an inbound (host-passive) external
  // connection pins the host, while a host-initiated outbound one does not
  std::string role_lines = "external_policy = preemptible\ndistinguish_endpoint_role = true\n";
  std::string t4 = run_scenario(cfg_with(role_lines), inbound_hold, 1, TimeUs{20 * kSecond});
  require(!host_ever_entered(t4, "web-1", "sleeping"),
          "role-distinguishing policy preempted an inbound external connection");

  Scenario outbound_hold = parse_scenario(
      "[script web]\non_connection:\n  connect external:collector\n  declare_idle\n"
      "[stimuli]\nat 100ms connect web-1\n");
  std::string t5 = run_scenario(cfg_with(role_lines), outbound_hold, 1, TimeUs{20 * kSecond});
  require(host_ever_entered(t5, "web-1", "sleeping"),
          "host-initiated external connection pinned the host despite role distinction");
  return "keep_running, preemptible, warm_for, role distinction";
}

std::string check_metrics() {
  Config cfg = chain_config();
  int checked = 0;
  double chain_savings = 0;
  for (const char* scn_name : {"chain.scn", "fault.scn"}) {
    std::string trace = run_scenario(cfg, parse_scenario(slurp(data(scn_name))), 1);
    MetricsReport a = compute_metrics(parse_trace(trace));
    MetricsReport b = metrics_oracle::scan(trace);
    require(a == b, std::string(scn_name) + ": reports disagree:\n--- compute_metrics\n" +
                        format_metrics(a) + "--- oracle\n" + format_metrics(b));
    require(a.savings_ratio > 0.0, std::string(scn_name) + ": no savings over always-on");
    if (std::string(scn_name) == "chain.scn") chain_savings = a.savings_ratio;
    ++checked;
  }
  require(checked == 2, "internal error");
  std::ostringstream note;
  note << "both scanners agree; chain savings_ratio=" << std::fixed << std::setprecision(3)
       << chain_savings;
  return note.str();
}

int dial(int port) {
  // CLOEXEC so a host process forked mid-test cannot inherit our client end
  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  require(fd >= 0, "socket() failed");
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(static_cast<uint16_t>(port));
  sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
    ::close(fd);
    require(false, "connect to 127.0.0.1:" + std::to_string(port) + " failed: " + strerror(errno));
  }
  return fd;
}

std::string echo_roundtrip(int fd, const std::string& msg) {
  require(::send(fd, msg.data(), msg.size(), 0) == static_cast<ssize_t>(msg.size()),
          "send failed");
  std::string got;
  char buf[256];
  while (got.size() < msg.size()) {
    ssize_t n = ::recv(fd, buf, sizeof(buf), 0);
    require(n > 0, "recv failed or connection closed before echo completed");
    got.append(buf, static_cast<size_t>(n));
  }
  return got;
}

char proc_state(pid_t pid) {
  std::ifstream in("/proc/" + std::to_string(pid) + "/stat");
  if (!in.good()) return '?';
  std::string line;
  std::getline(in, line);
  auto close_paren = line.rfind(')');
  if (close_paren == std::string::npos || close_paren + 2 >= line.size()) return '?';
  return line[close_paren + 2];
}

std::string check_process_backend() {
  auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  std::string portmap = "/tmp/im-acceptance-portmap-" + std::to_string(::getpid());
  Config cfg = parse_config(
      "[rule]\npattern = echo-1\nfunction_type = echo\nmax_instances = 1\n"
      "[timing]\ncold_start_latency = 200ms\nresume_latency = 20ms\n"
      "idle_debounce = 300ms\nkeep_warm_period = 60s\nsleep_ttl = 10m\nconnect_timeout = 5s\n"
      "[network]\nsubnet = 10.4.0.0/24\nrtt = 1ms\n"
      "[limits]\nmax_lifetime = off\n"
      "[process echo]\ncommand = " ECHO_BIN " {port}\nreadiness_timeout = 10s\n");

  TraceSink sink;
  std::vector<pid_t> pids;
  {
    ProcessRuntime rt(cfg, sink, portmap);
    require(rt.start(), "gateway failed to start");
    int port = rt.gateway_port("echo-1");
    require(port > 0, "no gateway port for echo-1");

    // cold start: the first dial transparently launches the process
    int fd = dial(port);
    require(echo_roundtrip(fd, "hello through the gateway") == "hello through the gateway",
            "first echo mismatch");
    pid_t pid = rt.pid_of("echo-1");
    require(pid > 0, "no process spawned for echo-1");
    char st = proc_state(pid);
    require(st == 'R' || st == 'S', std::string("process not running (state '") + st + "')");

    // closing the last client lets the debounce suspend the process (SIGSTOP)
    ::close(fd);
    bool stopped = false;
    while (elapsed() < 10.0) {
      if (proc_state(pid) == 'T') {
        stopped = true;
        break;
      }
      ::usleep(50000);
    }
    require(stopped, "process was not SIGSTOPped after going idle");

    // a new connection resumes it (SIGCONT) and traffic flows again
    int fd2 = dial(port);
    require(echo_roundtrip(fd2, "second round") == "second round", "echo after resume mismatch");
    require(rt.pid_of("echo-1") == pid, "resume restarted the process instead of waking it");
    char st2 = proc_state(pid);
    require(st2 == 'R' || st2 == 'S', std::string("process still stopped after resume ('") + st2 + "')");
    ::close(fd2);

    pids = rt.all_spawned_pids();
    require(!pids.empty(), "runtime reports no spawned processes");
    rt.shutdown();
  }

  // no orphans: every spawned pid is gone after shutdown
  for (pid_t pid : pids) {
    bool gone = false;
    for (int i = 0; i < 100; ++i) {
      if (::kill(pid, 0) != 0 && errno == ESRCH) {
        gone = true;
        break;
      }
      ::usleep(20000);
    }
    require(gone, "process " + std::to_string(pid) + " survived shutdown");
  }
  ::remove(portmap.c_str());
  double secs = elapsed();
  require(secs < 15.0, "took " + std::to_string(secs) + "s (budget 15s)");
  std::ostringstream note;
  note << "cold start, echo, SIGSTOP on idle, resume, clean shutdown in " << std::fixed
       << std::setprecision(1) << secs << "s";
  return note.str();
}

std::string check_app_vocabulary() {
  static const std::set<std::string> kAllowed = {"connected", "connection-failed",
                                                 "connection-reset", "data", "listening"};
  std::set<std::string> seen;
  long long app_records = 0;
  auto scan = [&](const std::string& text, const std::string& label) {
    for (const auto& r : parse_trace(text)) {
      if (r.channel != Channel::AppVisible) continue;
      ++app_records;
      seen.insert(r.kind);
      require(kAllowed.count(r.kind) == 1,
              label + ": app channel leaked non-vocabulary kind '" + r.kind + "'");
    }
  };
  scan(slurp(golden("chain.trace")), "chain golden");
  scan(slurp(golden("fault.trace")), "fault golden");
  // a failure case, so the negative vocabulary shows up too
  scan(run_scenario(chain_config(), parse_scenario("[stimuli]\nat 10ms connect nosuch-1\n"), 1),
       "unknown-host scenario");
  require(seen.count("connected") == 1, "no successful connection observed");
  require(seen.count("connection-failed") == 1, "no failed connection observed");
  require(seen.count("data") == 1, "no data delivery observed");
  return std::to_string(app_records) + " app records, all in vocabulary";
}

}  // namespace

int main() {
  criterion("admission-decision-table", check_admission_table);
  criterion("cold-start-timing", check_cold_start_timing);
  criterion("service-chain-golden-trace", [] { return check_golden("chain.scn", "chain.trace"); });
  criterion("fault-recovery-golden-trace", [] { return check_golden("fault.scn", "fault.trace"); });
  criterion("lifecycle-model-check", check_model);
  criterion("determinism-under-load", check_determinism);
  criterion("external-connection-policies", check_external_policies);
  criterion("metrics-cross-check", check_metrics);
  criterion("process-backend-end-to-end", check_process_backend);
  criterion("app-channel-vocabulary", check_app_vocabulary);

  if (g_failures) {
    std::cout << g_failures << " criterion(s) failed\n";
    return 1;
  }
  std::cout << "all criteria passed\n";
  return 0;
}
