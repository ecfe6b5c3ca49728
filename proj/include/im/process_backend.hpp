#pragma once

#include <sys/types.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "im/config.hpp"
#include "im/orchestrator.hpp"
#include "im/trace.hpp"

namespace im {

// Local-process backend: host functions are OS processes launched from the
// [process <function_type>] specs in the config; the gateway is a TCP proxy
// on loopback; suspension is SIGSTOP/SIGCONT.
//
// One listener per literal (wildcard-free) rule pattern. The hostname->port
// mapping is written to a port map file consumed by spawned processes.
//
// All lifecycle decisions serialize through an internal event loop thread;
// listeners, readiness pollers, data pumps and the reaper post messages to it.
class ProcessRuntime {
 public:
  ProcessRuntime(Config config, TraceSink& sink, std::string portmap_path);
  ~ProcessRuntime();

  ProcessRuntime(const ProcessRuntime&) = delete;
  ProcessRuntime& operator=(const ProcessRuntime&) = delete;

  // Binds gateway listeners and writes the port map. Returns false with a
  // message on stderr if setup fails.
  bool start();
  // Blocks until shutdown() is called from another thread or a signal handler.
  void run();
  void shutdown();

  const std::string& portmap_path() const { return portmap_path_; }
  int gateway_port(const std::string& hostname) const;
  pid_t pid_of(const std::string& hostname) const;           // 0 if not running
  std::vector<pid_t> all_spawned_pids() const;

  // Executes fn on the event loop thread and waits for it. The orchestrator
  // must only be touched through here.
  void call(std::function<void(Orchestrator&)> fn);

  TimeUs now_us() const;

 private:
  struct Proc;
  struct ProxyConn;

  class BackendImpl;
  class NotifierImpl;

  void post(std::function<void()> fn);
  void loop_main();
  void teardown();
  void accept_loop(std::string hostname, int listen_fd);
  void pump(std::shared_ptr<ProxyConn> conn, bool client_to_backend);
  void reaper_main();
  void spawn_process(const std::string& fn_type, const std::string& hostname, int instance_id);
  std::shared_ptr<Proc> proc_of(const std::string& hostname);
  void terminate_proc(const std::string& hostname);
  void kill_all_processes();
  std::shared_ptr<ProxyConn> proxy_of(std::uint64_t id);
  void register_proxy(std::shared_ptr<ProxyConn> proxy);
  static void close_proxy_fds(ProxyConn& proxy);
  void close_proxy(std::shared_ptr<ProxyConn> proxy);
  void start_backend_dial(std::shared_ptr<ProxyConn> proxy);
  void maybe_idle(const std::string& hostname);
  void maybe_idle_all();
  void add_worker(std::function<void()> fn);

  Config config_;
  TraceSink& sink_;
  std::string portmap_path_;

  std::unique_ptr<BackendImpl> backend_;
  std::unique_ptr<NotifierImpl> notifier_;
  std::unique_ptr<Orchestrator> orch_;

  std::chrono::steady_clock::time_point epoch_;

  mutable std::mutex mu_;  // inbox + loop control
  std::condition_variable cv_;
  std::deque<std::function<void()>> inbox_;
  bool stopping_ = false;
  bool shutdown_requested_ = false;
  bool torn_down_ = false;
  std::atomic<bool> reaper_stop_{false};
  std::thread loop_thread_;
  std::thread reaper_thread_;

  std::map<std::string, int> gateway_ports_;      // hostname -> public port
  std::map<std::string, int> listen_fds_;
  std::vector<std::thread> accept_threads_;
  std::atomic<int> ext_counter_{0};

  mutable std::mutex pmu_;  // process + proxy registries
  std::map<std::string, std::shared_ptr<Proc>> procs_;  // hostname -> live process
  std::map<pid_t, std::shared_ptr<Proc>> by_pid_;
  std::vector<pid_t> spawned_pids_;
  std::map<std::uint64_t, std::shared_ptr<ProxyConn>> proxies_;
  std::vector<std::thread> worker_threads_;  // pollers, connectors, pumps
};

}  // namespace im
