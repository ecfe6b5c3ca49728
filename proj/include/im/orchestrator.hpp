#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "im/config.hpp"
#include "im/gateway.hpp"
#include "im/lifecycle.hpp"
#include "im/trace.hpp"

namespace im {

// Executes lifecycle actions against a concrete platform. Completion
// callbacks (StartCompleted/StartFailed/ResumeCompleted) are delivered back
// through the orchestrator entry points, exactly once per request.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual void start(const std::string& function_type, const std::string& hostname,
                     std::uint32_t address, int instance_id) = 0;
  virtual void suspend(const std::string& hostname, int instance_id) = 0;
  virtual void resume(const std::string& hostname, int instance_id) = 0;
  virtual void release(const std::string& hostname, int instance_id) = 0;
};

// Delivers application-visible connection outcomes to the endpoints. The
// application observes only {connected, connection-failed, connection-reset,
// data, listening} -- never orchestration detail.
class EndpointNotifier {
 public:
  virtual ~EndpointNotifier() = default;
  virtual void connection_established(const ConnectionRecord& conn) = 0;  // to src
  virtual void inbound_accepted(const ConnectionRecord& conn) = 0;        // to dst
  virtual void connection_failed(const ConnectionRecord& conn, const std::string& reason) = 0;
  virtual void connection_reset(const ConnectionRecord& conn, bool notify_src,
                                bool notify_dst) = 0;
  virtual void peer_closed(const ConnectionRecord& conn, bool closed_by_src) = 0;
  virtual void data_delivered(const ConnectionRecord& conn, bool to_dst, std::uint64_t n) = 0;
};

// The function manager. Owns the host registry, routes signals and backend
// completions into the lifecycle machine, executes the resulting actions and
// manages timers. Strictly single-threaded; callers serialize.
class Orchestrator {
 public:
  Orchestrator(Config config, Backend& backend, EndpointNotifier& notifier, TraceSink& sink,
               TimeUs start_time = 0);

  // Connection intake. Returns the allocated connection id; the outcome is
  // delivered asynchronously through the notifier.
  std::uint64_t handle_connect(const Endpoint& src, const std::string& dst_hostname, TimeUs now);

  // Socket control operation from a running instance. Updates socket state,
  // returns the derived allocation signals (already applied).
  std::vector<AllocationSignal> on_socket_op(const std::string& host, const SocketOp& op,
                                             TimeUs now);

  void report_signal(const AllocationSignal& sig, TimeUs now);

  // Data-plane forwarding bookkeeping; delivery itself goes via the notifier.
  void forward(std::uint64_t conn_id, bool src_to_dst, std::uint64_t bytes, TimeUs now);

  // Close initiated by an endpoint (managed host or external peer).
  void close_connection(std::uint64_t conn_id, bool closed_by_src, TimeUs now);

  // Backend completion entry points. Stale completions (instance_id mismatch)
  // are traced and dropped.
  void on_start_completed(const std::string& host, int instance_id, TimeUs now);
  void on_start_failed(const std::string& host, int instance_id, const std::string& reason,
                       TimeUs now);
  void on_resume_completed(const std::string& host, int instance_id, TimeUs now);

  void handle_fault(const std::string& host, TimeUs now, const std::string& cause = "fault");
  void admin_reset(const std::string& host, TimeUs now);

  // Fires all timers with deadline <= now, in (deadline, hostname, kind) order.
  void tick(TimeUs now);
  std::optional<TimeUs> next_deadline() const;

  void finish(TimeUs now);  // emits the run-end record

  // Introspection (tests, metrics, backends).
  const Config& config() const { return config_; }
  const HostRecord* host(const std::string& hostname) const;
  const std::map<std::string, HostRecord>& registry() const { return hosts_; }
  ConnectionTable& connections() { return conns_; }
  const AddressRegistry& addresses() const { return addr_registry_; }
  Endpoint make_external_endpoint(const std::string& label);
  Endpoint endpoint_of(const std::string& hostname) const;

  // Cross-module consistency: each host's open_connections equals its count
  // of established internal connections. Returns an error message or empty.
  std::string consistency_error() const;

 private:
  struct TimerEntry {
    TimeUs deadline;
    std::string host;
    int kind;  // TimerKind order: connect_timeout < idle_debounce < keep_warm < sleep_ttl
    auto operator<=>(const TimerEntry&) const = default;
  };

  void apply(const std::string& host, const LifecycleEvent& ev, TimeUs now);
  // pre_instance: the instance id before the event; actions preceding a
  // StartInstance belong to it, later ones to the new instance.
  void execute_actions(const std::string& host, const std::vector<Action>& actions, TimeUs now,
                       int pre_instance);
  void admit_conn(const std::string& host, std::uint64_t conn_id, TimeUs now, int inst);
  void reject_conn(const std::string& host, std::uint64_t conn_id, const std::string& reason,
                   TimeUs now, int inst);
  void detach_conn_from_records(const ConnectionRecord& conn);
  void reset_conns_of(const std::string& host, TimeUs now);
  void schedule_timer(const std::string& host, TimerKind kind, DurationUs delay, TimeUs now,
                      int inst);
  void cancel_timer(const std::string& host, TimerKind kind, TimeUs now, int inst);
  void trace(TimeUs now, Channel ch, std::string kind, const std::string& host,
             std::vector<std::pair<std::string, std::string>> details = {});
  int instance_of(const std::string& host) const;
  LifecycleParams params_for(const std::string& host) const;

  Config config_;
  Backend& backend_;
  EndpointNotifier& notifier_;
  TraceSink& sink_;
  AddressRegistry addr_registry_;
  std::map<std::string, HostRecord> hosts_;
  std::map<std::string, std::set<int>> listening_;
  ConnectionTable conns_;
  std::set<TimerEntry> timers_;
  std::map<std::pair<std::string, int>, TimeUs> timer_index_;
  std::uint32_t next_external_offset_ = 1;
};

}  // namespace im
