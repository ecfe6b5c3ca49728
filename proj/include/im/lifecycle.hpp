#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "im/config.hpp"
#include "im/time.hpp"

namespace im {

enum class HostState {
  Unallocated,
  Starting,
  Running,
  Sleeping,
  Resuming,
  Stopped,     // application exited; terminal until AdminReset
  Terminated,  // platform-retired (sleep TTL, restart budget); terminal until AdminReset
  Failed,      // transient: resolved to Starting or Terminated within the same step
};

std::string_view host_state_name(HostState s);

enum class TimerKind { ConnectTimeout = 0, IdleDebounce = 1, KeepWarm = 2, SleepTtl = 3 };
std::string_view timer_kind_name(TimerKind k);

struct PendingConn {
  std::uint64_t conn_id;
  TimeUs enqueued_at;
  bool operator==(const PendingConn&) const = default;
};

struct ExternalConnRef {
  std::uint64_t conn_id;
  bool host_active;  // host initiated the connection
  bool operator==(const ExternalConnRef&) const = default;
};

struct HostRecord {
  std::string hostname;
  std::uint32_t address = 0;
  int instance_id = 0;  // increments on every StartInstance
  HostState state = HostState::Unallocated;
  TimeUs state_entered_at = 0;
  std::vector<PendingConn> pending_connections;
  int open_connections = 0;  // established internal connections
  std::vector<ExternalConnRef> external_connections;
  std::optional<TimeUs> idle_since;
  int restart_count = 0;
  // Keep-warm probe in flight (or its idle window): a resume that was not
  // triggered by a connection.
  bool keep_warm_probe = false;
  // Absolute deadline after which a continuously idle host is terminated.
  // Survives keep-warm probe cycles; cleared by genuine activity.
  std::optional<TimeUs> sleep_deadline;

  bool operator==(const HostRecord&) const = default;
};

struct LifecycleEvent {
  enum class Kind {
    ConnectRequested,
    StartCompleted,
    StartFailed,
    ResumeCompleted,
    AppActive,
    AppIdle,
    IdleDebounceElapsed,
    ConnectTimeoutElapsed,
    KeepWarmTimer,
    SleepTtlExpired,
    AppExited,
    Fault,
    AdminReset,
  };
  Kind kind;
  std::uint64_t conn_id = 0;  // ConnectRequested only
  std::string reason;         // StartFailed / Fault cause
};

std::string_view event_kind_name(LifecycleEvent::Kind k);

struct Action {
  enum class Kind {
    StartInstance,
    SuspendInstance,
    ResumeInstance,
    ReleaseInstance,
    ScheduleTimer,
    CancelTimer,
    AdmitConnection,
    RejectConnection,
    MarkExternalLost,
    EmitTrace,
  };
  Kind kind;
  TimerKind timer = TimerKind::ConnectTimeout;
  DurationUs delay = 0;
  std::uint64_t conn_id = 0;
  std::string reason;
  std::string trace_kind;
  std::vector<std::pair<std::string, std::string>> details;
};

struct LifecycleParams {
  TimingParams timing;
  ExternalConnPolicy external_policy;
  int max_restarts = 3;
  std::size_t queue_capacity = 1024;
};

enum class AdmissionDecision { Proceed, ResumeThenProceed, InstantiateThenProceed, Fail };
std::string_view admission_decision_name(AdmissionDecision d);

// The admission case analysis: what orchestration (if any) a connection to
// a host in `dest_state` requires. Starting/Resuming map to the in-flight
// variants; the caller queues instead of issuing a second start/resume.
AdmissionDecision admit_connection(HostState dest_state, bool dest_resolvable);

// Whether suspension is permitted given the host's external connections.
bool external_policy_gate(const HostRecord& record, const ExternalConnPolicy& policy, TimeUs now);

struct StepResult {
  HostRecord record;
  std::vector<Action> actions;
};

// Pure transition function: no clocks, no I/O. Inapplicable (state, event)
// pairs are no-ops that emit a trace record.
StepResult apply_event(const HostRecord& record, const LifecycleEvent& event, TimeUs now,
                       const LifecycleParams& params);

}  // namespace im
