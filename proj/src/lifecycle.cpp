#include "im/lifecycle.hpp"

#include <algorithm>

namespace im {

std::string_view host_state_name(HostState s) {
  switch (s) {
    case HostState::Unallocated: return "unallocated";
    case HostState::Starting: return "starting";
    case HostState::Running: return "running";
    case HostState::Sleeping: return "sleeping";
    case HostState::Resuming: return "resuming";
    case HostState::Stopped: return "stopped";
    case HostState::Terminated: return "terminated";
    case HostState::Failed: return "failed";
  }
  return "?";
}

std::string_view timer_kind_name(TimerKind k) {
  switch (k) {
    case TimerKind::ConnectTimeout: return "connect_timeout";
    case TimerKind::IdleDebounce: return "idle_debounce";
    case TimerKind::KeepWarm: return "keep_warm";
    case TimerKind::SleepTtl: return "sleep_ttl";
  }
  return "?";
}

std::string_view event_kind_name(LifecycleEvent::Kind k) {
  using K = LifecycleEvent::Kind;
  switch (k) {
    case K::ConnectRequested: return "connect_requested";
    case K::StartCompleted: return "start_completed";
    case K::StartFailed: return "start_failed";
    case K::ResumeCompleted: return "resume_completed";
    case K::AppActive: return "app_active";
    case K::AppIdle: return "app_idle";
    case K::IdleDebounceElapsed: return "idle_debounce_elapsed";
    case K::ConnectTimeoutElapsed: return "connect_timeout_elapsed";
    case K::KeepWarmTimer: return "keep_warm_timer";
    case K::SleepTtlExpired: return "sleep_ttl_expired";
    case K::AppExited: return "app_exited";
    case K::Fault: return "fault";
    case K::AdminReset: return "admin_reset";
  }
  return "?";
}

std::string_view admission_decision_name(AdmissionDecision d) {
  switch (d) {
    case AdmissionDecision::Proceed: return "proceed";
    case AdmissionDecision::ResumeThenProceed: return "resume_then_proceed";
    case AdmissionDecision::InstantiateThenProceed: return "instantiate_then_proceed";
    case AdmissionDecision::Fail: return "fail";
  }
  return "?";
}

AdmissionDecision admit_connection(HostState dest_state, bool dest_resolvable) {
  switch (dest_state) {
    case HostState::Running:
      return AdmissionDecision::Proceed;
    case HostState::Sleeping:
    case HostState::Resuming:
      return AdmissionDecision::ResumeThenProceed;
    case HostState::Terminated:
      return AdmissionDecision::Fail;
    case HostState::Unallocated:
    case HostState::Starting:
      return dest_resolvable ? AdmissionDecision::InstantiateThenProceed
                             : AdmissionDecision::Fail;
    case HostState::Stopped:
    case HostState::Failed:
      return AdmissionDecision::Fail;
  }
  return AdmissionDecision::Fail;
}

bool external_policy_gate(const HostRecord& r, const ExternalConnPolicy& pol, TimeUs now) {
  if (r.external_connections.empty()) return true;
  bool has_passive = std::any_of(r.external_connections.begin(), r.external_connections.end(),
                                 [](const ExternalConnRef& c) { return !c.host_active; });
  switch (pol.kind) {
    case ExternalConnPolicy::Kind::KeepRunning:
      return false;
    case ExternalConnPolicy::Kind::Preemptible:
      return !(pol.distinguish_endpoint_role && has_passive);
    case ExternalConnPolicy::Kind::WarmFor:
      if (!r.idle_since || now - *r.idle_since < pol.warm_for) return false;
      return !(pol.distinguish_endpoint_role && has_passive);
  }
  return false;
}

namespace {

using K = LifecycleEvent::Kind;
using AK = Action::Kind;

Action schedule(TimerKind t, DurationUs delay) {
  Action a{AK::ScheduleTimer};
  a.timer = t;
  a.delay = delay;
  return a;
}

Action cancel(TimerKind t) {
  Action a{AK::CancelTimer};
  a.timer = t;
  return a;
}

Action admit(std::uint64_t conn) {
  Action a{AK::AdmitConnection};
  a.conn_id = conn;
  return a;
}

Action reject(std::uint64_t conn, std::string reason) {
  Action a{AK::RejectConnection};
  a.conn_id = conn;
  a.reason = std::move(reason);
  return a;
}

Action simple(AK kind) { return Action{kind}; }

struct Step {
  HostRecord r;
  std::vector<Action> actions;
  TimeUs now;

  void trace_state(HostState from, std::string_view reason = {}) {
    Action a{AK::EmitTrace};
    a.trace_kind = "state";
    a.details.emplace_back("from", std::string(host_state_name(from)));
    a.details.emplace_back("to", std::string(host_state_name(r.state)));
    if (!reason.empty()) a.details.emplace_back("reason", std::string(reason));
    actions.push_back(std::move(a));
  }

  void trace_noop(const LifecycleEvent& ev) {
    Action a{AK::EmitTrace};
    a.trace_kind = "noop";
    a.details.emplace_back("event", std::string(event_kind_name(ev.kind)));
    a.details.emplace_back("state", std::string(host_state_name(r.state)));
    actions.push_back(std::move(a));
  }

  void enter(HostState s) {
    r.state = s;
    r.state_entered_at = now;
  }

  void queue_conn(std::uint64_t conn_id, const LifecycleParams& p) {
    if (r.pending_connections.size() >= p.queue_capacity) {
      actions.push_back(reject(conn_id, "queue_overflow"));
      return;
    }
    if (r.pending_connections.empty())
      actions.push_back(schedule(TimerKind::ConnectTimeout, p.timing.connect_timeout));
    r.pending_connections.push_back({conn_id, now});
  }

  void reject_pending(const std::string& reason) {
    for (const auto& pc : r.pending_connections) actions.push_back(reject(pc.conn_id, reason));
    r.pending_connections.clear();
  }

  void cancel_all_timers() {
    for (TimerKind t : {TimerKind::ConnectTimeout, TimerKind::IdleDebounce, TimerKind::KeepWarm,
                        TimerKind::SleepTtl})
      actions.push_back(cancel(t));
  }

  // Failed -> Starting (restart) or Terminated (budget exhausted).
  void restart_policy(const LifecycleParams& p) {
    HostState failed = HostState::Failed;
    if (r.restart_count < p.max_restarts) {
      ++r.restart_count;
      ++r.instance_id;
      enter(HostState::Starting);
      actions.push_back(simple(AK::StartInstance));
      trace_state(failed, "restart");
    } else {
      enter(HostState::Terminated);
      trace_state(failed, "restart_budget");
    }
  }

  void enter_sleeping(const LifecycleParams& p) {
    for (const auto& ec : r.external_connections) {
      Action a{AK::MarkExternalLost};
      a.conn_id = ec.conn_id;
      actions.push_back(a);
    }
    r.external_connections.clear();
    HostState from = r.state;
    enter(HostState::Sleeping);
    r.keep_warm_probe = false;
    actions.push_back(simple(AK::SuspendInstance));
    actions.push_back(schedule(TimerKind::KeepWarm, p.timing.keep_warm_period));
    if (!r.sleep_deadline) {
      r.sleep_deadline = now + p.timing.sleep_ttl;
      actions.push_back(schedule(TimerKind::SleepTtl, p.timing.sleep_ttl));
    }
    trace_state(from);
  }

  void terminate_idle(std::string_view reason) {
    HostState from = r.state;
    reject_pending("host_terminated");
    cancel_all_timers();
    enter(HostState::Terminated);
    r.keep_warm_probe = false;
    r.idle_since.reset();
    r.sleep_deadline.reset();
    actions.push_back(simple(AK::ReleaseInstance));
    trace_state(from, reason);
  }
};

}  // namespace

StepResult apply_event(const HostRecord& record, const LifecycleEvent& ev, TimeUs now,
                       const LifecycleParams& p) {
  Step s{record, {}, now};
  HostRecord& r = s.r;
  const HostState st = r.state;

  switch (ev.kind) {
    case K::ConnectRequested:
      switch (st) {
        case HostState::Unallocated: {
          ++r.instance_id;
          s.enter(HostState::Starting);
          s.actions.push_back(simple(AK::StartInstance));
          s.queue_conn(ev.conn_id, p);
          s.trace_state(HostState::Unallocated);
          break;
        }
        case HostState::Starting:
        case HostState::Resuming:
          s.queue_conn(ev.conn_id, p);
          break;
        case HostState::Sleeping: {
          s.enter(HostState::Resuming);
          r.keep_warm_probe = false;
          r.sleep_deadline.reset();
          s.actions.push_back(simple(AK::ResumeInstance));
          s.actions.push_back(cancel(TimerKind::KeepWarm));
          s.actions.push_back(cancel(TimerKind::SleepTtl));
          s.queue_conn(ev.conn_id, p);
          s.trace_state(HostState::Sleeping);
          break;
        }
        case HostState::Running:
          s.actions.push_back(admit(ev.conn_id));
          break;
        case HostState::Stopped:
          s.actions.push_back(reject(ev.conn_id, "host_stopped"));
          break;
        case HostState::Terminated:
          s.actions.push_back(reject(ev.conn_id, "host_terminated"));
          break;
        case HostState::Failed:
          s.actions.push_back(reject(ev.conn_id, "host_failed"));
          break;
      }
      break;

    case K::StartCompleted:
      if (st == HostState::Starting) {
        s.enter(HostState::Running);
        r.idle_since.reset();
        s.actions.push_back(cancel(TimerKind::ConnectTimeout));
        for (const auto& pc : r.pending_connections) s.actions.push_back(admit(pc.conn_id));
        r.pending_connections.clear();
        s.trace_state(HostState::Starting);
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::StartFailed:
      if (st == HostState::Starting) {
        s.reject_pending("start_failed");
        s.actions.push_back(cancel(TimerKind::ConnectTimeout));
        s.enter(HostState::Failed);
        s.trace_state(HostState::Starting, ev.reason.empty() ? "start_failed" : ev.reason);
        s.restart_policy(p);
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::ResumeCompleted:
      if (st == HostState::Resuming) {
        s.enter(HostState::Running);
        s.actions.push_back(cancel(TimerKind::ConnectTimeout));
        bool had_pending = !r.pending_connections.empty();
        for (const auto& pc : r.pending_connections) s.actions.push_back(admit(pc.conn_id));
        r.pending_connections.clear();
        if (had_pending) {
          // Genuine activity: the TTL clock restarts from the next idle period.
          r.idle_since.reset();
          r.sleep_deadline.reset();
          s.actions.push_back(cancel(TimerKind::SleepTtl));
          r.keep_warm_probe = false;
        } else if (r.keep_warm_probe) {
          // Probe resume: give the app one idle_debounce window; if nothing
          // reports activity, the normal idle path re-suspends.
          r.idle_since = now;
          s.actions.push_back(schedule(TimerKind::IdleDebounce, p.timing.idle_debounce));
        }
        s.trace_state(HostState::Resuming);
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::AppActive:
      if (st == HostState::Running) {
        r.idle_since.reset();
        r.keep_warm_probe = false;
        if (r.sleep_deadline) {
          r.sleep_deadline.reset();
          s.actions.push_back(cancel(TimerKind::SleepTtl));
        }
        s.actions.push_back(cancel(TimerKind::IdleDebounce));
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::AppIdle:
      if (st == HostState::Running) {
        r.idle_since = now;
        s.actions.push_back(schedule(TimerKind::IdleDebounce, p.timing.idle_debounce));
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::IdleDebounceElapsed:
      if (st == HostState::Running && r.idle_since && r.open_connections == 0) {
        if (external_policy_gate(r, p.external_policy, now)) {
          s.enter_sleeping(p);
        } else if (p.external_policy.kind == ExternalConnPolicy::Kind::WarmFor &&
                   now - *r.idle_since < p.external_policy.warm_for) {
          // Not warm long enough yet; re-check exactly at the threshold.
          s.actions.push_back(
              schedule(TimerKind::IdleDebounce, *r.idle_since + p.external_policy.warm_for - now));
        } else {
          s.trace_noop(ev);
        }
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::ConnectTimeoutElapsed:
      if ((st == HostState::Starting || st == HostState::Resuming) &&
          !r.pending_connections.empty()) {
        std::vector<PendingConn> keep;
        for (const auto& pc : r.pending_connections) {
          if (now - pc.enqueued_at >= p.timing.connect_timeout)
            s.actions.push_back(reject(pc.conn_id, "admission_timeout"));
          else
            keep.push_back(pc);
        }
        r.pending_connections = std::move(keep);
        if (!r.pending_connections.empty())
          s.actions.push_back(schedule(
              TimerKind::ConnectTimeout,
              r.pending_connections.front().enqueued_at + p.timing.connect_timeout - now));
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::KeepWarmTimer:
      if (st == HostState::Sleeping) {
        s.enter(HostState::Resuming);
        r.keep_warm_probe = true;
        s.actions.push_back(simple(AK::ResumeInstance));
        s.trace_state(HostState::Sleeping, "keep_warm");
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::SleepTtlExpired:
      if (st == HostState::Sleeping) {
        s.terminate_idle("sleep_ttl");
      } else if (st == HostState::Resuming && r.keep_warm_probe) {
        s.terminate_idle("sleep_ttl");
      } else if (st == HostState::Running && r.idle_since && r.open_connections == 0 &&
                 r.external_connections.empty()) {
        // TTL landed inside a probe's idle window; the host was idle throughout.
        s.terminate_idle("sleep_ttl");
      } else {
        r.sleep_deadline.reset();
        s.trace_noop(ev);
      }
      break;

    case K::AppExited:
      if (st == HostState::Running) {
        s.reject_pending("app_exited");
        s.cancel_all_timers();
        s.enter(HostState::Stopped);
        r.open_connections = 0;
        r.external_connections.clear();
        r.idle_since.reset();
        r.sleep_deadline.reset();
        r.keep_warm_probe = false;
        s.actions.push_back(simple(AK::ReleaseInstance));
        s.trace_state(HostState::Running, "app_exited");
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::Fault:
      if (st == HostState::Running || st == HostState::Sleeping || st == HostState::Resuming) {
        s.reject_pending("fault");
        s.cancel_all_timers();
        s.actions.push_back(simple(AK::ReleaseInstance));
        r.open_connections = 0;
        r.external_connections.clear();
        r.idle_since.reset();
        r.sleep_deadline.reset();
        r.keep_warm_probe = false;
        s.enter(HostState::Failed);
        s.trace_state(st, ev.reason.empty() ? "fault" : ev.reason);
        s.restart_policy(p);
      } else {
        s.trace_noop(ev);
      }
      break;

    case K::AdminReset:
      if (st == HostState::Stopped || st == HostState::Terminated) {
        s.enter(HostState::Unallocated);
        r.restart_count = 0;
        r.open_connections = 0;
        r.external_connections.clear();
        r.pending_connections.clear();
        r.idle_since.reset();
        r.sleep_deadline.reset();
        r.keep_warm_probe = false;
        s.trace_state(st, "admin_reset");
      } else {
        s.trace_noop(ev);
      }
      break;
  }

  return StepResult{std::move(s.r), std::move(s.actions)};
}

}  // namespace im
