#pragma once

// Exhaustive exploration of the lifecycle state machine against an
// independently written next-state oracle plus cross-step invariants
// (most importantly: every connection is admitted or rejected exactly once).

#include <cstdint>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "im/lifecycle.hpp"

namespace model_check {

inline im::LifecycleParams check_params() {
  im::LifecycleParams p;
  p.timing.cold_start_latency = 200 * im::kMillisecond;
  p.timing.resume_latency = 20 * im::kMillisecond;
  p.timing.idle_debounce = 500 * im::kMillisecond;
  p.timing.keep_warm_period = 3 * im::kSecond;
  p.timing.sleep_ttl = 8 * im::kSecond;
  p.timing.connect_timeout = 5 * im::kSecond;
  p.max_restarts = 2;
  p.queue_capacity = 2;
  // Preemptible without role distinction keeps the suspension gate
  // unconditional, so the oracle below stays exact.
  p.external_policy.kind = im::ExternalConnPolicy::Kind::Preemptible;
  return p;
}

// Reference next-state relation, written directly from the transition rules.
inline im::HostState oracle_next_state(const im::HostRecord& r, const im::LifecycleEvent& ev,
                                       const im::LifecycleParams& p) {
  using S = im::HostState;
  using K = im::LifecycleEvent::Kind;
  const S st = r.state;
  auto after_failure = [&] { return r.restart_count < p.max_restarts ? S::Starting : S::Terminated; };
  switch (ev.kind) {
    case K::ConnectRequested:
      if (st == S::Unallocated) return S::Starting;
      if (st == S::Sleeping) return S::Resuming;
      return st;
    case K::StartCompleted:
      return st == S::Starting ? S::Running : st;
    case K::StartFailed:
      return st == S::Starting ? after_failure() : st;
    case K::ResumeCompleted:
      return st == S::Resuming ? S::Running : st;
    case K::AppActive:
    case K::AppIdle:
    case K::ConnectTimeoutElapsed:
      return st;
    case K::IdleDebounceElapsed:
      return st == S::Running && r.idle_since && r.open_connections == 0 ? S::Sleeping : st;
    case K::KeepWarmTimer:
      return st == S::Sleeping ? S::Resuming : st;
    case K::SleepTtlExpired:
      if (st == S::Sleeping) return S::Terminated;
      if (st == S::Resuming && r.keep_warm_probe) return S::Terminated;
      if (st == S::Running && r.idle_since && r.open_connections == 0 &&
          r.external_connections.empty())
        return S::Terminated;
      return st;
    case K::AppExited:
      return st == S::Running ? S::Stopped : st;
    case K::Fault:
      return st == S::Running || st == S::Sleeping || st == S::Resuming ? after_failure() : st;
    case K::AdminReset:
      return st == S::Stopped || st == S::Terminated ? S::Unallocated : st;
  }
  return st;
}

struct Explorer {
  im::LifecycleParams params = check_params();
  long long steps = 0;
  std::string failure;

  static std::vector<im::HostRecord> seed_states() {
    using S = im::HostState;
    std::vector<im::HostRecord> seeds;
    auto base = [](S st) {
      im::HostRecord r;
      r.hostname = "h";
      r.address = 0x0A010001;
      r.state = st;
      r.instance_id = st == S::Unallocated ? 0 : 1;
      return r;
    };
    seeds.push_back(base(S::Unallocated));
    {
      im::HostRecord r = base(S::Starting);
      r.pending_connections = {{1000, 0}};
      seeds.push_back(r);
    }
    seeds.push_back(base(S::Running));
    {
      im::HostRecord r = base(S::Running);
      r.open_connections = 1;
      seeds.push_back(r);
    }
    {
      im::HostRecord r = base(S::Running);
      r.idle_since = 0;
      r.keep_warm_probe = true;
      r.sleep_deadline = 8 * im::kSecond;
      seeds.push_back(r);
    }
    {
      im::HostRecord r = base(S::Sleeping);
      r.sleep_deadline = 8 * im::kSecond;
      seeds.push_back(r);
    }
    {
      im::HostRecord r = base(S::Resuming);
      r.pending_connections = {{1001, 0}};
      seeds.push_back(r);
    }
    {
      im::HostRecord r = base(S::Resuming);
      r.keep_warm_probe = true;
      r.sleep_deadline = 8 * im::kSecond;
      seeds.push_back(r);
    }
    seeds.push_back(base(S::Stopped));
    {
      im::HostRecord r = base(S::Terminated);
      r.restart_count = 2;
      seeds.push_back(r);
    }
    return seeds;
  }

  struct Bookkeeping {
    std::set<std::uint64_t> submitted;
    std::set<std::uint64_t> decided;
  };

  bool check_step(const im::HostRecord& before, const im::LifecycleEvent& ev,
                  const im::StepResult& step, Bookkeeping& bk, std::string* why) {
    using AK = im::Action::Kind;
    im::HostState expected = oracle_next_state(before, ev, params);
    if (step.record.state != expected) {
      *why = std::string("state mismatch: got ") + std::string(host_state_name(step.record.state)) +
             " expected " + std::string(host_state_name(expected));
      return false;
    }
    if (step.record.instance_id < before.instance_id) {
      *why = "instance id went backwards";
      return false;
    }
    int starts = 0;
    for (const auto& a : step.actions) {
      if (a.kind == AK::StartInstance) ++starts;
      if (a.kind == AK::AdmitConnection || a.kind == AK::RejectConnection) {
        if (!bk.submitted.count(a.conn_id)) {
          *why = "decision for a connection that was never requested";
          return false;
        }
        if (!bk.decided.insert(a.conn_id).second) {
          *why = "connection decided twice (conn " + std::to_string(a.conn_id) + ")";
          return false;
        }
      }
    }
    if (step.record.instance_id != before.instance_id + starts &&
        !(starts == 0 && step.record.instance_id == before.instance_id)) {
      *why = "instance id out of step with StartInstance actions";
      return false;
    }
    if (step.record.restart_count > params.max_restarts) {
      *why = "restart budget exceeded";
      return false;
    }
    if (!step.record.pending_connections.empty() &&
        step.record.state != im::HostState::Starting &&
        step.record.state != im::HostState::Resuming) {
      *why = "pending connections outside Starting/Resuming";
      return false;
    }
    for (const auto& pc : step.record.pending_connections) {
      if (bk.decided.count(pc.conn_id)) {
        *why = "connection still pending after being decided";
        return false;
      }
    }
    // conservation: everything submitted is either decided or still pending
    std::set<std::uint64_t> pending;
    for (const auto& pc : step.record.pending_connections) pending.insert(pc.conn_id);
    for (std::uint64_t id : bk.submitted) {
      if (!bk.decided.count(id) && !pending.count(id)) {
        *why = "connection vanished without a decision (conn " + std::to_string(id) + ")";
        return false;
      }
    }
    return true;
  }

  void dfs(const im::HostRecord& r, Bookkeeping bk, int depth, int max_depth, im::TimeUs now,
           std::uint64_t* next_conn, std::string trail) {
    using K = im::LifecycleEvent::Kind;
    if (!failure.empty() || depth == max_depth) return;
    static constexpr K kAllEvents[] = {
        K::ConnectRequested, K::StartCompleted,      K::StartFailed,
        K::ResumeCompleted,  K::AppActive,           K::AppIdle,
        K::IdleDebounceElapsed, K::ConnectTimeoutElapsed, K::KeepWarmTimer,
        K::SleepTtlExpired,  K::AppExited,           K::Fault,
        K::AdminReset,
    };
    for (K kind : kAllEvents) {
      im::LifecycleEvent ev{kind};
      Bookkeeping bk2 = bk;
      if (kind == K::ConnectRequested) {
        ev.conn_id = (*next_conn)++;
        bk2.submitted.insert(ev.conn_id);
      }
      im::StepResult step = im::apply_event(r, ev, now, params);
      ++steps;
      std::string why;
      if (!check_step(r, ev, step, bk2, &why)) {
        std::ostringstream os;
        os << why << " after [" << trail << event_kind_name(kind) << "] from state "
           << host_state_name(r.state);
        failure = os.str();
        return;
      }
      // Pure no-ops lead back to an already-explored node; recursing through
      // them only re-runs identical subtrees.
      if (step.record == r) continue;
      dfs(step.record, std::move(bk2), depth + 1, max_depth, now + 1000, next_conn,
          trail + std::string(event_kind_name(kind)) + " ");
    }
  }

  // Returns true when every sequence up to max_depth passes.
  bool run(int max_depth) {
    for (const im::HostRecord& seed : seed_states()) {
      Bookkeeping bk;
      for (const auto& pc : seed.pending_connections) bk.submitted.insert(pc.conn_id);
      std::uint64_t next_conn = 1;
      dfs(seed, bk, 0, max_depth, 0, &next_conn, "");
      if (!failure.empty()) return false;
    }
    return true;
  }
};

}  // namespace model_check
