#include "im/orchestrator.hpp"

#include <algorithm>
#include <cassert>

namespace im {

Orchestrator::Orchestrator(Config config, Backend& backend, EndpointNotifier& notifier,
                           TraceSink& sink, TimeUs start_time)
    : config_(std::move(config)),
      backend_(backend),
      notifier_(notifier),
      sink_(sink),
      addr_registry_(config_.network.subnet) {
  trace(start_time, Channel::Orchestration, "config", "-",
        {{"rules", std::to_string(config_.rules.size())},
         {"subnet", format_addr(config_.network.subnet.base) + "/" +
                        std::to_string(config_.network.subnet.prefix_len)}});
}

int Orchestrator::instance_of(const std::string& host) const {
  auto it = hosts_.find(host);
  return it == hosts_.end() ? 0 : it->second.instance_id;
}

void Orchestrator::trace(TimeUs now, Channel ch, std::string kind, const std::string& host,
                         std::vector<std::pair<std::string, std::string>> details) {
  sink_.emit(now, ch, std::move(kind), host, instance_of(host), std::move(details));
}

LifecycleParams Orchestrator::params_for(const std::string& host) const {
  LifecycleParams p;
  p.timing = config_.timing;
  p.max_restarts = config_.limits.max_restarts;
  const MappingRule* rule = resolve_function_type(host, config_);
  p.external_policy = rule ? config_.policy_for(*rule) : config_.default_external_policy;
  return p;
}

Endpoint Orchestrator::make_external_endpoint(const std::string& label) {
  // Flip the top bit of the subnet base: guaranteed outside any prefix >= 1.
  std::uint32_t addr = (config_.network.subnet.base ^ 0x80000000u) + next_external_offset_++;
  return Endpoint{true, label, addr};
}

Endpoint Orchestrator::endpoint_of(const std::string& hostname) const {
  auto it = hosts_.find(hostname);
  return Endpoint{false, hostname, it == hosts_.end() ? 0 : it->second.address};
}

const HostRecord* Orchestrator::host(const std::string& hostname) const {
  auto it = hosts_.find(hostname);
  return it == hosts_.end() ? nullptr : &it->second;
}

std::uint64_t Orchestrator::handle_connect(const Endpoint& src, const std::string& dst_hostname,
                                           TimeUs now) {
  // Connections to endpoints outside the managed subnet establish immediately;
  // the platform performs no orchestration for them.
  if (dst_hostname.starts_with("external:")) {
    Endpoint dst = make_external_endpoint(dst_hostname);
    std::uint64_t id = conns_.create(src, dst, now);
    conns_.establish(id, now);
    if (!src.external) {
      auto it = hosts_.find(src.name);
      if (it != hosts_.end())
        it->second.external_connections.push_back({id, /*host_active=*/true});
      trace(now, Channel::Orchestration, "admit", src.name,
            {{"conn", std::to_string(id)}, {"peer", dst_hostname}});
    }
    notifier_.connection_established(*conns_.find(id));
    return id;
  }

  const MappingRule* rule = resolve_function_type(dst_hostname, config_);
  auto host_it = hosts_.find(dst_hostname);

  Endpoint dst{false, dst_hostname, host_it != hosts_.end() ? host_it->second.address : 0};
  std::uint64_t conn_id = conns_.create(src, dst, now);

  auto fail = [&](const std::string& reason) {
    trace(now, Channel::Orchestration, "reject", dst_hostname,
          {{"conn", std::to_string(conn_id)}, {"reason", reason}});
    conns_.finish(conn_id, ConnState::Reset, now);
    notifier_.connection_failed(*conns_.find(conn_id), reason);
    return conn_id;
  };

  if (host_it == hosts_.end()) {
    if (!rule) return fail("unknown_host");
    int bound = 0;
    for (const auto& [name, rec] : hosts_)
      if (resolve_function_type(name, config_) == rule) ++bound;
    if (bound >= rule->max_instances) return fail("max_instances");
    auto addr = addr_registry_.assign(dst_hostname);
    if (!addr) return fail("subnet_exhausted");
    HostRecord rec;
    rec.hostname = dst_hostname;
    rec.address = *addr;
    host_it = hosts_.emplace(dst_hostname, std::move(rec)).first;
    conns_.find(conn_id)->dst.address = *addr;
  }

  AdmissionDecision decision = admit_connection(host_it->second.state, rule != nullptr);
  trace(now, Channel::Orchestration, "connect", dst_hostname,
        {{"conn", std::to_string(conn_id)},
         {"src", src.name},
         {"decision", std::string(admission_decision_name(decision))}});

  LifecycleEvent ev{LifecycleEvent::Kind::ConnectRequested};
  ev.conn_id = conn_id;
  apply(dst_hostname, ev, now);
  return conn_id;
}

std::vector<AllocationSignal> Orchestrator::on_socket_op(const std::string& host,
                                                         const SocketOp& op, TimeUs now) {
  std::vector<AllocationSignal> signals;
  auto it = hosts_.find(host);
  if (it == hosts_.end() || it->second.state != HostState::Running) {
    trace(now, Channel::Orchestration, "protocol_error", host,
          {{"op", std::to_string(static_cast<int>(op.kind))}});
    return signals;
  }

  using OK = SocketOp::Kind;
  switch (op.kind) {
    case OK::Connect: {
      if (op.dst.empty()) {
        // Malformed destination: immediate failure to the app, no signal.
        std::uint64_t id = conns_.create(endpoint_of(host), Endpoint{false, "?", 0}, now);
        conns_.finish(id, ConnState::Reset, now);
        notifier_.connection_failed(*conns_.find(id), "malformed_hostname");
        break;
      }
      signals.push_back({AllocationSignal::Kind::ConnectTo, host, op.dst, now});
      break;
    }
    case OK::Listen:
      listening_[host].insert(op.port);
      sink_.emit(now, Channel::AppVisible, "listening", host, it->second.instance_id,
                 {{"port", std::to_string(op.port)}});
      break;
    case OK::Accept:
    case OK::Send:
    case OK::Recv: {
      const ConnectionRecord* c = conns_.find(op.conn_id);
      if (!c) {
        trace(now, Channel::Orchestration, "protocol_error", host,
              {{"conn", std::to_string(op.conn_id)}, {"reason", "unknown_conn"}});
        break;
      }
      signals.push_back({AllocationSignal::Kind::SocketActivity, host, "", now});
      if (op.kind == OK::Send)
        forward(op.conn_id, !c->src.external && c->src.name == host, op.bytes, now);
      break;
    }
    case OK::Close: {
      const ConnectionRecord* c = conns_.find(op.conn_id);
      if (!c) {
        trace(now, Channel::Orchestration, "protocol_error", host,
              {{"conn", std::to_string(op.conn_id)}, {"reason", "unknown_conn"}});
        break;
      }
      if (c->state == ConnState::Established)
        close_connection(op.conn_id, c->src.name == host && !c->src.external, now);
      else
        trace(now, Channel::Orchestration, "noop", host,
              {{"conn", std::to_string(op.conn_id)}, {"event", "close"},
               {"state", std::string(conn_state_name(c->state))}});
      break;
    }
  }
  for (const auto& sig : signals) report_signal(sig, now);
  return signals;
}

void Orchestrator::report_signal(const AllocationSignal& sig, TimeUs now) {
  using K = AllocationSignal::Kind;
  if (sig.kind != K::ConnectTo && hosts_.find(sig.source) == hosts_.end()) {
    trace(now, Channel::Orchestration, "signal_dropped", "-",
          {{"kind", std::string(signal_kind_name(sig.kind))}, {"source", sig.source}});
    return;
  }
  switch (sig.kind) {
    case K::ConnectTo: {
      trace(now, Channel::Orchestration, "signal", sig.source,
            {{"kind", "connect_to"}, {"target", sig.target}});
      Endpoint src = hosts_.count(sig.source) ? endpoint_of(sig.source)
                                              : make_external_endpoint(sig.source);
      handle_connect(src, sig.target, now);
      break;
    }
    case K::SocketActivity:
      apply(sig.source, {LifecycleEvent::Kind::AppActive}, now);
      break;
    case K::AllIdle:
      trace(now, Channel::Orchestration, "signal", sig.source, {{"kind", "all_idle"}});
      apply(sig.source, {LifecycleEvent::Kind::AppIdle}, now);
      break;
    case K::ProcessExit: {
      trace(now, Channel::Orchestration, "signal", sig.source, {{"kind", "process_exit"}});
      auto it = hosts_.find(sig.source);
      if (it != hosts_.end() && it->second.state == HostState::Running)
        reset_conns_of(sig.source, now);
      apply(sig.source, {LifecycleEvent::Kind::AppExited}, now);
      break;
    }
    case K::ExternalData:
      trace(now, Channel::Orchestration, "signal", sig.target.empty() ? sig.source : sig.target,
            {{"kind", "external_data"}});
      apply(sig.target.empty() ? sig.source : sig.target, {LifecycleEvent::Kind::AppActive}, now);
      break;
  }
}

void Orchestrator::forward(std::uint64_t conn_id, bool src_to_dst, std::uint64_t bytes,
                           TimeUs now) {
  ConnectionRecord* c = conns_.find(conn_id);
  if (!c) return;
  if (c->state != ConnState::Established) {
    // Sender observes a reset (peer suspended under Preemptible, faulted, ...).
    notifier_.connection_reset(*c, src_to_dst, !src_to_dst);
    return;
  }
  conns_.add_bytes(conn_id, src_to_dst, bytes, now);
  notifier_.data_delivered(*c, src_to_dst, bytes);
}

void Orchestrator::detach_conn_from_records(const ConnectionRecord& conn) {
  for (const Endpoint* ep : {&conn.src, &conn.dst}) {
    if (ep->external) continue;
    auto it = hosts_.find(ep->name);
    if (it == hosts_.end()) continue;
    HostRecord& rec = it->second;
    auto ext = std::find_if(rec.external_connections.begin(), rec.external_connections.end(),
                            [&](const ExternalConnRef& e) { return e.conn_id == conn.id; });
    if (ext != rec.external_connections.end()) {
      rec.external_connections.erase(ext);
    } else if (classify_external(conn, config_.network.subnet, ep->name) == ConnClass::Internal &&
               rec.open_connections > 0) {
      --rec.open_connections;
    }
  }
}

void Orchestrator::close_connection(std::uint64_t conn_id, bool closed_by_src, TimeUs now) {
  ConnectionRecord* c = conns_.find(conn_id);
  if (!c || c->state != ConnState::Established) return;
  detach_conn_from_records(*c);
  conns_.finish(conn_id, ConnState::Closed, now);
  const std::string& host = closed_by_src ? c->src.name : c->dst.name;
  trace(now, Channel::Orchestration, "conn_close", c->dst.external ? c->src.name : c->dst.name,
        {{"by", host}, {"conn", std::to_string(conn_id)}});
  notifier_.peer_closed(*c, closed_by_src);
}

void Orchestrator::on_start_completed(const std::string& host, int instance_id, TimeUs now) {
  auto it = hosts_.find(host);
  if (it == hosts_.end() || it->second.instance_id != instance_id) {
    trace(now, Channel::Orchestration, "stale_completion", host, {{"kind", "start_completed"}});
    return;
  }
  trace(now, Channel::Orchestration, "start_done", host, {});
  apply(host, {LifecycleEvent::Kind::StartCompleted}, now);
}

void Orchestrator::on_start_failed(const std::string& host, int instance_id,
                                   const std::string& reason, TimeUs now) {
  auto it = hosts_.find(host);
  if (it == hosts_.end() || it->second.instance_id != instance_id) {
    trace(now, Channel::Orchestration, "stale_completion", host, {{"kind", "start_failed"}});
    return;
  }
  trace(now, Channel::Orchestration, "start_fail", host, {{"reason", reason}});
  LifecycleEvent ev{LifecycleEvent::Kind::StartFailed};
  ev.reason = reason;
  apply(host, ev, now);
}

void Orchestrator::on_resume_completed(const std::string& host, int instance_id, TimeUs now) {
  auto it = hosts_.find(host);
  if (it == hosts_.end() || it->second.instance_id != instance_id) {
    trace(now, Channel::Orchestration, "stale_completion", host, {{"kind", "resume_completed"}});
    return;
  }
  trace(now, Channel::Orchestration, "resume_done", host, {});
  apply(host, {LifecycleEvent::Kind::ResumeCompleted}, now);
}

void Orchestrator::reset_conns_of(const std::string& host, TimeUs now) {
  // Peers observe connection-reset for every established connection.
  for (std::uint64_t id : conns_.connections_of(host)) {
    ConnectionRecord* c = conns_.find(id);
    if (c->state != ConnState::Established) continue;
    detach_conn_from_records(*c);
    conns_.finish(id, ConnState::Reset, now);
    trace(now, Channel::Orchestration, "conn_reset", host, {{"conn", std::to_string(id)}});
    bool host_is_src = !c->src.external && c->src.name == host;
    notifier_.connection_reset(*c, /*notify_src=*/!host_is_src, /*notify_dst=*/host_is_src);
  }
}

void Orchestrator::handle_fault(const std::string& host, TimeUs now, const std::string& cause) {
  auto it = hosts_.find(host);
  if (it != hosts_.end() &&
      (it->second.state == HostState::Running || it->second.state == HostState::Sleeping ||
       it->second.state == HostState::Resuming)) {
    reset_conns_of(host, now);
  }
  LifecycleEvent ev{LifecycleEvent::Kind::Fault};
  ev.reason = cause;
  if (it == hosts_.end()) {
    trace(now, Channel::Orchestration, "signal_dropped", "-",
          {{"kind", "fault"}, {"source", host}});
    return;
  }
  apply(host, ev, now);
}

void Orchestrator::admin_reset(const std::string& host, TimeUs now) {
  apply(host, {LifecycleEvent::Kind::AdminReset}, now);
}

void Orchestrator::apply(const std::string& host, const LifecycleEvent& ev, TimeUs now) {
  auto it = hosts_.find(host);
  if (it == hosts_.end()) return;
  int pre_instance = it->second.instance_id;
  StepResult step = apply_event(it->second, ev, now, params_for(host));
  it->second = std::move(step.record);
  execute_actions(host, step.actions, now, pre_instance);
}

void Orchestrator::execute_actions(const std::string& host, const std::vector<Action>& actions,
                                   TimeUs now, int pre_instance) {
  auto it = hosts_.find(host);
  assert(it != hosts_.end());
  const MappingRule* rule = resolve_function_type(host, config_);
  int inst = pre_instance;
  for (const Action& a : actions) {
    switch (a.kind) {
      case Action::Kind::StartInstance:
        inst = it->second.instance_id;
        sink_.emit(now, Channel::Orchestration, "start", host, inst,
                   {{"addr", format_addr(it->second.address)},
                    {"fn", rule ? rule->function_type : "?"}});
        backend_.start(rule ? rule->function_type : "?", host, it->second.address, inst);
        break;
      case Action::Kind::SuspendInstance:
        sink_.emit(now, Channel::Orchestration, "suspend", host, inst, {});
        backend_.suspend(host, inst);
        break;
      case Action::Kind::ResumeInstance:
        sink_.emit(now, Channel::Orchestration, "resume", host, inst, {});
        backend_.resume(host, inst);
        break;
      case Action::Kind::ReleaseInstance:
        sink_.emit(now, Channel::Orchestration, "release", host, inst, {});
        backend_.release(host, inst);
        break;
      case Action::Kind::ScheduleTimer:
        schedule_timer(host, a.timer, a.delay, now, inst);
        break;
      case Action::Kind::CancelTimer:
        cancel_timer(host, a.timer, now, inst);
        break;
      case Action::Kind::AdmitConnection:
        admit_conn(host, a.conn_id, now, inst);
        break;
      case Action::Kind::RejectConnection:
        reject_conn(host, a.conn_id, a.reason, now, inst);
        break;
      case Action::Kind::MarkExternalLost: {
        ConnectionRecord* c = conns_.find(a.conn_id);
        if (c && c->state == ConnState::Established) {
          conns_.finish(a.conn_id, ConnState::Lost, now);
          sink_.emit(now, Channel::Orchestration, "conn_lost", host, inst,
                     {{"conn", std::to_string(a.conn_id)}});
          bool host_is_src = !c->src.external && c->src.name == host;
          notifier_.connection_reset(*c, !host_is_src, host_is_src);
        }
        break;
      }
      case Action::Kind::EmitTrace:
        sink_.emit(now, Channel::Orchestration, a.trace_kind, host, inst, a.details);
        break;
    }
  }
}

void Orchestrator::admit_conn(const std::string& host, std::uint64_t conn_id, TimeUs now,
                              int inst) {
  ConnectionRecord* c = conns_.find(conn_id);
  if (!c || c->state != ConnState::Pending) {
    sink_.emit(now, Channel::Orchestration, "noop", host, inst,
               {{"conn", std::to_string(conn_id)}, {"event", "admit"}});
    return;
  }
  conns_.establish(conn_id, now);
  for (const Endpoint* ep : {&c->src, &c->dst}) {
    if (ep->external) continue;
    auto it = hosts_.find(ep->name);
    if (it == hosts_.end()) continue;
    switch (classify_external(*c, config_.network.subnet, ep->name)) {
      case ConnClass::Internal:
        ++it->second.open_connections;
        break;
      case ConnClass::ExternalActive:
        it->second.external_connections.push_back({conn_id, true});
        break;
      case ConnClass::ExternalPassive:
        it->second.external_connections.push_back({conn_id, false});
        break;
    }
  }
  sink_.emit(now, Channel::Orchestration, "admit", host, inst,
             {{"conn", std::to_string(conn_id)}});
  notifier_.inbound_accepted(*c);
  notifier_.connection_established(*c);
}

void Orchestrator::reject_conn(const std::string& host, std::uint64_t conn_id,
                               const std::string& reason, TimeUs now, int inst) {
  ConnectionRecord* c = conns_.find(conn_id);
  if (!c || c->state != ConnState::Pending) {
    sink_.emit(now, Channel::Orchestration, "noop", host, inst,
               {{"conn", std::to_string(conn_id)}, {"event", "reject"}});
    return;
  }
  conns_.finish(conn_id, ConnState::Reset, now);
  sink_.emit(now, Channel::Orchestration, "reject", host, inst,
             {{"conn", std::to_string(conn_id)}, {"reason", reason}});
  notifier_.connection_failed(*c, reason);
}

void Orchestrator::schedule_timer(const std::string& host, TimerKind kind, DurationUs delay,
                                  TimeUs now, int inst) {
  int k = static_cast<int>(kind);
  auto idx = timer_index_.find({host, k});
  if (idx != timer_index_.end()) {
    timers_.erase({idx->second, host, k});
    timer_index_.erase(idx);
  }
  TimeUs deadline = now + delay;
  timers_.insert({deadline, host, k});
  timer_index_[{host, k}] = deadline;
  sink_.emit(now, Channel::Orchestration, "timer_sched", host, inst,
             {{"at", std::to_string(deadline)}, {"kind", std::string(timer_kind_name(kind))}});
}

void Orchestrator::cancel_timer(const std::string& host, TimerKind kind, TimeUs now, int inst) {
  int k = static_cast<int>(kind);
  auto idx = timer_index_.find({host, k});
  if (idx == timer_index_.end()) return;
  timers_.erase({idx->second, host, k});
  timer_index_.erase(idx);
  sink_.emit(now, Channel::Orchestration, "timer_cancel", host, inst,
             {{"kind", std::string(timer_kind_name(kind))}});
}

std::optional<TimeUs> Orchestrator::next_deadline() const {
  if (timers_.empty()) return std::nullopt;
  return timers_.begin()->deadline;
}

void Orchestrator::tick(TimeUs now) {
  while (!timers_.empty() && timers_.begin()->deadline <= now) {
    TimerEntry e = *timers_.begin();
    timers_.erase(timers_.begin());
    timer_index_.erase({e.host, e.kind});
    TimerKind kind = static_cast<TimerKind>(e.kind);
    trace(now, Channel::Orchestration, "timer_fire", e.host,
          {{"kind", std::string(timer_kind_name(kind))}});
    LifecycleEvent::Kind ev = LifecycleEvent::Kind::ConnectTimeoutElapsed;
    switch (kind) {
      case TimerKind::ConnectTimeout: ev = LifecycleEvent::Kind::ConnectTimeoutElapsed; break;
      case TimerKind::IdleDebounce: ev = LifecycleEvent::Kind::IdleDebounceElapsed; break;
      case TimerKind::KeepWarm: ev = LifecycleEvent::Kind::KeepWarmTimer; break;
      case TimerKind::SleepTtl: ev = LifecycleEvent::Kind::SleepTtlExpired; break;
    }
    apply(e.host, {ev}, now);
  }
}

void Orchestrator::finish(TimeUs now) {
  trace(now, Channel::Orchestration, "run_end", "-", {});
}

std::string Orchestrator::consistency_error() const {
  for (const auto& [name, rec] : hosts_) {
    int established = conns_.established_internal_count(name, config_.network.subnet);
    if (rec.open_connections != established)
      return "host " + name + ": open_connections=" + std::to_string(rec.open_connections) +
             " but table has " + std::to_string(established);
    if (rec.state == HostState::Sleeping && rec.open_connections > 0)
      return "host " + name + " sleeping with open connections";
  }
  return {};
}

}  // namespace im
