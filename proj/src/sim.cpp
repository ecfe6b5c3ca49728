#include "im/sim.hpp"

#include <cassert>
#include <charconv>
#include <deque>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "im/orchestrator.hpp"

namespace im {

namespace {

std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  size_t e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::uint64_t need_u64(int line, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ScenarioError(line, "bad integer '" + v + "'");
  return out;
}

DurationUs need_dur(int line, const std::string& v) {
  auto d = parse_duration(v);
  if (!d) throw ScenarioError(line, "bad duration '" + v + "'");
  return *d;
}

}  // namespace

Scenario parse_scenario(std::string_view text) {
  Scenario scn;
  ScriptProgram* script = nullptr;
  std::vector<ScriptProgram::Instr>* handler = nullptr;
  bool in_stimuli = false;

  int line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string raw(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos
                                                                  : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;

    if (line.front() == '[') {
      if (line.back() != ']') throw ScenarioError(line_no, "unterminated section header");
      std::string inner = trim(line.substr(1, line.size() - 2));
      if (inner == "stimuli") {
        in_stimuli = true;
        script = nullptr;
        handler = nullptr;
      } else if (inner.starts_with("script ")) {
        std::string ft = trim(inner.substr(7));
        if (ft.empty()) throw ScenarioError(line_no, "[script] requires a function type");
        script = &scn.scripts[ft];
        handler = nullptr;
        in_stimuli = false;
      } else {
        throw ScenarioError(line_no, "unknown section '" + inner + "'");
      }
      continue;
    }

    if (in_stimuli) {
      auto toks = split_ws(line);
      if (toks.size() < 3 || toks[0] != "at")
        throw ScenarioError(line_no, "expected 'at <time> connect|fault <hostname>'");
      Stimulus st;
      st.at = need_dur(line_no, toks[1]);
      if (toks[2] == "connect") st.kind = Stimulus::Kind::Connect;
      else if (toks[2] == "fault") st.kind = Stimulus::Kind::Fault;
      else throw ScenarioError(line_no, "unknown stimulus '" + toks[2] + "'");
      if (toks.size() < 4) throw ScenarioError(line_no, "stimulus missing hostname");
      st.host = toks[3];
      size_t i = 4;
      while (i < toks.size()) {
        if (i + 1 >= toks.size())
          throw ScenarioError(line_no, "stimulus option '" + toks[i] + "' needs a value");
        if (toks[i] == "hold") {
          if (toks[i + 1] == "forever") st.hold = std::nullopt;
          else st.hold = need_dur(line_no, toks[i + 1]);
        } else if (toks[i] == "send") {
          st.send = need_u64(line_no, toks[i + 1]);
        } else {
          throw ScenarioError(line_no, "unknown stimulus option '" + toks[i] + "'");
        }
        i += 2;
      }
      scn.stimuli.push_back(std::move(st));
      continue;
    }

    if (!script) throw ScenarioError(line_no, "line outside any section");

    if (line.back() == ':') {
      std::string name = trim(line.substr(0, line.size() - 1));
      if (name == "on_start") handler = &script->on_start;
      else if (name == "on_connection") handler = &script->on_connection;
      else if (name == "on_data") handler = &script->on_data;
      else if (name == "on_timer") handler = &script->on_timer;
      else throw ScenarioError(line_no, "unknown handler '" + name + "'");
      continue;
    }

    if (!handler) throw ScenarioError(line_no, "primitive outside any handler");
    auto toks = split_ws(line);
    ScriptProgram::Instr in;
    using P = ScriptProgram::Prim;
    const std::string& op = toks[0];
    if (op == "connect") {
      if (toks.size() != 2) throw ScenarioError(line_no, "connect <hostname>");
      in.prim = P::Connect;
      in.arg = toks[1];
    } else if (op == "send" || op == "reply") {
      if (toks.size() != 2) throw ScenarioError(line_no, op + " <bytes>");
      in.prim = op == "send" ? P::Send : P::Reply;
      in.n = need_u64(line_no, toks[1]);
    } else if (op == "close") {
      in.prim = P::Close;
    } else if (op == "close_peer") {
      in.prim = P::ClosePeer;
    } else if (op == "sleep") {
      if (toks.size() != 2) throw ScenarioError(line_no, "sleep <duration>");
      in.prim = P::Sleep;
      in.dur = need_dur(line_no, toks[1]);
    } else if (op == "set_timer") {
      if (toks.size() != 2) throw ScenarioError(line_no, "set_timer <period>");
      in.prim = P::SetTimer;
      in.dur = need_dur(line_no, toks[1]);
    } else if (op == "exit") {
      in.prim = P::Exit;
    } else if (op == "declare_idle") {
      in.prim = P::DeclareIdle;
    } else {
      throw ScenarioError(line_no, "unknown primitive '" + op + "'");
    }
    handler->push_back(std::move(in));
  }
  return scn;
}

namespace {

struct ScriptError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Simulation final : public Backend, public EndpointNotifier {
 public:
  Simulation(const Config& config, const Scenario& scenario, std::uint64_t seed,
             std::optional<TimeUs> horizon)
      : config_(config), scenario_(scenario), horizon_(horizon), rng_(seed) {
    orch_.emplace(config_, *this, *this, sink_, 0);
  }

  std::string run() {
    for (size_t i = 0; i < scenario_.stimuli.size(); ++i) {
      const Stimulus& st = scenario_.stimuli[i];
      schedule(st.at, [this, &st, i] {
        if (st.kind == Stimulus::Kind::Fault) {
          orch_->handle_fault(st.host, now_, "injected");
          return;
        }
        Endpoint src = orch_->make_external_endpoint("ext-" + std::to_string(i));
        std::uint64_t conn = orch_->handle_connect(src, st.host, now_);
        external_clients_[conn] = ExternalClient{st.hold, st.send};
      });
    }

    try {
      while (!queue_.empty()) {
        auto it = queue_.begin();
        TimeUs t = it->first.first;
        if (horizon_ && t > *horizon_) {
          now_ = *horizon_;
          break;
        }
        auto fn = std::move(it->second);
        queue_.erase(it);
        now_ = t;
        fn();
        orch_->tick(now_);
        pump_timers();
        std::string err = orch_->consistency_error();
        if (!err.empty()) throw std::logic_error("consistency violation: " + err);
      }
    } catch (const ScriptError& e) {
      sink_.emit(now_, Channel::Orchestration, "script_error", "-", 0,
                 {{"msg", sanitize(e.what())}});
    }
    orch_->finish(now_);
    return sink_.dump();
  }

  // ---- Backend ----

  void start(const std::string& fn, const std::string& host, std::uint32_t, int instance_id) override {
    schedule(now_ + config_.timing.cold_start_latency, [this, fn, host, instance_id] {
      spawn_instance(fn, host, instance_id);
      orch_->on_start_completed(host, instance_id, now_);
    });
    if (config_.limits.max_lifetime > 0) {
      schedule(now_ + config_.limits.max_lifetime, [this, host, instance_id] {
        const HostRecord* rec = orch_->host(host);
        if (!rec || rec->instance_id != instance_id) return;
        if (rec->state == HostState::Running || rec->state == HostState::Sleeping ||
            rec->state == HostState::Resuming)
          orch_->handle_fault(host, now_, "max_lifetime");
      });
    }
  }

  void suspend(const std::string& host, int) override {
    auto it = instances_.find(host);
    if (it != instances_.end()) it->second.frozen = true;
  }

  void resume(const std::string& host, int instance_id) override {
    schedule(now_ + config_.timing.resume_latency, [this, host, instance_id] {
      orch_->on_resume_completed(host, instance_id, now_);
      auto it = instances_.find(host);
      if (it == instances_.end() || it->second.instance_id != instance_id) return;
      it->second.frozen = false;
      if (it->second.timer && it->second.timer->overdue) {
        it->second.timer->overdue = false;
        fire_app_timer(host, instance_id);
      }
    });
  }

  void release(const std::string& host, int) override { instances_.erase(host); }

  // ---- EndpointNotifier ----
  // Callbacks only schedule; all application reactions run as queue events so
  // the event loop stays the single serialization point.

  void connection_established(const ConnectionRecord& conn) override {
    std::uint64_t id = conn.id;
    Endpoint src = conn.src;
    schedule(now_ + delivery_latency(), [this, id, src] {
      app_record(src, "connected", {{"conn", std::to_string(id)}});
      if (src.external) {
        on_external_established(id);
        return;
      }
      auto it = instances_.find(src.name);
      if (it == instances_.end()) return;
      it->second.open_set.insert(id);
      it->second.idle_reported = false;
      auto blocked = it->second.blocked_connects.find(id);
      if (blocked != it->second.blocked_connects.end()) {
        Task task = std::move(blocked->second);
        it->second.blocked_connects.erase(blocked);
        task.current_conn = id;
        run_task(src.name, it->second.instance_id, std::move(task));
      }
    });
  }

  void inbound_accepted(const ConnectionRecord& conn) override {
    if (conn.dst.external) return;
    std::uint64_t id = conn.id;
    std::string host = conn.dst.name;
    schedule(now_, [this, id, host] {
      auto it = instances_.find(host);
      if (it == instances_.end() || it->second.frozen) return;
      it->second.open_set.insert(id);
      it->second.idle_reported = false;
      SocketOp op{SocketOp::Kind::Accept};
      op.conn_id = id;
      orch_->on_socket_op(host, op, now_);
      spawn_handler(host, it->second.instance_id, it->second.prog->on_connection, id);
      maybe_idle(host);
    });
  }

  void connection_failed(const ConnectionRecord& conn, const std::string& reason) override {
    std::uint64_t id = conn.id;
    Endpoint src = conn.src;
    schedule(now_ + delivery_latency(), [this, id, src, reason] {
      app_record(src, "connection-failed", {{"conn", std::to_string(id)}, {"reason", reason}});
      if (src.external) return;
      auto it = instances_.find(src.name);
      if (it == instances_.end()) return;
      auto blocked = it->second.blocked_connects.find(id);
      if (blocked != it->second.blocked_connects.end()) {
        // The connect failed; the task is abandoned.
        it->second.blocked_connects.erase(blocked);
        --it->second.active_tasks;
        maybe_idle(src.name);
      }
    });
  }

  void connection_reset(const ConnectionRecord& conn, bool notify_src, bool notify_dst) override {
    std::uint64_t id = conn.id;
    for (auto [ep, notify] : {std::pair{conn.src, notify_src}, {conn.dst, notify_dst}}) {
      if (!notify) continue;
      schedule(now_ + delivery_latency(), [this, id, ep] {
        app_record(ep, "connection-reset", {{"conn", std::to_string(id)}});
        drop_from_open_set(ep, id);
      });
    }
  }

  void peer_closed(const ConnectionRecord& conn, bool closed_by_src) override {
    std::uint64_t id = conn.id;
    Endpoint peer = closed_by_src ? conn.dst : conn.src;
    Endpoint closer = closed_by_src ? conn.src : conn.dst;
    schedule(now_, [this, id, closer] { drop_from_open_set(closer, id); });
    schedule(now_ + delivery_latency(), [this, id, peer] { drop_from_open_set(peer, id); });
  }

  void data_delivered(const ConnectionRecord& conn, bool to_dst, std::uint64_t n) override {
    std::uint64_t id = conn.id;
    Endpoint receiver = to_dst ? conn.dst : conn.src;
    schedule(now_ + delivery_latency(), [this, id, receiver, n] {
      app_record(receiver, "data", {{"conn", std::to_string(id)}, {"n", std::to_string(n)}});
      if (receiver.external) return;
      auto it = instances_.find(receiver.name);
      if (it == instances_.end() || it->second.frozen) return;
      it->second.idle_reported = false;
      SocketOp op{SocketOp::Kind::Recv};
      op.conn_id = id;
      op.bytes = n;
      orch_->on_socket_op(receiver.name, op, now_);
      spawn_handler(receiver.name, it->second.instance_id, it->second.prog->on_data, id);
      maybe_idle(receiver.name);
    });
  }

 private:
  struct Task {
    const std::vector<ScriptProgram::Instr>* code = nullptr;
    size_t pc = 0;
    std::uint64_t current_conn = 0;  // last successful connect by this task
    std::uint64_t trigger_conn = 0;  // connection that activated the handler
  };

  struct AppTimer {
    DurationUs period = 0;
    bool overdue = false;  // fired while frozen; delivered on resume
    std::uint64_t generation = 0;
  };

  struct Instance {
    int instance_id = 0;
    const ScriptProgram* prog = nullptr;
    bool frozen = false;
    bool declared_idle = false;
    bool idle_reported = false;  // all_idle sent; re-armed by any new activity
    int active_tasks = 0;
    std::set<std::uint64_t> open_set;  // established connections, either role
    std::map<std::uint64_t, Task> blocked_connects;
    std::optional<AppTimer> timer;
  };

  struct ExternalClient {
    std::optional<DurationUs> hold;
    std::uint64_t send = 0;
  };

  static std::string sanitize(std::string s) {
    for (char& c : s)
      if (c == ' ' || c == '=' || c == '\n') c = '_';
    return s;
  }

  void schedule(TimeUs at, std::function<void()> fn) {
    queue_.emplace(std::make_pair(at, next_event_++), std::move(fn));
  }

  // The orchestrator's timers fire from tick(); make sure the event loop
  // wakes up at the earliest pending deadline.
  void pump_timers() {
    while (!tick_wakeups_.empty() && *tick_wakeups_.begin() <= now_)
      tick_wakeups_.erase(tick_wakeups_.begin());
    auto nd = orch_->next_deadline();
    if (nd && !tick_wakeups_.count(*nd)) {
      tick_wakeups_.insert(*nd);
      schedule(*nd, [] {});
    }
  }

  DurationUs delivery_latency() {
    DurationUs lat = config_.network.rtt;
    if (config_.network.jitter > 0)
      lat += static_cast<DurationUs>(rng_() % static_cast<std::uint64_t>(config_.network.jitter + 1));
    return lat;
  }

  void app_record(const Endpoint& ep, std::string kind,
                  std::vector<std::pair<std::string, std::string>> details) {
    int inst = 0;
    if (!ep.external) {
      const HostRecord* rec = orch_->host(ep.name);
      if (rec) inst = rec->instance_id;
    }
    sink_.emit(now_, Channel::AppVisible, std::move(kind), ep.name, inst, std::move(details));
  }

  void spawn_instance(const std::string& fn, const std::string& host, int instance_id) {
    Instance inst;
    inst.instance_id = instance_id;
    auto sit = scenario_.scripts.find(fn);
    inst.prog = sit == scenario_.scripts.end() ? &empty_program_ : &sit->second;
    instances_[host] = std::move(inst);
    // Every host implicitly listens for inbound connections.
    schedule(now_, [this, host, instance_id] {
      auto it = instances_.find(host);
      if (it == instances_.end() || it->second.instance_id != instance_id) return;
      SocketOp op{SocketOp::Kind::Listen};
      op.port = 1;
      orch_->on_socket_op(host, op, now_);
      spawn_handler(host, instance_id, it->second.prog->on_start, 0);
    });
  }

  void spawn_handler(const std::string& host, int instance_id,
                     const std::vector<ScriptProgram::Instr>& code, std::uint64_t trigger) {
    if (code.empty()) return;
    auto it = instances_.find(host);
    if (it == instances_.end() || it->second.instance_id != instance_id) return;
    it->second.declared_idle = false;
    it->second.idle_reported = false;
    ++it->second.active_tasks;
    // Activation means the process is runnable.
    orch_->report_signal({AllocationSignal::Kind::SocketActivity, host, "", now_}, now_);
    Task t;
    t.code = &code;
    t.trigger_conn = trigger;
    run_task(host, instance_id, std::move(t));
  }

  void run_task(const std::string& host, int instance_id, Task task) {
    using P = ScriptProgram::Prim;
    while (true) {
      auto it = instances_.find(host);
      if (it == instances_.end() || it->second.instance_id != instance_id) return;
      Instance& inst = it->second;
      if (task.pc >= task.code->size()) {
        --inst.active_tasks;
        maybe_idle(host);
        return;
      }
      const ScriptProgram::Instr& in = (*task.code)[task.pc++];
      switch (in.prim) {
        case P::Connect: {
          SocketOp op{SocketOp::Kind::Connect};
          op.dst = in.arg;
          orch_->on_socket_op(host, op, now_);
          // Find the connection this produced; block the task on it.
          std::uint64_t found = 0;
          for (const auto& [id, c] : orch_->connections().all())
            if (!c.src.external && c.src.name == host && c.created_at == now_ && id > found &&
                (c.dst.name == in.arg))
              found = id;
          if (found == 0) {
            // Rejected synchronously with no record (malformed destination).
            --inst.active_tasks;
            maybe_idle(host);
            return;
          }
          const ConnectionRecord* c = orch_->connections().find(found);
          if (c->state == ConnState::Established) {
            // External destinations establish immediately; keep going once the
            // confirmation arrives (handled by connection_established).
          }
          inst.blocked_connects.emplace(found, std::move(task));
          return;
        }
        case P::Send:
        case P::Reply: {
          std::uint64_t conn = in.prim == P::Send ? task.current_conn : task.trigger_conn;
          if (conn == 0) throw ScriptError("send/reply with no connection");
          SocketOp op{SocketOp::Kind::Send};
          op.conn_id = conn;
          op.bytes = in.n;
          orch_->on_socket_op(host, op, now_);
          break;
        }
        case P::Close:
        case P::ClosePeer: {
          std::uint64_t conn = in.prim == P::Close ? task.current_conn : task.trigger_conn;
          if (conn == 0) throw ScriptError("close with no connection");
          SocketOp op{SocketOp::Kind::Close};
          op.conn_id = conn;
          orch_->on_socket_op(host, op, now_);
          break;
        }
        case P::Sleep: {
          schedule(now_ + in.dur, [this, host, instance_id, task = std::move(task)]() mutable {
            auto iit = instances_.find(host);
            if (iit == instances_.end() || iit->second.instance_id != instance_id) return;
            run_task(host, instance_id, std::move(task));
          });
          return;
        }
        case P::SetTimer: {
          inst.timer = AppTimer{in.dur, false, inst.timer ? inst.timer->generation + 1 : 1};
          schedule_app_timer(host, instance_id, inst.timer->generation, in.dur);
          break;
        }
        case P::Exit: {
          orch_->report_signal({AllocationSignal::Kind::ProcessExit, host, "", now_}, now_);
          return;  // instance is gone; do not touch it
        }
        case P::DeclareIdle: {
          if (inst.active_tasks > 1)
            throw ScriptError("declare_idle while other handlers are runnable");
          if (task.pc < task.code->size())
            throw ScriptError("declare_idle must be the last instruction of a handler");
          inst.declared_idle = true;
          --inst.active_tasks;
          maybe_idle(host);
          return;
        }
      }
    }
  }

  void schedule_app_timer(const std::string& host, int instance_id, std::uint64_t generation,
                          DurationUs delay) {
    schedule(now_ + delay, [this, host, instance_id, generation] {
      auto it = instances_.find(host);
      if (it == instances_.end() || it->second.instance_id != instance_id) return;
      Instance& inst = it->second;
      if (!inst.timer || inst.timer->generation != generation) return;
      if (inst.frozen) {
        inst.timer->overdue = true;  // delivered on next resume
        return;
      }
      fire_app_timer(host, instance_id);
    });
  }

  void fire_app_timer(const std::string& host, int instance_id) {
    auto it = instances_.find(host);
    if (it == instances_.end() || it->second.instance_id != instance_id) return;
    Instance& inst = it->second;
    if (!inst.timer) return;
    schedule_app_timer(host, instance_id, inst.timer->generation, inst.timer->period);
    spawn_handler(host, instance_id, inst.prog->on_timer, 0);
  }

  void maybe_idle(const std::string& host) {
    auto it = instances_.find(host);
    if (it == instances_.end()) return;
    Instance& inst = it->second;
    if (inst.declared_idle && inst.active_tasks == 0 && !inst.frozen && !inst.idle_reported) {
      inst.idle_reported = true;
      orch_->report_signal({AllocationSignal::Kind::AllIdle, host, "", now_}, now_);
    }
  }

  void drop_from_open_set(const Endpoint& ep, std::uint64_t id) {
    if (ep.external) return;
    auto it = instances_.find(ep.name);
    if (it == instances_.end()) return;
    if (it->second.open_set.erase(id) > 0) maybe_idle(ep.name);
  }

  void on_external_established(std::uint64_t conn_id) {
    auto it = external_clients_.find(conn_id);
    if (it == external_clients_.end()) return;
    ExternalClient client = it->second;
    if (client.send > 0) {
      schedule(now_, [this, conn_id, n = client.send] {
        orch_->forward(conn_id, /*src_to_dst=*/true, n, now_);
      });
    }
    if (client.hold) {
      schedule(now_ + *client.hold, [this, conn_id] {
        const ConnectionRecord* c = orch_->connections().find(conn_id);
        if (c && c->state == ConnState::Established)
          orch_->close_connection(conn_id, /*closed_by_src=*/true, now_);
      });
    }
  }

  const Config& config_;
  const Scenario& scenario_;
  std::optional<TimeUs> horizon_;
  std::mt19937_64 rng_;
  TraceSink sink_;
  std::optional<Orchestrator> orch_;
  std::map<std::pair<TimeUs, std::uint64_t>, std::function<void()>> queue_;
  std::set<TimeUs> tick_wakeups_;
  std::uint64_t next_event_ = 0;
  TimeUs now_ = 0;
  std::map<std::string, Instance> instances_;
  std::map<std::uint64_t, ExternalClient> external_clients_;
  ScriptProgram empty_program_;
};

}  // namespace

std::string run_scenario(const Config& config, const Scenario& scenario, std::uint64_t seed,
                         std::optional<TimeUs> horizon) {
  Simulation sim(config, scenario, seed, horizon);
  return sim.run();
}

}  // namespace im
