#include "im/process_backend.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

namespace im {

namespace {

// Every runtime-owned socket is CLOEXEC so spawned host processes cannot
// inherit a duplicate of a proxied connection and keep it alive past the
// client's close.
int make_listener(int* port_out) {
  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) return -1;
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(fd, 64) < 0) {
    ::close(fd);
    return -1;
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  *port_out = ntohs(addr.sin_port);
  return fd;
}

// Reserve a free loopback port for a child process to bind. Racy in theory;
// fine for a local runtime.
int pick_free_port() {
  int port = 0;
  int fd = make_listener(&port);
  if (fd >= 0) ::close(fd);
  return port;
}

int dial(int port) {
  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) return -1;
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    return -1;
  }
  return fd;
}

std::vector<std::string> substitute_argv(const std::string& tmpl, const std::string& hostname,
                                         int port, const std::string& portmap) {
  std::vector<std::string> argv;
  std::istringstream is(tmpl);
  std::string tok;
  while (is >> tok) {
    auto sub = [&](const std::string& key, const std::string& val) {
      for (size_t p; (p = tok.find(key)) != std::string::npos;)
        tok.replace(p, key.size(), val);
    };
    sub("{hostname}", hostname);
    sub("{port}", std::to_string(port));
    sub("{portmap}", portmap);
    argv.push_back(tok);
  }
  return argv;
}

}  // namespace

struct ProcessRuntime::Proc {
  pid_t pid = -1;
  std::string hostname;
  std::string function_type;
  int instance_id = 0;
  int backend_port = 0;
  std::atomic<bool> released{false};  // expected to die; reaper stays quiet
  std::atomic<bool> exited{false};
  std::atomic<int> exit_status{0};
};

struct ProcessRuntime::ProxyConn {
  std::uint64_t conn_id = 0;
  std::string hostname;
  std::atomic<int> client_fd{-1};
  std::atomic<int> backend_fd{-1};
  std::atomic<bool> closing{false};
};

class ProcessRuntime::BackendImpl : public Backend {
 public:
  explicit BackendImpl(ProcessRuntime& rt) : rt_(rt) {}

  void start(const std::string& function_type, const std::string& hostname, std::uint32_t,
             int instance_id) override {
    rt_.spawn_process(function_type, hostname, instance_id);
  }

  void suspend(const std::string& hostname, int) override {
    if (auto p = rt_.proc_of(hostname)) ::kill(p->pid, SIGSTOP);
  }

  void resume(const std::string& hostname, int instance_id) override {
    auto p = rt_.proc_of(hostname);
    if (p) ::kill(p->pid, SIGCONT);
    // A continued process is immediately serviceable; complete on the next
    // loop iteration so the current action batch finishes first.
    rt_.post([this, hostname, instance_id] {
      rt_.orch_->on_resume_completed(hostname, instance_id, rt_.now_us());
    });
  }

  void release(const std::string& hostname, int) override { rt_.terminate_proc(hostname); }

 private:
  ProcessRuntime& rt_;
};

class ProcessRuntime::NotifierImpl : public EndpointNotifier {
 public:
  explicit NotifierImpl(ProcessRuntime& rt) : rt_(rt) {}

  // Set around handle_connect so outcomes delivered before the connection id
  // is known still find their socket.
  std::shared_ptr<ProxyConn> intake;

  void connection_established(const ConnectionRecord& conn) override {
    auto proxy = claim(conn.id);
    if (!proxy) return;
    rt_.start_backend_dial(proxy);
  }

  void inbound_accepted(const ConnectionRecord&) override {}  // the dial covers it

  void connection_failed(const ConnectionRecord& conn, const std::string&) override {
    if (auto proxy = claim(conn.id)) rt_.close_proxy(proxy);
  }

  void connection_reset(const ConnectionRecord& conn, bool, bool) override {
    if (auto proxy = rt_.proxy_of(conn.id)) rt_.close_proxy(proxy);
  }

  void peer_closed(const ConnectionRecord& conn, bool) override {
    if (auto proxy = rt_.proxy_of(conn.id)) rt_.close_proxy(proxy);
  }

  void data_delivered(const ConnectionRecord&, bool, std::uint64_t) override {
    // Bytes move through the pump threads directly.
  }

 private:
  std::shared_ptr<ProxyConn> claim(std::uint64_t id) {
    if (auto proxy = rt_.proxy_of(id)) return proxy;
    if (intake && intake->conn_id == 0) {
      intake->conn_id = id;
      rt_.register_proxy(intake);
      return intake;
    }
    return nullptr;
  }

  ProcessRuntime& rt_;
};

ProcessRuntime::ProcessRuntime(Config config, TraceSink& sink, std::string portmap_path)
    : config_(std::move(config)),
      sink_(sink),
      portmap_path_(std::move(portmap_path)),
      epoch_(std::chrono::steady_clock::now()) {
  backend_ = std::make_unique<BackendImpl>(*this);
  notifier_ = std::make_unique<NotifierImpl>(*this);
  orch_ = std::make_unique<Orchestrator>(config_, *backend_, *notifier_, sink_);
}

ProcessRuntime::~ProcessRuntime() { shutdown(); }

TimeUs ProcessRuntime::now_us() const {
  return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() -
                                                               epoch_)
      .count();
}

bool ProcessRuntime::start() {
  // One public listener per literal hostname in the mapping rules; wildcard
  // patterns have no enumerable hostnames to listen for.
  for (const MappingRule& rule : config_.rules) {
    if (rule.pattern.find('*') != std::string::npos) continue;
    int port = 0;
    int fd = make_listener(&port);
    if (fd < 0) {
      std::cerr << "cannot bind gateway listener for " << rule.pattern << ": "
                << std::strerror(errno) << "\n";
      return false;
    }
    gateway_ports_[rule.pattern] = port;
    listen_fds_[rule.pattern] = fd;
  }
  if (gateway_ports_.empty()) {
    std::cerr << "no literal hostnames in config; nothing to listen for\n";
    return false;
  }

  std::ofstream pm(portmap_path_);
  for (const auto& [host, port] : gateway_ports_) pm << host << ' ' << port << '\n';
  pm.close();
  if (!pm) {
    std::cerr << "cannot write port map " << portmap_path_ << "\n";
    return false;
  }

  loop_thread_ = std::thread([this] { loop_main(); });
  reaper_thread_ = std::thread([this] { reaper_main(); });
  for (const auto& [host, fd] : listen_fds_)
    accept_threads_.emplace_back([this, host = host, fd = fd] { accept_loop(host, fd); });
  return true;
}

int ProcessRuntime::gateway_port(const std::string& hostname) const {
  auto it = gateway_ports_.find(hostname);
  return it == gateway_ports_.end() ? 0 : it->second;
}

pid_t ProcessRuntime::pid_of(const std::string& hostname) const {
  std::lock_guard lk(pmu_);
  auto it = procs_.find(hostname);
  return it == procs_.end() ? 0 : it->second->pid;
}

std::vector<pid_t> ProcessRuntime::all_spawned_pids() const {
  std::lock_guard lk(pmu_);
  return spawned_pids_;
}

void ProcessRuntime::post(std::function<void()> fn) {
  {
    std::lock_guard lk(mu_);
    inbox_.push_back(std::move(fn));
  }
  cv_.notify_all();
}

void ProcessRuntime::call(std::function<void(Orchestrator&)> fn) {
  std::mutex done_mu;
  std::condition_variable done_cv;
  bool done = false;
  post([&] {
    fn(*orch_);
    std::lock_guard lk(done_mu);
    done = true;
    done_cv.notify_all();
  });
  std::unique_lock lk(done_mu);
  done_cv.wait(lk, [&] { return done; });
}

void ProcessRuntime::loop_main() {
  std::unique_lock lk(mu_);
  while (true) {
    if (!inbox_.empty()) {
      auto fn = std::move(inbox_.front());
      inbox_.pop_front();
      lk.unlock();
      fn();
      lk.lock();
      continue;
    }
    if (stopping_) break;
    std::optional<TimeUs> deadline = orch_->next_deadline();
    if (deadline) {
      auto when = epoch_ + std::chrono::microseconds(*deadline);
      if (cv_.wait_until(lk, when) == std::cv_status::timeout && inbox_.empty() && !stopping_) {
        lk.unlock();
        orch_->tick(now_us());
        lk.lock();
      }
    } else {
      cv_.wait(lk);
    }
  }
}

void ProcessRuntime::run() {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [this] { return shutdown_requested_; });
}

void ProcessRuntime::shutdown() {
  {
    std::lock_guard lk(mu_);
    if (shutdown_requested_ && torn_down_) return;
    shutdown_requested_ = true;
  }
  cv_.notify_all();
  teardown();
}

void ProcessRuntime::teardown() {
  {
    std::lock_guard lk(mu_);
    if (torn_down_) return;
    torn_down_ = true;
  }

  // Unblock and retire the accept threads.
  for (auto& [host, fd] : listen_fds_) {
    ::shutdown(fd, SHUT_RDWR);
    ::close(fd);
  }
  for (auto& t : accept_threads_) t.join();
  accept_threads_.clear();
  listen_fds_.clear();

  if (loop_thread_.joinable()) {
    call([this](Orchestrator& o) { o.finish(now_us()); });
    {
      std::lock_guard lk(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    loop_thread_.join();
  }

  kill_all_processes();
  reaper_stop_ = true;
  if (reaper_thread_.joinable()) reaper_thread_.join();

  // Drop every proxy so pump threads see EOF and exit.
  {
    std::lock_guard lk(pmu_);
    for (auto& [id, proxy] : proxies_) close_proxy_fds(*proxy);
    proxies_.clear();
  }
  {
    std::lock_guard lk(pmu_);
    for (auto& t : worker_threads_) t.detach();  // all are past their blocking point
    worker_threads_.clear();
  }
}

void ProcessRuntime::kill_all_processes() {
  std::vector<pid_t> live;
  {
    std::lock_guard lk(pmu_);
    for (auto& [host, p] : procs_) {
      p->released = true;
      live.push_back(p->pid);
    }
    procs_.clear();
  }
  for (pid_t pid : live) {
    ::kill(pid, SIGCONT);
    ::kill(pid, SIGTERM);
  }
  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
  for (pid_t pid : live) {
    while (::kill(pid, 0) == 0 && std::chrono::steady_clock::now() < deadline)
      ::usleep(10000);
    if (::kill(pid, 0) == 0) ::kill(pid, SIGKILL);
  }
}

void ProcessRuntime::spawn_process(const std::string& fn_type, const std::string& hostname,
                                   int instance_id) {
  auto spec_it = config_.processes.find(fn_type);
  if (spec_it == config_.processes.end()) {
    post([this, hostname, instance_id] {
      orch_->on_start_failed(hostname, instance_id, "spawn", now_us());
    });
    return;
  }
  const ProcessSpec& spec = spec_it->second;

  int port = pick_free_port();
  std::vector<std::string> argv = substitute_argv(spec.command, hostname, port, portmap_path_);
  if (argv.empty()) {
    post([this, hostname, instance_id] {
      orch_->on_start_failed(hostname, instance_id, "spawn", now_us());
    });
    return;
  }

  pid_t pid = ::fork();
  if (pid == 0) {
    for (const auto& [k, v] : spec.env) ::setenv(k.c_str(), v.c_str(), 1);
    if (!spec.workdir.empty() && ::chdir(spec.workdir.c_str()) != 0) _exit(127);
    std::vector<char*> cargv;
    for (auto& a : argv) cargv.push_back(a.data());
    cargv.push_back(nullptr);
    ::execvp(cargv[0], cargv.data());
    _exit(127);
  }
  if (pid < 0) {
    post([this, hostname, instance_id] {
      orch_->on_start_failed(hostname, instance_id, "spawn", now_us());
    });
    return;
  }

  auto proc = std::make_shared<Proc>();
  proc->pid = pid;
  proc->hostname = hostname;
  proc->function_type = fn_type;
  proc->instance_id = instance_id;
  proc->backend_port = port;
  {
    std::lock_guard lk(pmu_);
    procs_[hostname] = proc;
    by_pid_[pid] = proc;
    spawned_pids_.push_back(pid);
  }

  // Readiness: the instance is up once it has bound its advertised port.
  DurationUs timeout = spec.readiness_timeout;
  add_worker([this, proc, timeout] {
    auto give_up = std::chrono::steady_clock::now() + std::chrono::microseconds(timeout);
    while (!reaper_stop_ && !proc->exited) {
      int fd = dial(proc->backend_port);
      if (fd >= 0) {
        ::close(fd);
        post([this, proc] {
          orch_->on_start_completed(proc->hostname, proc->instance_id, now_us());
        });
        return;
      }
      if (std::chrono::steady_clock::now() >= give_up) {
        proc->released = true;
        ::kill(proc->pid, SIGKILL);
        {
          std::lock_guard lk(pmu_);
          auto it = procs_.find(proc->hostname);
          if (it != procs_.end() && it->second == proc) procs_.erase(it);
        }
        post([this, proc] {
          orch_->on_start_failed(proc->hostname, proc->instance_id, "timeout", now_us());
        });
        return;
      }
      ::usleep(10000);
    }
  });
}

std::shared_ptr<ProcessRuntime::Proc> ProcessRuntime::proc_of(const std::string& hostname) {
  std::lock_guard lk(pmu_);
  auto it = procs_.find(hostname);
  return it == procs_.end() ? nullptr : it->second;
}

void ProcessRuntime::terminate_proc(const std::string& hostname) {
  std::shared_ptr<Proc> p;
  {
    std::lock_guard lk(pmu_);
    auto it = procs_.find(hostname);
    if (it == procs_.end()) return;
    p = it->second;
    procs_.erase(it);
  }
  p->released = true;
  ::kill(p->pid, SIGCONT);
  ::kill(p->pid, SIGTERM);
}

void ProcessRuntime::reaper_main() {
  while (true) {
    int status = 0;
    pid_t pid = ::waitpid(-1, &status, WNOHANG);
    if (pid > 0) {
      std::shared_ptr<Proc> proc;
      {
        std::lock_guard lk(pmu_);
        auto it = by_pid_.find(pid);
        if (it != by_pid_.end()) {
          proc = it->second;
          by_pid_.erase(it);
        }
      }
      if (proc) {
        proc->exit_status = status;
        proc->exited = true;
        if (!proc->released) {
          {
            std::lock_guard lk(pmu_);
            auto it = procs_.find(proc->hostname);
            if (it != procs_.end() && it->second == proc) procs_.erase(it);
          }
          post([this, proc, status] {
            const HostRecord* rec = orch_->host(proc->hostname);
            if (!rec || rec->instance_id != proc->instance_id) return;
            TimeUs now = now_us();
            if (rec->state == HostState::Starting) {
              orch_->on_start_failed(proc->hostname, proc->instance_id, "exit", now);
            } else if (WIFEXITED(status) && WEXITSTATUS(status) == 0) {
              orch_->report_signal(
                  {AllocationSignal::Kind::ProcessExit, proc->hostname, "", now}, now);
            } else {
              orch_->handle_fault(proc->hostname, now, "exit");
            }
            maybe_idle_all();
          });
        }
      }
      continue;
    }
    if (reaper_stop_) {
      bool any;
      {
        std::lock_guard lk(pmu_);
        any = !by_pid_.empty();
      }
      if (!any || (pid < 0 && errno == ECHILD)) break;
    }
    ::usleep(20000);
  }
}

void ProcessRuntime::accept_loop(std::string hostname, int listen_fd) {
  for (;;) {
    int client = ::accept4(listen_fd, nullptr, nullptr, SOCK_CLOEXEC);
    if (client < 0) {
      if (errno == EINTR) continue;
      return;  // listener closed during teardown
    }
    int label = ++ext_counter_;
    post([this, hostname, client, label] {
      auto proxy = std::make_shared<ProxyConn>();
      proxy->hostname = hostname;
      proxy->client_fd = client;
      notifier_->intake = proxy;
      Endpoint src = orch_->make_external_endpoint("ext-" + std::to_string(label));
      std::uint64_t id = orch_->handle_connect(src, hostname, now_us());
      if (notifier_->intake) {
        // Outcome still pending (host starting/resuming); park under its id.
        if (notifier_->intake->conn_id == 0) {
          notifier_->intake->conn_id = id;
          register_proxy(notifier_->intake);
        }
        notifier_->intake = nullptr;
      }
    });
  }
}

std::shared_ptr<ProcessRuntime::ProxyConn> ProcessRuntime::proxy_of(std::uint64_t id) {
  std::lock_guard lk(pmu_);
  auto it = proxies_.find(id);
  return it == proxies_.end() ? nullptr : it->second;
}

void ProcessRuntime::register_proxy(std::shared_ptr<ProxyConn> proxy) {
  std::lock_guard lk(pmu_);
  proxies_[proxy->conn_id] = proxy;
}

void ProcessRuntime::close_proxy_fds(ProxyConn& proxy) {
  for (auto* fd : {&proxy.client_fd, &proxy.backend_fd}) {
    int v = fd->exchange(-1);
    if (v >= 0) {
      ::shutdown(v, SHUT_RDWR);
      ::close(v);
    }
  }
}

void ProcessRuntime::close_proxy(std::shared_ptr<ProxyConn> proxy) {
  proxy->closing = true;
  close_proxy_fds(*proxy);
  std::lock_guard lk(pmu_);
  proxies_.erase(proxy->conn_id);
}

void ProcessRuntime::start_backend_dial(std::shared_ptr<ProxyConn> proxy) {
  auto proc = proc_of(proxy->hostname);
  if (!proc) {
    post([this, proxy] {
      orch_->close_connection(proxy->conn_id, false, now_us());
      close_proxy(proxy);
      maybe_idle(proxy->hostname);
    });
    return;
  }
  int port = proc->backend_port;
  add_worker([this, proxy, port] {
    int fd = dial(port);
    if (fd < 0) {
      post([this, proxy] {
        orch_->close_connection(proxy->conn_id, false, now_us());
        close_proxy(proxy);
        maybe_idle(proxy->hostname);
      });
      return;
    }
    proxy->backend_fd = fd;
    if (proxy->closing) {
      close_proxy_fds(*proxy);
      return;
    }
    add_worker([this, proxy] { pump(proxy, true); });
    add_worker([this, proxy] { pump(proxy, false); });
  });
}

void ProcessRuntime::pump(std::shared_ptr<ProxyConn> proxy, bool client_to_backend) {
  char buf[16384];
  for (;;) {
    int from = client_to_backend ? proxy->client_fd.load() : proxy->backend_fd.load();
    int to = client_to_backend ? proxy->backend_fd.load() : proxy->client_fd.load();
    if (from < 0 || to < 0) return;
    ssize_t n = ::read(from, buf, sizeof buf);
    if (n <= 0) break;
    ssize_t off = 0;
    while (off < n) {
      ssize_t w = ::write(to, buf + off, n - off);
      if (w <= 0) return;
      off += w;
    }
    std::uint64_t bytes = static_cast<std::uint64_t>(n);
    post([this, proxy, client_to_backend, bytes] {
      TimeUs now = now_us();
      orch_->forward(proxy->conn_id, client_to_backend, bytes, now);
      AllocationSignal::Kind kind = client_to_backend ? AllocationSignal::Kind::ExternalData
                                                      : AllocationSignal::Kind::SocketActivity;
      orch_->report_signal({kind, proxy->hostname, "", now}, now);
    });
  }
  if (proxy->closing.exchange(true)) return;
  post([this, proxy, client_to_backend] {
    orch_->close_connection(proxy->conn_id, client_to_backend, now_us());
    close_proxy(proxy);
    maybe_idle(proxy->hostname);
  });
}

// Processes cannot declare idleness themselves; the gateway infers it from
// the proxied connection count.
void ProcessRuntime::maybe_idle(const std::string& hostname) {
  const HostRecord* rec = orch_->host(hostname);
  if (!rec || rec->state != HostState::Running) return;
  if (rec->open_connections != 0 || !rec->external_connections.empty()) return;
  TimeUs now = now_us();
  orch_->report_signal({AllocationSignal::Kind::AllIdle, hostname, "", now}, now);
}

void ProcessRuntime::maybe_idle_all() {
  std::vector<std::string> hosts;
  for (const auto& [name, rec] : orch_->registry()) hosts.push_back(name);
  for (const auto& h : hosts) maybe_idle(h);
}

void ProcessRuntime::add_worker(std::function<void()> fn) {
  std::lock_guard lk(pmu_);
  worker_threads_.emplace_back(std::move(fn));
}

}  // namespace im
