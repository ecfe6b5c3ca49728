#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "im/config.hpp"
#include "im/time.hpp"

namespace im {

struct Endpoint {
  bool external = false;
  std::string name;          // hostname, or a label for external endpoints
  std::uint32_t address = 0; // virtual address; external endpoints lie outside the subnet

  bool operator==(const Endpoint&) const = default;
};

enum class ConnState { Pending, Established, Closed, Reset, Lost };
std::string_view conn_state_name(ConnState s);

// src initiated the connection (active role); dst accepted (passive role).
// Roles are fixed at creation.
struct ConnectionRecord {
  std::uint64_t id = 0;
  Endpoint src;
  Endpoint dst;
  ConnState state = ConnState::Pending;
  std::uint64_t bytes_src_to_dst = 0;
  std::uint64_t bytes_dst_to_src = 0;
  TimeUs created_at = 0;
  TimeUs last_activity_at = 0;
};

enum class ConnClass { Internal, ExternalActive, ExternalPassive };
std::string_view conn_class_name(ConnClass c);

// How `host` sees this connection: internal if the peer's address is inside
// the virtual subnet, otherwise external with the host's endpoint role.
ConnClass classify_external(const ConnectionRecord& conn, const SubnetDesc& subnet,
                            const std::string& host);

// Socket control operations as intercepted from application processes.
struct SocketOp {
  enum class Kind { Connect, Listen, Accept, Close, Send, Recv };
  Kind kind;
  std::uint64_t conn_id = 0;
  std::string dst;      // Connect
  int port = 0;         // Listen
  std::uint64_t bytes = 0;
};

struct AllocationSignal {
  enum class Kind { ConnectTo, SocketActivity, AllIdle, ProcessExit, ExternalData };
  Kind kind;
  std::string source;  // instance hostname (or external label for ConnectTo)
  std::string target;  // ConnectTo destination hostname
  TimeUs timestamp = 0;
};

std::string_view signal_kind_name(AllocationSignal::Kind k);

// Tracks every connection plus per-instance socket state. Pure bookkeeping;
// the orchestrator drives all transitions.
class ConnectionTable {
 public:
  std::uint64_t create(Endpoint src, Endpoint dst, TimeUs now);
  ConnectionRecord* find(std::uint64_t id);
  const ConnectionRecord* find(std::uint64_t id) const;

  void establish(std::uint64_t id, TimeUs now);
  // Pending->Reset (failed admission) or Established->{Closed,Reset,Lost}.
  void finish(std::uint64_t id, ConnState final_state, TimeUs now);
  void add_bytes(std::uint64_t id, bool src_to_dst, std::uint64_t n, TimeUs now);

  int established_internal_count(const std::string& host, const SubnetDesc& subnet) const;
  std::vector<std::uint64_t> connections_of(const std::string& host) const;
  const std::map<std::uint64_t, ConnectionRecord>& all() const { return conns_; }

 private:
  std::map<std::uint64_t, ConnectionRecord> conns_;
  std::uint64_t next_id_ = 1;
};

}  // namespace im
