#include "im/gateway.hpp"

#include <cassert>

namespace im {

std::string_view conn_state_name(ConnState s) {
  switch (s) {
    case ConnState::Pending: return "pending";
    case ConnState::Established: return "established";
    case ConnState::Closed: return "closed";
    case ConnState::Reset: return "reset";
    case ConnState::Lost: return "lost";
  }
  return "?";
}

std::string_view conn_class_name(ConnClass c) {
  switch (c) {
    case ConnClass::Internal: return "internal";
    case ConnClass::ExternalActive: return "external_active";
    case ConnClass::ExternalPassive: return "external_passive";
  }
  return "?";
}

std::string_view signal_kind_name(AllocationSignal::Kind k) {
  using K = AllocationSignal::Kind;
  switch (k) {
    case K::ConnectTo: return "connect_to";
    case K::SocketActivity: return "socket_activity";
    case K::AllIdle: return "all_idle";
    case K::ProcessExit: return "process_exit";
    case K::ExternalData: return "external_data";
  }
  return "?";
}

ConnClass classify_external(const ConnectionRecord& conn, const SubnetDesc& subnet,
                            const std::string& host) {
  bool host_is_src = conn.src.name == host && !conn.src.external;
  const Endpoint& peer = host_is_src ? conn.dst : conn.src;
  if (subnet.contains(peer.address) && !peer.external) return ConnClass::Internal;
  return host_is_src ? ConnClass::ExternalActive : ConnClass::ExternalPassive;
}

std::uint64_t ConnectionTable::create(Endpoint src, Endpoint dst, TimeUs now) {
  std::uint64_t id = next_id_++;
  ConnectionRecord rec;
  rec.id = id;
  rec.src = std::move(src);
  rec.dst = std::move(dst);
  rec.created_at = now;
  rec.last_activity_at = now;
  conns_.emplace(id, std::move(rec));
  return id;
}

ConnectionRecord* ConnectionTable::find(std::uint64_t id) {
  auto it = conns_.find(id);
  return it == conns_.end() ? nullptr : &it->second;
}

const ConnectionRecord* ConnectionTable::find(std::uint64_t id) const {
  auto it = conns_.find(id);
  return it == conns_.end() ? nullptr : &it->second;
}

void ConnectionTable::establish(std::uint64_t id, TimeUs now) {
  ConnectionRecord* c = find(id);
  assert(c && c->state == ConnState::Pending);
  c->state = ConnState::Established;
  c->last_activity_at = now;
}

void ConnectionTable::finish(std::uint64_t id, ConnState final_state, TimeUs now) {
  ConnectionRecord* c = find(id);
  assert(c);
  if (c->state == ConnState::Pending) {
    assert(final_state == ConnState::Reset);
  }
  c->state = final_state;
  c->last_activity_at = now;
}

void ConnectionTable::add_bytes(std::uint64_t id, bool src_to_dst, std::uint64_t n, TimeUs now) {
  ConnectionRecord* c = find(id);
  assert(c && c->state == ConnState::Established);
  (src_to_dst ? c->bytes_src_to_dst : c->bytes_dst_to_src) += n;
  c->last_activity_at = now;
}

int ConnectionTable::established_internal_count(const std::string& host,
                                                const SubnetDesc& subnet) const {
  int n = 0;
  for (const auto& [id, c] : conns_) {
    if (c.state != ConnState::Established) continue;
    bool involves = (!c.src.external && c.src.name == host) || (!c.dst.external && c.dst.name == host);
    if (involves && classify_external(c, subnet, host) == ConnClass::Internal) ++n;
  }
  return n;
}

std::vector<std::uint64_t> ConnectionTable::connections_of(const std::string& host) const {
  std::vector<std::uint64_t> out;
  for (const auto& [id, c] : conns_)
    if ((!c.src.external && c.src.name == host) || (!c.dst.external && c.dst.name == host))
      out.push_back(id);
  return out;
}

}  // namespace im
