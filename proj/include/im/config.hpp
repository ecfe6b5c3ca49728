#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "im/time.hpp"

namespace im {

struct ExternalConnPolicy {
  enum class Kind { KeepRunning, Preemptible, WarmFor };
  Kind kind = Kind::KeepRunning;
  DurationUs warm_for = 0;
  // When set, only connections where the host was the active endpoint are
  // preemptible; passive-endpoint external connections pin the host.
  bool distinguish_endpoint_role = false;

  bool operator==(const ExternalConnPolicy&) const = default;
};

std::string policy_name(const ExternalConnPolicy& p);

struct MappingRule {
  std::string pattern;        // glob: literal chars plus '*'
  std::string function_type;
  int max_instances = 1;      // cap on distinct hostnames bound to this rule
  std::optional<ExternalConnPolicy> external_policy;
};

struct TimingParams {
  DurationUs cold_start_latency = 200 * kMillisecond;
  DurationUs resume_latency = 20 * kMillisecond;
  DurationUs idle_debounce = 500 * kMillisecond;
  DurationUs keep_warm_period = 60 * kSecond;
  DurationUs sleep_ttl = 10 * kMinute;
  DurationUs connect_timeout = 5 * kSecond;
};

struct SubnetDesc {
  std::uint32_t base = 0x0A010000;  // 10.1.0.0
  int prefix_len = 16;

  std::uint64_t host_capacity() const;          // excludes network + broadcast
  bool contains(std::uint32_t addr) const;
};

std::string format_addr(std::uint32_t addr);
std::optional<std::uint32_t> parse_addr(const std::string& dotted);

struct NetworkParams {
  SubnetDesc subnet;
  DurationUs rtt = 1 * kMillisecond;   // applied to every cross-host delivery
  DurationUs jitter = 0;               // max extra seeded latency; 0 = off
};

struct ResourceLimits {
  int memory_mb = 10240;
  int vcpu = 6;
  DurationUs max_lifetime = 15 * kMinute;  // 0 disables the cap
  int max_restarts = 3;
};

struct ProcessSpec {
  std::string function_type;
  std::string command;  // template; {hostname} {port} {portmap} substituted
  std::vector<std::pair<std::string, std::string>> env;
  std::string workdir;
  DurationUs readiness_timeout = 10 * kSecond;
};

struct Config {
  std::vector<MappingRule> rules;
  NetworkParams network;
  TimingParams timing;
  ResourceLimits limits;
  ExternalConnPolicy default_external_policy;
  std::map<std::string, ProcessSpec> processes;

  const ExternalConnPolicy& policy_for(const MappingRule& rule) const {
    return rule.external_policy ? *rule.external_policy : default_external_policy;
  }
};

struct ConfigError : std::runtime_error {
  int line;
  ConfigError(int line_, const std::string& msg)
      : std::runtime_error("config:" + std::to_string(line_) + ": " + msg), line(line_) {}
};

Config parse_config(std::string_view text);   // throws ConfigError
std::string serialize_config(const Config&);  // round-trips through parse_config

// '*' matches any sequence (including empty); everything else is literal.
bool glob_match(std::string_view pattern, std::string_view name);

// First rule in declaration order whose glob matches the full hostname.
const MappingRule* resolve_function_type(const std::string& hostname, const Config& config);

// Stable hostname -> virtual address assignment. First resolution allocates
// the next free address in the subnet; later ones return the same address.
class AddressRegistry {
 public:
  explicit AddressRegistry(SubnetDesc subnet) : subnet_(subnet) {}

  std::optional<std::uint32_t> assign(const std::string& hostname);  // nullopt = exhausted
  std::optional<std::uint32_t> lookup(const std::string& hostname) const;
  const std::map<std::string, std::uint32_t>& assignments() const { return by_host_; }

 private:
  SubnetDesc subnet_;
  std::map<std::string, std::uint32_t> by_host_;
  std::uint64_t next_offset_ = 1;  // offset 0 is the network address
};

}  // namespace im
