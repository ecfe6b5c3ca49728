#include "im/config.hpp"

#include <charconv>
#include <set>
#include <sstream>

namespace im {

std::uint64_t SubnetDesc::host_capacity() const {
  if (prefix_len < 0 || prefix_len > 30) return 0;
  return (std::uint64_t{1} << (32 - prefix_len)) - 2;
}

bool SubnetDesc::contains(std::uint32_t addr) const {
  std::uint32_t mask = prefix_len == 0 ? 0 : ~std::uint32_t{0} << (32 - prefix_len);
  return (addr & mask) == (base & mask);
}

std::string format_addr(std::uint32_t a) {
  std::ostringstream os;
  os << ((a >> 24) & 0xFF) << '.' << ((a >> 16) & 0xFF) << '.' << ((a >> 8) & 0xFF) << '.'
     << (a & 0xFF);
  return os.str();
}

std::optional<std::uint32_t> parse_addr(const std::string& dotted) {
  std::uint32_t out = 0;
  size_t pos = 0;
  for (int i = 0; i < 4; ++i) {
    size_t dot = i < 3 ? dotted.find('.', pos) : dotted.size();
    if (dot == std::string::npos) return std::nullopt;
    int octet = -1;
    auto [p, ec] = std::from_chars(dotted.data() + pos, dotted.data() + dot, octet);
    if (ec != std::errc{} || p != dotted.data() + dot || octet < 0 || octet > 255)
      return std::nullopt;
    out = (out << 8) | static_cast<std::uint32_t>(octet);
    pos = dot + 1;
  }
  return out;
}

std::string policy_name(const ExternalConnPolicy& p) {
  switch (p.kind) {
    case ExternalConnPolicy::Kind::KeepRunning: return "keep_running";
    case ExternalConnPolicy::Kind::Preemptible: return "preemptible";
    case ExternalConnPolicy::Kind::WarmFor: return "warm_for(" + format_duration(p.warm_for) + ")";
  }
  return "?";
}

bool glob_match(std::string_view pattern, std::string_view name) {
  // Iterative '*' backtracking matcher.
  size_t p = 0, n = 0;
  size_t star = std::string_view::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == name[n])) {
      ++p, ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

const MappingRule* resolve_function_type(const std::string& hostname, const Config& config) {
  for (const auto& rule : config.rules)
    if (glob_match(rule.pattern, hostname)) return &rule;
  return nullptr;
}

std::optional<std::uint32_t> AddressRegistry::assign(const std::string& hostname) {
  if (auto it = by_host_.find(hostname); it != by_host_.end()) return it->second;
  if (next_offset_ > subnet_.host_capacity()) return std::nullopt;
  std::uint32_t addr = subnet_.base + static_cast<std::uint32_t>(next_offset_++);
  by_host_.emplace(hostname, addr);
  return addr;
}

std::optional<std::uint32_t> AddressRegistry::lookup(const std::string& hostname) const {
  auto it = by_host_.find(hostname);
  if (it == by_host_.end()) return std::nullopt;
  return it->second;
}

namespace {

struct Line {
  int no;
  std::string text;
};

std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  size_t e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

DurationUs need_duration(int line, const std::string& key, const std::string& value) {
  auto d = parse_duration(value);
  if (!d) throw ConfigError(line, "bad duration for '" + key + "': " + value);
  return *d;
}

int need_int(int line, const std::string& key, const std::string& value) {
  int out = 0;
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || p != value.data() + value.size())
    throw ConfigError(line, "bad integer for '" + key + "': " + value);
  return out;
}

ExternalConnPolicy::Kind need_policy_kind(int line, const std::string& value,
                                          DurationUs* warm_for) {
  if (value == "keep_running") return ExternalConnPolicy::Kind::KeepRunning;
  if (value == "preemptible") return ExternalConnPolicy::Kind::Preemptible;
  if (value.starts_with("warm_for(") && value.ends_with(")")) {
    *warm_for = need_duration(line, "external_policy", value.substr(9, value.size() - 10));
    return ExternalConnPolicy::Kind::WarmFor;
  }
  throw ConfigError(line, "unknown external policy '" + value + "'");
}

bool need_bool(int line, const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError(line, "bad boolean for '" + key + "': " + value);
}

}  // namespace

Config parse_config(std::string_view text) {
  Config cfg;
  std::string section;     // current [section] header, first word
  std::string section_arg; // second word, e.g. function type
  int section_line = 0;
  MappingRule rule;
  bool rule_open = false;
  ProcessSpec proc;
  bool rules_section_seen = false;

  auto flush_rule = [&] {
    if (!rule_open) return;
    if (rule.pattern.empty()) throw ConfigError(section_line, "rule is missing 'pattern'");
    if (rule.function_type.empty())
      throw ConfigError(section_line, "rule is missing 'function_type'");
    if (rule.max_instances <= 0)
      throw ConfigError(section_line, "rule 'max_instances' must be positive");
    cfg.rules.push_back(rule);
    rule = MappingRule{};
    rule_open = false;
  };
  auto flush_proc = [&] {
    if (proc.function_type.empty()) return;
    if (proc.command.empty())
      throw ConfigError(section_line, "process spec is missing 'command'");
    cfg.processes[proc.function_type] = proc;
    proc = ProcessSpec{};
  };

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
      if (line.back() != ']') throw ConfigError(line_no, "unterminated section header");
      flush_rule();
      flush_proc();
      std::string inner = trim(line.substr(1, line.size() - 2));
      size_t sp = inner.find(' ');
      section = sp == std::string::npos ? inner : inner.substr(0, sp);
      section_arg = sp == std::string::npos ? "" : trim(inner.substr(sp + 1));
      section_line = line_no;
      if (section == "rule") {
        rule_open = true;
        rules_section_seen = true;
      } else if (section == "process") {
        if (section_arg.empty())
          throw ConfigError(line_no, "[process] requires a function type");
        proc.function_type = section_arg;
      } else if (section != "timing" && section != "network" && section != "limits" &&
                 section != "defaults") {
        throw ConfigError(line_no, "unknown section '" + section + "'");
      }
      continue;
    }

    size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line_no, "expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(line_no, "empty key");
    if (section.empty()) throw ConfigError(line_no, "key outside any section");

    if (section == "rule") {
      if (key == "pattern") {
        if (value.empty()) throw ConfigError(line_no, "pattern must be non-empty");
        rule.pattern = value;
      } else if (key == "function_type") {
        rule.function_type = value;
      } else if (key == "max_instances") {
        rule.max_instances = need_int(line_no, key, value);
      } else if (key == "external_policy") {
        ExternalConnPolicy p = rule.external_policy.value_or(ExternalConnPolicy{});
        p.kind = need_policy_kind(line_no, value, &p.warm_for);
        rule.external_policy = p;
      } else if (key == "distinguish_endpoint_role") {
        ExternalConnPolicy p = rule.external_policy.value_or(ExternalConnPolicy{});
        p.distinguish_endpoint_role = need_bool(line_no, key, value);
        rule.external_policy = p;
      } else {
        throw ConfigError(line_no, "unknown rule key '" + key + "'");
      }
    } else if (section == "timing") {
      if (key == "cold_start_latency") cfg.timing.cold_start_latency = need_duration(line_no, key, value);
      else if (key == "resume_latency") cfg.timing.resume_latency = need_duration(line_no, key, value);
      else if (key == "idle_debounce") cfg.timing.idle_debounce = need_duration(line_no, key, value);
      else if (key == "keep_warm_period") cfg.timing.keep_warm_period = need_duration(line_no, key, value);
      else if (key == "sleep_ttl") cfg.timing.sleep_ttl = need_duration(line_no, key, value);
      else if (key == "connect_timeout") cfg.timing.connect_timeout = need_duration(line_no, key, value);
      else throw ConfigError(line_no, "unknown timing key '" + key + "'");
    } else if (section == "network") {
      if (key == "subnet") {
        size_t slash = value.find('/');
        if (slash == std::string::npos) throw ConfigError(line_no, "subnet must be addr/prefix");
        auto base = parse_addr(value.substr(0, slash));
        if (!base) throw ConfigError(line_no, "bad subnet base address");
        int prefix = need_int(line_no, key, value.substr(slash + 1));
        if (prefix < 8 || prefix > 30) throw ConfigError(line_no, "subnet prefix must be in [8,30]");
        cfg.network.subnet = SubnetDesc{*base, prefix};
      } else if (key == "rtt") {
        cfg.network.rtt = need_duration(line_no, key, value);
      } else if (key == "jitter") {
        cfg.network.jitter = need_duration(line_no, key, value);
      } else {
        throw ConfigError(line_no, "unknown network key '" + key + "'");
      }
    } else if (section == "limits") {
      if (key == "memory_mb") cfg.limits.memory_mb = need_int(line_no, key, value);
      else if (key == "vcpu") cfg.limits.vcpu = need_int(line_no, key, value);
      else if (key == "max_lifetime") cfg.limits.max_lifetime = value == "off" ? 0 : need_duration(line_no, key, value);
      else if (key == "max_restarts") cfg.limits.max_restarts = need_int(line_no, key, value);
      else throw ConfigError(line_no, "unknown limits key '" + key + "'");
    } else if (section == "defaults") {
      if (key == "external_policy")
        cfg.default_external_policy.kind =
            need_policy_kind(line_no, value, &cfg.default_external_policy.warm_for);
      else if (key == "distinguish_endpoint_role")
        cfg.default_external_policy.distinguish_endpoint_role = need_bool(line_no, key, value);
      else throw ConfigError(line_no, "unknown defaults key '" + key + "'");
    } else if (section == "process") {
      if (key == "command") proc.command = value;
      else if (key == "env") {
        size_t e = value.find('=');
        if (e == std::string::npos) throw ConfigError(line_no, "env entries are NAME=VALUE");
        proc.env.emplace_back(value.substr(0, e), value.substr(e + 1));
      } else if (key == "workdir") proc.workdir = value;
      else if (key == "readiness_timeout") proc.readiness_timeout = need_duration(line_no, key, value);
      else throw ConfigError(line_no, "unknown process key '" + key + "'");
    }
  }
  flush_rule();
  flush_proc();

  // Validation.
  if (cfg.rules.empty())
    throw ConfigError(rules_section_seen ? section_line : line_no, "rules non-empty");
  std::set<std::string> patterns;
  std::uint64_t total_instances = 0;
  for (const auto& r : cfg.rules) {
    if (!patterns.insert(r.pattern).second)
      throw ConfigError(0, "duplicate rule pattern '" + r.pattern + "'");
    if (r.external_policy && r.external_policy->kind == ExternalConnPolicy::Kind::WarmFor &&
        r.external_policy->warm_for <= 0)
      throw ConfigError(0, "warm_for duration must be positive");
    total_instances += static_cast<std::uint64_t>(r.max_instances);
  }
  const TimingParams& t = cfg.timing;
  for (auto [name, v] : {std::pair<const char*, DurationUs>{"cold_start_latency", t.cold_start_latency},
                         {"resume_latency", t.resume_latency},
                         {"idle_debounce", t.idle_debounce},
                         {"keep_warm_period", t.keep_warm_period},
                         {"sleep_ttl", t.sleep_ttl},
                         {"connect_timeout", t.connect_timeout}})
    if (v <= 0) throw ConfigError(0, std::string("timing '") + name + "' must be strictly positive");
  if (t.resume_latency >= t.cold_start_latency)
    throw ConfigError(0, "resume_latency must be less than cold_start_latency");
  if (t.keep_warm_period >= t.sleep_ttl)
    throw ConfigError(0, "keep_warm_period must be less than sleep_ttl");
  if (cfg.default_external_policy.kind == ExternalConnPolicy::Kind::WarmFor &&
      cfg.default_external_policy.warm_for <= 0)
    throw ConfigError(0, "warm_for duration must be positive");
  if (cfg.network.subnet.host_capacity() < total_instances)
    throw ConfigError(0, "subnet too small for configured max instances");
  if (cfg.limits.memory_mb <= 0 || cfg.limits.memory_mb > 10240)
    throw ConfigError(0, "memory_mb must be in (0, 10240]");
  if (cfg.limits.vcpu <= 0 || cfg.limits.vcpu > 6)
    throw ConfigError(0, "vcpu must be in (0, 6]");
  if (cfg.limits.max_restarts < 0) throw ConfigError(0, "max_restarts must be non-negative");
  return cfg;
}

std::string serialize_config(const Config& cfg) {
  std::ostringstream os;
  for (const auto& r : cfg.rules) {
    os << "[rule]\n"
       << "pattern = " << r.pattern << "\n"
       << "function_type = " << r.function_type << "\n"
       << "max_instances = " << r.max_instances << "\n";
    if (r.external_policy) {
      os << "external_policy = " << policy_name(*r.external_policy) << "\n"
         << "distinguish_endpoint_role = "
         << (r.external_policy->distinguish_endpoint_role ? "true" : "false") << "\n";
    }
  }
  const TimingParams& t = cfg.timing;
  os << "[timing]\n"
     << "cold_start_latency = " << format_duration(t.cold_start_latency) << "\n"
     << "resume_latency = " << format_duration(t.resume_latency) << "\n"
     << "idle_debounce = " << format_duration(t.idle_debounce) << "\n"
     << "keep_warm_period = " << format_duration(t.keep_warm_period) << "\n"
     << "sleep_ttl = " << format_duration(t.sleep_ttl) << "\n"
     << "connect_timeout = " << format_duration(t.connect_timeout) << "\n";
  os << "[network]\n"
     << "subnet = " << format_addr(cfg.network.subnet.base) << "/" << cfg.network.subnet.prefix_len
     << "\n"
     << "rtt = " << format_duration(cfg.network.rtt) << "\n";
  if (cfg.network.jitter > 0) os << "jitter = " << format_duration(cfg.network.jitter) << "\n";
  os << "[limits]\n"
     << "memory_mb = " << cfg.limits.memory_mb << "\n"
     << "vcpu = " << cfg.limits.vcpu << "\n"
     << "max_lifetime = "
     << (cfg.limits.max_lifetime == 0 ? std::string("off") : format_duration(cfg.limits.max_lifetime))
     << "\n"
     << "max_restarts = " << cfg.limits.max_restarts << "\n";
  os << "[defaults]\n"
     << "external_policy = " << policy_name(cfg.default_external_policy) << "\n"
     << "distinguish_endpoint_role = "
     << (cfg.default_external_policy.distinguish_endpoint_role ? "true" : "false") << "\n";
  for (const auto& [ft, p] : cfg.processes) {
    os << "[process " << ft << "]\n"
       << "command = " << p.command << "\n";
    for (const auto& [k, v] : p.env) os << "env = " << k << "=" << v << "\n";
    if (!p.workdir.empty()) os << "workdir = " << p.workdir << "\n";
    os << "readiness_timeout = " << format_duration(p.readiness_timeout) << "\n";
  }
  return os.str();
}

}  // namespace im
