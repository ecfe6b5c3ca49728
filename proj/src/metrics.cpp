#include "im/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace im {

namespace {

const std::string* detail(const TraceRecord& r, std::string_view key) {
  for (const auto& [k, v] : r.details)
    if (k == key) return &v;
  return nullptr;
}

}  // namespace

MetricsReport compute_metrics(const std::vector<TraceRecord>& trace) {
  if (trace.empty()) throw MetricsError("empty trace");
  const TraceRecord& last = trace.back();
  if (last.kind != "run_end")
    throw MetricsError("truncated trace: last record is '" + serialize(last) + "'");

  MetricsReport rep;
  rep.makespan_us = last.time_us;

  std::map<std::string, TimeUs> running_since;
  std::map<std::string, TimeUs> sleeping_since;
  std::map<std::string, TimeUs> connect_time;  // conn id (as string) -> request time

  for (const TraceRecord& r : trace) {
    if (r.channel != Channel::Orchestration || r.host == "-") continue;
    HostMetrics& hm = rep.per_host[r.host];
    if (r.kind == "start") {
      ++hm.cold_starts;
    } else if (r.kind == "resume_done") {
      ++hm.warm_resumes;
    } else if (r.kind == "suspend") {
      ++hm.suspensions;
    } else if (r.kind == "state") {
      const std::string* from = detail(r, "from");
      const std::string* to = detail(r, "to");
      if (!from || !to) throw MetricsError("state record without from/to");
      if (*to == "failed") ++hm.faults;
      if (*to == "running") running_since[r.host] = r.time_us;
      if (*from == "running") {
        auto it = running_since.find(r.host);
        if (it != running_since.end()) {
          hm.running_us += r.time_us - it->second;
          running_since.erase(it);
        }
      }
      if (*to == "sleeping") sleeping_since[r.host] = r.time_us;
      if (*from == "sleeping") {
        auto it = sleeping_since.find(r.host);
        if (it != sleeping_since.end()) {
          hm.sleeping_us += r.time_us - it->second;
          sleeping_since.erase(it);
        }
      }
    } else if (r.kind == "connect") {
      if (const std::string* conn = detail(r, "conn")) connect_time[r.host + "/" + *conn] = r.time_us;
    } else if (r.kind == "admit") {
      if (const std::string* conn = detail(r, "conn")) {
        auto it = connect_time.find(r.host + "/" + *conn);
        if (it != connect_time.end()) {
          TimeUs lat = r.time_us - it->second;
          connect_time.erase(it);
          for (size_t b = 0; b < kAdmissionBucketUpperEdges.size(); ++b) {
            if (lat < kAdmissionBucketUpperEdges[b]) {
              ++rep.admission_histogram[b];
              break;
            }
          }
        }
      }
    }
  }

  // Close intervals still open at run end.
  for (const auto& [host, since] : running_since)
    rep.per_host[host].running_us += rep.makespan_us - since;
  for (const auto& [host, since] : sleeping_since)
    rep.per_host[host].sleeping_us += rep.makespan_us - since;

  for (const auto& [host, hm] : rep.per_host) rep.total_running_host_us += hm.running_us;
  rep.always_on_baseline_us =
      static_cast<TimeUs>(rep.per_host.size()) * rep.makespan_us;
  rep.savings_ratio =
      rep.always_on_baseline_us > 0
          ? 1.0 - static_cast<double>(rep.total_running_host_us) /
                      static_cast<double>(rep.always_on_baseline_us)
          : 0.0;
  return rep;
}

std::string format_metrics(const MetricsReport& rep) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  os << "makespan_s " << rep.makespan_us / 1e6 << "\n";
  for (const auto& [host, hm] : rep.per_host) {
    os << "host " << host << " cold_starts=" << hm.cold_starts
       << " warm_resumes=" << hm.warm_resumes << " suspensions=" << hm.suspensions
       << " faults=" << hm.faults << " running_s=" << hm.running_us / 1e6
       << " sleeping_s=" << hm.sleeping_us / 1e6 << "\n";
  }
  os << "total_running_host_s " << rep.total_running_host_us / 1e6 << "\n";
  os << "always_on_baseline_host_s " << rep.always_on_baseline_us / 1e6 << "\n";
  os << "savings_ratio " << rep.savings_ratio << "\n";
  os << "admission_latency_histogram";
  for (std::uint64_t n : rep.admission_histogram) os << ' ' << n;
  os << "\n";
  return os.str();
}

}  // namespace im
