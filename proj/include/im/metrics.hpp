#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "im/trace.hpp"

namespace im {

struct MetricsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Admission latency histogram bucket edges (fixed): 0, 1ms, 10ms, 50ms,
// 100ms, 200ms, 500ms, 1s, +inf -> 8 buckets.
inline constexpr std::array<TimeUs, 8> kAdmissionBucketUpperEdges = {
    1 * kMillisecond,  10 * kMillisecond,  50 * kMillisecond, 100 * kMillisecond,
    200 * kMillisecond, 500 * kMillisecond, 1 * kSecond,       INT64_MAX};

struct HostMetrics {
  int cold_starts = 0;
  int warm_resumes = 0;
  int suspensions = 0;
  int faults = 0;
  TimeUs running_us = 0;
  TimeUs sleeping_us = 0;

  bool operator==(const HostMetrics&) const = default;
};

struct MetricsReport {
  std::map<std::string, HostMetrics> per_host;
  TimeUs makespan_us = 0;
  TimeUs total_running_host_us = 0;
  TimeUs always_on_baseline_us = 0;  // num_known_hosts * makespan
  double savings_ratio = 0.0;        // 1 - running / baseline, in [0, 1]
  std::array<std::uint64_t, 8> admission_histogram{};

  bool operator==(const MetricsReport&) const = default;
};

// All counters are derived solely from the trace. The trace must be complete
// (its last record is run_end); a truncated trace is an error naming the
// last record seen.
MetricsReport compute_metrics(const std::vector<TraceRecord>& trace);

std::string format_metrics(const MetricsReport& report);

}  // namespace im
