#pragma once

#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "im/time.hpp"

namespace im {

enum class Channel { Orchestration, AppVisible };

std::string_view channel_name(Channel c);

// One line of the canonical trace. Serialization is bit-exact: fixed field
// order, detail keys sorted ascending, so byte comparison equals semantic
// comparison.
struct TraceRecord {
  TimeUs time_us = 0;
  std::uint64_t seq = 0;
  Channel channel = Channel::Orchestration;
  std::string kind;
  std::string host;
  int instance = 0;
  std::vector<std::pair<std::string, std::string>> details;  // sorted by key

  bool operator==(const TraceRecord&) const = default;
};

struct TraceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// `t=<int>us seq=<int> ch=<orch|app> kind=<ident> host=<name> inst=<int> <k=v ...>\n`
std::string serialize(const TraceRecord& rec);
TraceRecord parse_record(std::string_view line);  // throws TraceError
std::vector<TraceRecord> parse_trace(std::string_view text);

// Collects records, assigns sequence numbers and enforces (time, seq)
// monotonicity. Optionally streams each record to an ostream as it is
// emitted; IM_TRACE_UNBUFFERED=1 forces a flush per record.
class TraceSink {
 public:
  TraceSink();

  void stream_to(std::ostream* out) { out_ = out; }

  const TraceRecord& emit(TimeUs time, Channel ch, std::string kind,
                          std::string host, int instance,
                          std::vector<std::pair<std::string, std::string>> details = {});

  const std::vector<TraceRecord>& records() const { return records_; }
  std::string dump() const;

 private:
  std::vector<TraceRecord> records_;
  std::uint64_t next_seq_ = 0;
  TimeUs last_time_ = 0;
  std::ostream* out_ = nullptr;
  bool unbuffered_ = false;
};

}  // namespace im
