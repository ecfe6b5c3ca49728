#include "im/trace.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <sstream>

namespace im {

std::optional<DurationUs> parse_duration(const std::string& text) {
  size_t i = 0;
  while (i < text.size() && text[i] >= '0' && text[i] <= '9') ++i;
  if (i == 0) return std::nullopt;
  std::int64_t value = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + i, value);
  if (ec != std::errc{} || p != text.data() + i) return std::nullopt;
  std::string unit = text.substr(i);
  if (unit == "us") return value;
  if (unit == "ms") return value * kMillisecond;
  if (unit == "s") return value * kSecond;
  if (unit == "m") return value * kMinute;
  return std::nullopt;
}

std::string format_duration(DurationUs d) {
  if (d % kMinute == 0 && d != 0) return std::to_string(d / kMinute) + "m";
  if (d % kSecond == 0 && d != 0) return std::to_string(d / kSecond) + "s";
  if (d % kMillisecond == 0 && d != 0) return std::to_string(d / kMillisecond) + "ms";
  return std::to_string(d) + "us";
}

std::string_view channel_name(Channel c) {
  return c == Channel::Orchestration ? "orch" : "app";
}

namespace {

bool token_ok(std::string_view v) {
  if (v.empty()) return false;
  for (char c : v)
    if (c == ' ' || c == '\n' || c == '\t' || c == '=') return false;
  return true;
}

std::string_view expect_field(std::string_view& rest, std::string_view key) {
  size_t sp = rest.find(' ');
  std::string_view tok = sp == std::string_view::npos ? rest : rest.substr(0, sp);
  rest = sp == std::string_view::npos ? std::string_view{} : rest.substr(sp + 1);
  if (tok.substr(0, key.size()) != key)
    throw TraceError("expected field '" + std::string(key) + "' got '" + std::string(tok) + "'");
  return tok.substr(key.size());
}

std::int64_t to_int(std::string_view v, const char* what) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw TraceError(std::string("bad integer in ") + what);
  return out;
}

}  // namespace

std::string serialize(const TraceRecord& rec) {
  std::ostringstream os;
  os << "t=" << rec.time_us << "us seq=" << rec.seq
     << " ch=" << channel_name(rec.channel) << " kind=" << rec.kind
     << " host=" << rec.host << " inst=" << rec.instance;
  for (const auto& [k, v] : rec.details) os << ' ' << k << '=' << v;
  os << '\n';
  return os.str();
}

TraceRecord parse_record(std::string_view line) {
  while (!line.empty() && (line.back() == '\n' || line.back() == '\r'))
    line.remove_suffix(1);
  TraceRecord rec;
  std::string_view rest = line;
  auto t = expect_field(rest, "t=");
  if (t.size() < 3 || t.substr(t.size() - 2) != "us") throw TraceError("time missing us suffix");
  rec.time_us = to_int(t.substr(0, t.size() - 2), "t");
  rec.seq = static_cast<std::uint64_t>(to_int(expect_field(rest, "seq="), "seq"));
  auto ch = expect_field(rest, "ch=");
  if (ch == "orch") rec.channel = Channel::Orchestration;
  else if (ch == "app") rec.channel = Channel::AppVisible;
  else throw TraceError("unknown channel '" + std::string(ch) + "'");
  rec.kind = std::string(expect_field(rest, "kind="));
  rec.host = std::string(expect_field(rest, "host="));
  rec.instance = static_cast<int>(to_int(expect_field(rest, "inst="), "inst"));
  while (!rest.empty()) {
    size_t sp = rest.find(' ');
    std::string_view tok = sp == std::string_view::npos ? rest : rest.substr(0, sp);
    rest = sp == std::string_view::npos ? std::string_view{} : rest.substr(sp + 1);
    size_t eq = tok.find('=');
    if (eq == std::string_view::npos || eq == 0) throw TraceError("malformed detail token");
    rec.details.emplace_back(std::string(tok.substr(0, eq)), std::string(tok.substr(eq + 1)));
  }
  for (size_t i = 1; i < rec.details.size(); ++i)
    if (rec.details[i - 1].first > rec.details[i].first)
      throw TraceError("detail keys not sorted");
  return rec;
}

std::vector<TraceRecord> parse_trace(std::string_view text) {
  std::vector<TraceRecord> out;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    if (line.empty()) continue;
    out.push_back(parse_record(line));
  }
  return out;
}

TraceSink::TraceSink() {
  const char* env = std::getenv("IM_TRACE_UNBUFFERED");
  unbuffered_ = env && std::string_view(env) == "1";
}

const TraceRecord& TraceSink::emit(TimeUs time, Channel ch, std::string kind,
                                   std::string host, int instance,
                                   std::vector<std::pair<std::string, std::string>> details) {
  if (time < last_time_) throw TraceError("trace time went backwards");
  last_time_ = time;
  std::sort(details.begin(), details.end());
  TraceRecord rec{time, next_seq_++, ch, std::move(kind), std::move(host), instance,
                  std::move(details)};
  if (!token_ok(rec.kind) || !token_ok(rec.host)) throw TraceError("bad token in trace record");
  for (const auto& [k, v] : rec.details)
    if (!token_ok(k) || !token_ok(v)) throw TraceError("bad token in trace detail");
  records_.push_back(std::move(rec));
  if (out_) {
    *out_ << serialize(records_.back());
    if (unbuffered_) out_->flush();
  }
  return records_.back();
}

std::string TraceSink::dump() const {
  std::string out;
  for (const auto& r : records_) out += serialize(r);
  return out;
}

}  // namespace im
