#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evrot/error.hpp"
#include "evrot/geometry.hpp"

namespace evrot {

struct Event {
  double t = 0.0;
  float x = 0.0f;
  float y = 0.0f;
  std::int8_t p = 1;
};

struct EventStream {
  std::vector<Event> events;
  std::size_t rejected = 0;  // out-of-bounds records dropped while reading

  std::size_t size() const { return events.size(); }
  bool empty() const { return events.empty(); }
};

/// Events around one reference time. The span points into the owning stream.
struct EventSlice {
  double t_ref = 0.0;
  std::span<const Event> events;
  bool stationary = false;
};

struct GyroSample {
  double t = 0.0;
  Vec3 omega = Vec3::Zero();
};

struct ReadOptions {
  bool sort = false;  // stable-sort out-of-order timestamps instead of failing
};

namespace detail {

inline constexpr char kBinaryMagic[4] = {'E', 'V', 'T', '1'};
inline constexpr std::size_t kBinaryRecord = 13;

inline std::string_view next_token(std::string_view& s) {
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\t' || s[b] == ',' || s[b] == '\r')) ++b;
  std::size_t e = b;
  while (e < s.size() && !(s[e] == ' ' || s[e] == '\t' || s[e] == ',' || s[e] == '\r')) ++e;
  std::string_view tok = s.substr(b, e - b);
  s.remove_prefix(e);
  return tok;
}

inline bool parse_double(std::string_view tok, double& out) {
  if (tok.empty()) return false;
  if (tok.front() == '+') tok.remove_prefix(1);
  const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return r.ec == std::errc() && r.ptr == tok.data() + tok.size() && std::isfinite(out);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Calls fn(line, line_number) for every non-blank, non-comment line.
template <typename Fn>
void for_each_line(const std::string& text, Fn&& fn) {
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    std::size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string_view::npos || line[b] == '#') continue;
    fn(line, line_no);
  }
}

inline void finish_stream(EventStream& s, const std::string& path, const std::vector<std::size_t>& lines,
                          const ReadOptions& opt) {
  for (std::size_t i = 1; i < s.events.size(); ++i) {
    if (s.events[i].t < s.events[i - 1].t) {
      if (opt.sort) {
        std::stable_sort(s.events.begin(), s.events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
        return;
      }
      throw ParseError(path, lines.empty() ? i + 1 : lines[i], "timestamp decreases (events must be time-sorted)");
    }
  }
}

// Keeps the event if it lies on the sensor, undistorting when the model has
// distortion coefficients.
inline bool admit(Event& e, const CameraModel& cam) {
  if (!cam.in_bounds(e.x, e.y)) return false;
  if (cam.has_distortion()) {
    const Vec2 u = cam.undistort(e.x, e.y);
    if (!cam.in_bounds(u.x(), u.y())) return false;
    e.x = static_cast<float>(u.x());
    e.y = static_cast<float>(u.y());
  }
  return true;
}

}  // namespace detail

inline bool is_binary_event_file(const std::string& text) {
  return text.size() >= 4 && std::memcmp(text.data(), detail::kBinaryMagic, 4) == 0;
}

inline EventStream parse_events_text(const std::string& text, const CameraModel& cam, const std::string& path = "<events>",
                                     const ReadOptions& opt = {}) {
  EventStream s;
  std::vector<std::size_t> lines;
  detail::for_each_line(text, [&](std::string_view line, std::size_t no) {
    double v[4];
    for (double& x : v) {
      const auto tok = detail::next_token(line);
      if (!detail::parse_double(tok, x)) throw ParseError(path, no, "expected 't x y p', got '" + std::string(tok) + "'");
    }
    if (!detail::next_token(line).empty()) throw ParseError(path, no, "trailing fields after 't x y p'");
    if (v[3] != 1.0 && v[3] != -1.0 && v[3] != 0.0) throw ParseError(path, no, "polarity must be 1, -1 or 0");
    Event e{v[0], static_cast<float>(v[1]), static_cast<float>(v[2]), static_cast<std::int8_t>(v[3] > 0 ? 1 : -1)};
    if (!detail::admit(e, cam)) {
      ++s.rejected;
      return;
    }
    s.events.push_back(e);
    lines.push_back(no);
  });
  detail::finish_stream(s, path, lines, opt);
  return s;
}

inline EventStream parse_events_binary(const std::string& data, const CameraModel& cam, const std::string& path = "<events>",
                                       const ReadOptions& opt = {}) {
  if (!is_binary_event_file(data)) throw ParseError(path, 1, "missing EVT1 header");
  const std::size_t body = data.size() - 4;
  if (body % detail::kBinaryRecord != 0) throw ParseError(path, 1 + body / detail::kBinaryRecord, "truncated binary record");
  EventStream s;
  const std::size_t n = body / detail::kBinaryRecord;
  s.events.reserve(n);
  std::vector<std::size_t> records;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* r = reinterpret_cast<const unsigned char*>(data.data()) + 4 + i * detail::kBinaryRecord;
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) bits = (bits << 8) | r[b];
    double t;
    std::memcpy(&t, &bits, 8);
    const std::uint16_t x = static_cast<std::uint16_t>(r[8] | (r[9] << 8));
    const std::uint16_t y = static_cast<std::uint16_t>(r[10] | (r[11] << 8));
    const auto p = static_cast<std::int8_t>(r[12]);
    if (!std::isfinite(t)) throw ParseError(path, i + 1, "non-finite timestamp");
    Event e{t, static_cast<float>(x), static_cast<float>(y), static_cast<std::int8_t>(p > 0 ? 1 : -1)};
    if (!detail::admit(e, cam)) {
      ++s.rejected;
      continue;
    }
    s.events.push_back(e);
    records.push_back(i + 1);
  }
  detail::finish_stream(s, path, records, opt);
  return s;
}

/// Reads a text or EVT1 binary event file (detected from the header).
inline EventStream read_events(const std::string& path, const CameraModel& cam, const ReadOptions& opt = {}) {
  const std::string data = detail::read_file(path);
  return is_binary_event_file(data) ? parse_events_binary(data, cam, path, opt) : parse_events_text(data, cam, path, opt);
}

inline void write_events_text(const std::string& path, std::span<const Event> events) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw InputError("cannot write '" + path + "'");
  for (const Event& e : events) std::fprintf(f, "%.9f %.9g %.9g %d\n", e.t, e.x, e.y, static_cast<int>(e.p));
  std::fclose(f);
}

/// Binary records store integer pixel coordinates; fractional ones are rounded.
inline void write_events_binary(const std::string& path, std::span<const Event> events) {
  std::string buf(detail::kBinaryMagic, 4);
  buf.resize(4 + events.size() * detail::kBinaryRecord);
  unsigned char* out = reinterpret_cast<unsigned char*>(buf.data()) + 4;
  for (const Event& e : events) {
    std::uint64_t bits;
    std::memcpy(&bits, &e.t, 8);
    for (int b = 0; b < 8; ++b) out[b] = static_cast<unsigned char>(bits >> (8 * b));
    const auto x = static_cast<std::uint16_t>(std::clamp(std::lround(e.x), 0L, 65535L));
    const auto y = static_cast<std::uint16_t>(std::clamp(std::lround(e.y), 0L, 65535L));
    out[8] = x & 0xff;
    out[9] = x >> 8;
    out[10] = y & 0xff;
    out[11] = y >> 8;
    out[12] = static_cast<unsigned char>(e.p);
    out += detail::kBinaryRecord;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write '" + path + "'");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

/// Keeps events whose index is a multiple of q.
inline std::vector<Event> downsample(std::span<const Event> events, int q) {
  if (q < 1) throw InputError("downsample: Q must be >= 1");
  std::vector<Event> out;
  out.reserve((events.size() + q - 1) / q);
  for (std::size_t i = 0; i < events.size(); i += static_cast<std::size_t>(q)) out.push_back(events[i]);
  return out;
}

/// Equispaced reference times t_first + (m + 1/2)/f, each with K events
/// around it: ceil(K/2) at or before the reference time, floor(K/2) after,
/// borrowing from the other side near the stream ends. Slices spanning more
/// than 10/f are stationary.
inline std::vector<EventSlice> slice_hybrid(std::span<const Event> events, std::size_t k, double f) {
  if (k < 2) throw InputError("slice_hybrid: K must be >= 2");
  if (!(f > 0.0)) throw InputError("slice_hybrid: f must be positive");
  std::vector<EventSlice> out;
  if (events.empty()) return out;
  const double t_first = events.front().t, t_last = events.back().t;
  if (events.size() < k) {
    out.push_back({0.5 * (t_first + t_last), events, true});
    return out;
  }
  const std::size_t n = events.size();
  const std::size_t before = k - k / 2;
  const double max_span = 10.0 / f;
  for (std::size_t m = 0;; ++m) {
    const double t_ref = t_first + (static_cast<double>(m) + 0.5) / f;
    if (t_ref > t_last && m > 0) break;
    // first event strictly after t_ref
    const auto it = std::upper_bound(events.begin(), events.end(), t_ref, [](double t, const Event& e) { return t < e.t; });
    const std::size_t split = static_cast<std::size_t>(it - events.begin());
    std::size_t begin = split >= before ? split - before : 0;
    begin = std::min(begin, n - k);
    EventSlice s{t_ref, events.subspan(begin, k), false};
    s.stationary = s.events.back().t - s.events.front().t > max_span;
    out.push_back(s);
    if (t_ref > t_last) break;
  }
  return out;
}

inline std::vector<GyroSample> parse_gyro_text(const std::string& text, const std::string& path = "<gyro>") {
  std::vector<GyroSample> out;
  detail::for_each_line(text, [&](std::string_view line, std::size_t no) {
    double v[4];
    for (double& x : v) {
      const auto tok = detail::next_token(line);
      if (!detail::parse_double(tok, x)) throw ParseError(path, no, "expected 't wx wy wz', got '" + std::string(tok) + "'");
    }
    if (!out.empty() && v[0] < out.back().t) throw ParseError(path, no, "timestamp decreases");
    out.push_back({v[0], Vec3(v[1], v[2], v[3])});
  });
  return out;
}

inline std::vector<GyroSample> read_gyro(const std::string& path) { return parse_gyro_text(detail::read_file(path), path); }

inline void write_gyro(const std::string& path, std::span<const GyroSample> samples) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw InputError("cannot write '" + path + "'");
  for (const auto& s : samples) std::fprintf(f, "%.9f %.17g %.17g %.17g\n", s.t, s.omega.x(), s.omega.y(), s.omega.z());
  std::fclose(f);
}

}  // namespace evrot
