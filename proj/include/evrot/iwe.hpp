#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "evrot/error.hpp"
#include "evrot/events.hpp"
#include "evrot/geometry.hpp"
#include "evrot/parallel.hpp"
#include "evrot/trajectory.hpp"

namespace evrot {

enum class IweFrame { Local, Panoramic };

struct WarpedPoint {
  double u = 0.0;
  double v = 0.0;
};

/// Image of warped events. Row-major, values(x, y) at index y*width + x.
class Iwe {
 public:
  Iwe() = default;
  Iwe(int width, int height, IweFrame frame)
      : width_(width), height_(height), frame_(frame), values_(static_cast<std::size_t>(width) * height, 0.0) {
    if (width <= 0 || height <= 0) throw InputError("IWE dimensions must be positive");
  }
  static Iwe local(const CameraModel& cam) { return Iwe(cam.width, cam.height, IweFrame::Local); }
  static Iwe panoramic(const PanoramaGeometry& p) { return Iwe(p.w, p.h, IweFrame::Panoramic); }

  int width() const { return width_; }
  int height() const { return height_; }
  IweFrame frame() const { return frame_; }
  bool wrap_x() const { return frame_ == IweFrame::Panoramic; }
  std::size_t pixel_count() const { return values_.size(); }

  double& at(int x, int y) { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  double mass() const {
    double s = 0.0;
    for (double v : values_) s += v;
    return s;
  }
  void clear() {
    std::fill(values_.begin(), values_.end(), 0.0);
    dropped = clamped_rows = 0;
  }

  // Points that fell entirely outside a local image, and points whose row
  // was clamped into a panorama (pole overshoot).
  std::size_t dropped = 0;
  std::size_t clamped_rows = 0;

 private:
  int width_ = 0, height_ = 0;
  IweFrame frame_ = IweFrame::Local;
  std::vector<double> values_;
};

/// Four-pixel bilinear footprint of one point plus the weight derivatives
/// with respect to u and v. Entries with idx < 0 are outside the image.
struct BilinearStencil {
  std::int64_t idx[4] = {-1, -1, -1, -1};
  double w[4] = {0, 0, 0, 0};
  double dw_du[4] = {0, 0, 0, 0};
  double dw_dv[4] = {0, 0, 0, 0};
  bool clamped = false;  // row clamped; dw_dv is then zero
  bool inside = false;   // every nonzero weight lands in the image
};

inline BilinearStencil bilinear_stencil(double u, double v, int width, int height, bool wrap_x) {
  BilinearStencil s;
  if (!std::isfinite(u) || !std::isfinite(v)) return s;
  if (wrap_x) {
    u = std::fmod(u, static_cast<double>(width));
    if (u < 0.0) u += width;
    if (v < 0.0 || v > height - 1) {
      v = std::clamp(v, 0.0, static_cast<double>(height - 1));
      s.clamped = true;
    }
  }
  double x0f = std::floor(u), y0f = std::floor(v);
  // keep the four-pixel cell inside the image on the last row/column
  if (height > 1 && y0f >= height - 1 && v <= height - 1) y0f = height - 2;
  if (!wrap_x && width > 1 && x0f >= width - 1 && u <= width - 1) x0f = width - 2;
  const double fx = u - x0f, fy = v - y0f;
  const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
  const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
  s.w[0] = (1 - fx) * (1 - fy);
  s.w[1] = fx * (1 - fy);
  s.w[2] = (1 - fx) * fy;
  s.w[3] = fx * fy;
  s.dw_du[0] = -(1 - fy);
  s.dw_du[1] = (1 - fy);
  s.dw_du[2] = -fy;
  s.dw_du[3] = fy;
  if (!s.clamped) {
    s.dw_dv[0] = -(1 - fx);
    s.dw_dv[1] = -fx;
    s.dw_dv[2] = (1 - fx);
    s.dw_dv[3] = fx;
  }
  s.inside = true;
  for (int i = 0; i < 4; ++i) {
    long x = xs[i], y = ys[i];
    if (wrap_x) x = x >= width ? x - width : x;
    if (x < 0 || x >= width || y < 0 || y >= height) {
      s.idx[i] = -1;
      if (s.w[i] != 0.0) s.inside = false;
      continue;
    }
    s.idx[i] = static_cast<std::int64_t>(y) * width + x;
  }
  return s;
}

inline void vote(Iwe& iwe, const WarpedPoint& p, double weight = 1.0) {
  const BilinearStencil s = bilinear_stencil(p.u, p.v, iwe.width(), iwe.height(), iwe.wrap_x());
  if (s.clamped) ++iwe.clamped_rows;
  bool any = false;
  for (int i = 0; i < 4; ++i)
    if (s.idx[i] >= 0) {
      iwe.values()[s.idx[i]] += weight * s.w[i];
      any = any || s.w[i] != 0.0;
    }
  if (!s.inside && !any) ++iwe.dropped;
}

/// Adds weight 1 per point with bilinear voting. Polarity plays no role.
inline Iwe& accumulate_bilinear(std::span<const WarpedPoint> points, Iwe& target) {
  for (const auto& p : points) vote(target, p);
  return target;
}

inline double variance(std::span<const double> values) {
  if (values.empty()) throw InputError("variance of an empty image");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return var / static_cast<double>(values.size());
}

inline double variance(const Iwe& I) { return variance(std::span<const double>(I.values())); }

inline double event_area(const Iwe& I, double lambda0 = 1.0) {
  if (!(lambda0 > 0.0)) throw InputError("event_area: lambda0 must be positive");
  double a = 0.0;
  for (double v : I.values())
    if (v != 0.0) a += -std::expm1(-v / lambda0);
  return a;
}

inline double event_density(const Iwe& I, double lambda0 = 1.0) {
  const double a = event_area(I, lambda0);
  if (!(a > 0.0)) throw InputError("event density undefined for an empty IWE");
  return I.mass() / a;
}

/// Weight of the global map in the window objective: zero while the map is empty.
inline double alpha_weight(const Iwe& local, const Iwe& global, double lambda0 = 1.0) {
  if (event_area(global, lambda0) <= 0.0) return 0.0;
  return event_density(local, lambda0) / event_density(global, lambda0);
}

/// RMS Sobel gradient norm. Borders reflect (x wraps on panoramas).
inline double gradient_magnitude(const Iwe& I) {
  const int w = I.width(), h = I.height();
  if (w < 3 || h < 3) throw InputError("gradient_magnitude needs an image of at least 3x3");
  const auto reflect = [](int i, int n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  const auto col = [&](int x) { return I.wrap_x() ? (x + w) % w : reflect(x, w); };
  double sum = 0.0;
  for (int y = 0; y < h; ++y) {
    const int ym = reflect(y - 1, h), yp = reflect(y + 1, h);
    for (int x = 0; x < w; ++x) {
      const int xm = col(x - 1), xp = col(x + 1);
      const double gx = (I.at(xp, ym) + 2 * I.at(xp, y) + I.at(xp, yp)) - (I.at(xm, ym) + 2 * I.at(xm, y) + I.at(xm, yp));
      const double gy = (I.at(xm, yp) + 2 * I.at(x, yp) + I.at(xp, yp)) - (I.at(xm, ym) + 2 * I.at(x, ym) + I.at(xp, ym));
      sum += gx * gx + gy * gy;
    }
  }
  return std::sqrt(sum / static_cast<double>(w) / h);
}

/// Separable Gaussian blur, kernel truncated at 3 sigma.
inline Iwe gaussian_blur(const Iwe& I, double sigma) {
  if (!(sigma > 0.0)) return I;
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double ks = 0.0;
  for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= ks;
  const int w = I.width(), h = I.height();
  Iwe tmp(w, h, I.frame()), out(w, h, I.frame());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) {
        int xx = x + i;
        if (I.wrap_x()) xx = ((xx % w) + w) % w;
        else if (xx < 0 || xx >= w) continue;
        s += k[i + r] * I.at(xx, y);
      }
      tmp.at(x, y) = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < h) s += k[i + r] * tmp.at(x, yy);
      }
      out.at(x, y) = s;
    }
  return out;
}

/// Bearing vectors of events, computed once and reused across warps.
inline std::vector<Vec3> bearings(std::span<const Event> events, const CameraModel& cam) {
  std::vector<Vec3> out(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) out[i] = back_project(events[i].x, events[i].y, cam);
  return out;
}

/// Warps events onto the panorama, sampling the pose once per batch of
/// consecutive events at the batch's mid time. pose(t) returns R(t).
template <typename PoseFn>
std::vector<WarpedPoint> warp_panoramic_with(std::span<const Event> events, PoseFn&& pose, const CameraModel& cam,
                                             const PanoramaGeometry& pano, std::size_t batch) {
  if (batch == 0) throw InputError("warp_panoramic: batch must be >= 1");
  std::vector<WarpedPoint> out(events.size());
  const std::size_t nb = chunk_count(events.size(), batch);
  parallel_chunks(nb, 64, [&](std::size_t, std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t i0 = b * batch, i1 = std::min(events.size(), i0 + batch);
      const Mat3 R = pose(0.5 * (events[i0].t + events[i1 - 1].t)).matrix();
      for (std::size_t i = i0; i < i1; ++i) {
        const MapPoint m = project_equirect(R * back_project(events[i].x, events[i].y, cam), pano);
        out[i] = {m.px, m.py};
      }
    }
  });
  return out;
}

inline std::vector<WarpedPoint> warp_panoramic(std::span<const Event> events, const ControlPoseGrid& grid,
                                               const CameraModel& cam, const PanoramaGeometry& pano, std::size_t batch = 100) {
  return warp_panoramic_with(events, [&](double t) { return sample(grid, t); }, cam, pano, batch);
}

// ---------------------------------------------------------------------------
// Image I/O (binary PGM).

struct GrayImage {
  int width = 0, height = 0;
  std::vector<double> values;  // in [0, 1]
};

/// Maps an IWE to 16-bit gray: (v / max)^gamma. `comment` lines go into the
/// header as '#' lines.
inline void write_pgm16(const std::string& path, const Iwe& I, double gamma = 0.75,
                        const std::vector<std::string>& comment = {}) {
  double vmax = 0.0;
  for (double v : I.values()) vmax = std::max(vmax, v);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write '" + path + "'");
  f << "P5\n";
  for (const auto& c : comment) f << "# " << c << "\n";
  f << I.width() << " " << I.height() << "\n65535\n";
  std::vector<unsigned char> buf(I.pixel_count() * 2);
  for (std::size_t i = 0; i < I.pixel_count(); ++i) {
    const double n = vmax > 0.0 ? std::pow(std::max(0.0, I.values()[i]) / vmax, gamma) : 0.0;
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(n, 0.0, 1.0) * 65535.0));
    buf[2 * i] = static_cast<unsigned char>(q >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

/// Raw little-endian doubles, row-major, preceded by "w h\n".
inline void write_raw(const std::string& path, const Iwe& I) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write '" + path + "'");
  f << I.width() << " " << I.height() << "\n";
  f.write(reinterpret_cast<const char*>(I.values().data()), static_cast<std::streamsize>(I.pixel_count() * sizeof(double)));
}

/// Reads an 8- or 16-bit binary PGM (P5), normalized to [0, 1].
inline GrayImage read_pgm(const std::string& path) {
  const std::string data = detail::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < data.size() && std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
      if (pos < data.size() && data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t b = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    return data.substr(b, pos - b);
  };
  if (token() != "P5") throw ParseError(path, 1, "not a binary PGM (P5)");
  GrayImage img;
  int maxval = 0;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw ParseError(path, 1, "bad PGM header");
  }
  ++pos;  // single whitespace before the raster
  if (img.width <= 0 || img.height <= 0 || maxval <= 0 || maxval > 65535) throw ParseError(path, 1, "bad PGM header");
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (data.size() < pos + n * bpp) throw ParseError(path, 1, "truncated PGM raster");
  img.values.resize(n);
  const auto* r = reinterpret_cast<const unsigned char*>(data.data()) + pos;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = bpp == 2 ? (r[2 * i] << 8) | r[2 * i + 1] : r[i];
    img.values[i] = static_cast<double>(v) / maxval;
  }
  return img;
}

inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write '" + path + "'");
  f << "P5\n" << img.width << " " << img.height << "\n65535\n";
  for (double v : img.values) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    const char b[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
    f.write(b, 2);
  }
}

}  // namespace evrot
