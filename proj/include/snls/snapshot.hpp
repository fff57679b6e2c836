#pragma once

// Trajectory snapshot files. Layout in docs/snapshot_format.md; every number
// is little-endian regardless of the host.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "snls/errors.hpp"
#include "snls/noise.hpp"
#include "snls/spectral.hpp"

namespace snls {

inline constexpr char kSnapshotMagic[8] = {'S', 'N', 'L', 'S', 'S', 'N', 'A', 'P'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

struct SnapshotHeader {
  std::uint64_t modes = 0;
  double dt = 0.0;
  double horizon = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  double sigma = 1.0;
  double lambda = -1.0;
  double alpha = 0.0;
  std::uint64_t n_star = 0;
  std::vector<double> b; // b_1 .. b_M
  std::string config;    // resolved configuration, JSON text
};

struct Snapshot {
  SnapshotHeader header;
  std::vector<double> times;
  std::vector<SpectralField> states;
};

namespace detail {

inline std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) {
      r = (r << 8) | ((v >> (8 * i)) & 0xFF);
    }
    return r;
  }
  return v;
}

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) |
           (v >> 24);
  }
  return v;
}

class Writer {
public:
  explicit Writer(std::ostream &out) : out_(out) {}

  void u32(std::uint32_t v) { raw(to_little(v)); }
  void u64(std::uint64_t v) { raw(to_little(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char *p, std::size_t n) {
    out_.write(p, static_cast<std::streamsize>(n));
  }

private:
  template <class T> void raw(T v) {
    out_.write(reinterpret_cast<const char *>(&v), sizeof v);
  }
  std::ostream &out_;
};

class Reader {
public:
  explicit Reader(std::istream &in) : in_(in) {}

  std::uint32_t u32() { return to_little(raw<std::uint32_t>()); }
  std::uint64_t u64() { return to_little(raw<std::uint64_t>()); }
  double f64() { return std::bit_cast<double>(u64()); }
  void bytes(char *p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (!in_) {
      throw Error("snapshot truncated");
    }
  }

private:
  template <class T> T raw() {
    T v{};
    bytes(reinterpret_cast<char *>(&v), sizeof v);
    return v;
  }
  std::istream &in_;
};

} // namespace detail

inline void write_snapshot(std::ostream &out, const Snapshot &snap) {
  const auto &h = snap.header;
  if (snap.times.size() != snap.states.size()) {
    throw DimensionError("snapshot times and states differ in length");
  }
  if (h.b.size() != h.modes) {
    throw DimensionError("snapshot noise coefficients do not match M");
  }
  detail::Writer w(out);
  w.bytes(kSnapshotMagic, sizeof kSnapshotMagic);
  w.u32(kSnapshotVersion);
  w.u32(0);
  w.u64(h.modes);
  w.f64(h.dt);
  w.f64(h.horizon);
  w.u64(h.seed);
  w.u64(h.stream);
  w.f64(h.sigma);
  w.f64(h.lambda);
  w.f64(h.alpha);
  w.u64(h.n_star);
  for (double bn : h.b) {
    w.f64(bn);
  }
  w.u64(h.config.size());
  w.bytes(h.config.data(), h.config.size());
  w.u64(snap.states.size());
  for (std::size_t r = 0; r < snap.states.size(); ++r) {
    const auto &u = snap.states[r];
    if (u.modes() != h.modes) {
      throw DimensionError("snapshot record has the wrong mode count");
    }
    w.f64(snap.times[r]);
    for (const auto &z : u.coeffs()) {
      w.f64(z.real());
      w.f64(z.imag());
    }
  }
  if (!out) {
    throw Error("snapshot write failed");
  }
}

inline Snapshot read_snapshot(std::istream &in) {
  detail::Reader r(in);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kSnapshotMagic, sizeof magic) != 0) {
    throw Error("not a snapshot file");
  }
  if (const auto v = r.u32(); v != kSnapshotVersion) {
    throw Error("unsupported snapshot version " + std::to_string(v));
  }
  r.u32();
  Snapshot snap;
  auto &h = snap.header;
  h.modes = r.u64();
  h.dt = r.f64();
  h.horizon = r.f64();
  h.seed = r.u64();
  h.stream = r.u64();
  h.sigma = r.f64();
  h.lambda = r.f64();
  h.alpha = r.f64();
  h.n_star = r.u64();
  if (h.modes == 0 || h.modes > (1u << 24)) {
    throw Error("snapshot mode count out of range");
  }
  h.b.resize(h.modes);
  for (auto &bn : h.b) {
    bn = r.f64();
  }
  const auto len = r.u64();
  if (len > (1u << 26)) {
    throw Error("snapshot config block too large");
  }
  h.config.resize(len);
  r.bytes(h.config.data(), len);
  const auto records = r.u64();
  for (std::uint64_t k = 0; k < records; ++k) {
    snap.times.push_back(r.f64());
    SpectralField u(h.modes);
    for (auto &z : u.coeffs()) {
      const double re = r.f64();
      z = Complex(re, r.f64());
    }
    snap.states.push_back(std::move(u));
  }
  return snap;
}

inline void write_snapshot(const std::string &path, const Snapshot &snap) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path);
  }
  write_snapshot(out, snap);
}

inline Snapshot read_snapshot(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path);
  }
  return read_snapshot(in);
}

} // namespace snls
