#pragma once

// Procedural honeycomb slices with seven defect classes, production-order
// structured datasets, the on-disk image/manifest formats, and the
// manifest-gated loader used by every training loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nlxct/error.hpp"
#include "nlxct/rng.hpp"

namespace nlxct {

inline constexpr int kNumClasses = 7;

inline const std::array<const char*, kNumClasses> kClassNames{
    "no_defect", "core_deformation", "core_displacement", "core_split", "fod", "resin_buildup", "splice_gap"};

/// Rendering knobs for one slice; drift perturbs them per slice.
struct RenderConfig {
  std::size_t image_size = 64;
  double pitch = 10.0;       // cell pitch in pixels (horizontal lattice period)
  double wall_sigma = 0.9;   // wall profile width
  double background = 0.15;
  double contrast = 0.6;
  double noise = 0.05;
  double phase_jitter = 0.5;  // lattice offset range as a fraction of the pitch
};

struct Image {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;  // row-major

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

namespace detail {

struct Vec2 {
  double x, y;
};

/// Pointy-top hexagonal lattice with basis (p, 0), (p/2, p·√3/2).
struct HexLattice {
  double pitch;
  Vec2 phase;

  struct Hit {
    double edge_distance;  // distance to the nearest Voronoi wall
    long i, j;             // lattice index of the owning cell
    Vec2 center;
  };

  Hit locate(Vec2 p) const {
    const double row = pitch * std::sqrt(3.0) / 2.0;
    const double qx = p.x - phase.x, qy = p.y - phase.y;
    const double fj = qy / row;
    const double fi = (qx - fj * pitch / 2.0) / pitch;
    const long bi = static_cast<long>(std::floor(fi)), bj = static_cast<long>(std::floor(fj));
    double d1 = 1e300, d2 = 1e300;
    Vec2 c1{}, c2{};
    long i1 = 0, j1 = 0;
    for (long dj = -1; dj <= 2; ++dj)
      for (long di = -1; di <= 2; ++di) {
        const long i = bi + di, j = bj + dj;
        const Vec2 c{double(i) * pitch + double(j) * pitch / 2.0, double(j) * row};
        const double d = (qx - c.x) * (qx - c.x) + (qy - c.y) * (qy - c.y);
        if (d < d1) {
          d2 = d1, c2 = c1;
          d1 = d, c1 = c, i1 = i, j1 = j;
        } else if (d < d2) {
          d2 = d, c2 = c;
        }
      }
    const double sep = std::hypot(c2.x - c1.x, c2.y - c1.y);
    return {(d2 - d1) / (2.0 * sep), i1, j1, {c1.x + phase.x, c1.y + phase.y}};
  }
};

inline double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double t = std::clamp(((p.x - a.x) * vx + (p.y - a.y) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  return std::hypot(p.x - a.x - t * vx, p.y - a.y - t * vy);
}

}  // namespace detail

/// Renders one slice. Deterministic in (label, seed, drift); the lattice and
/// the noise come from seed-derived streams shared by all classes, so two
/// classes rendered with the same seed differ only by the defect.
inline Image generate_slice(int label, std::uint64_t seed, double drift, const RenderConfig& cfg = {}) {
  using detail::Vec2;
  if (label < 0 || label >= kNumClasses) throw IndexError("generate_slice: class " + std::to_string(label) + " outside [0, 6]");
  if (!(drift >= 0.0)) throw ConfigError("generate_slice: drift level must be non-negative");
  const std::size_t S = cfg.image_size;
  const double size = double(S);

  Rng lattice_rng = Rng::derive(seed, Stream::Slice, 1);
  Rng defect_rng = Rng::derive(seed, Stream::Slice, 2);
  Rng noise_rng = Rng::derive(seed, Stream::Slice, 3);

  const double pitch = cfg.pitch * (1.0 + 0.12 * drift) * lattice_rng.uniform(0.97, 1.03);
  const double contrast = cfg.contrast * (1.0 - 0.2 * std::min(drift, 2.0)) * lattice_rng.uniform(0.9, 1.1);
  const double background = cfg.background + 0.06 * drift;
  const double noise = cfg.noise * (1.0 + 0.6 * drift);
  const double sigma = cfg.wall_sigma * lattice_rng.uniform(0.9, 1.1);
  detail::HexLattice lattice{pitch, {lattice_rng.uniform(0.0, cfg.phase_jitter * pitch), lattice_rng.uniform(0.0, cfg.phase_jitter * pitch)}};

  auto rand_point = [&](double margin) {
    return Vec2{defect_rng.uniform(margin, size - margin), defect_rng.uniform(margin, size - margin)};
  };
  auto wall = [&](double e) { return std::exp(-0.5 * (e / sigma) * (e / sigma)); };

  // Defect geometry.
  Vec2 center = rand_point(size * 0.25);
  const double angle = defect_rng.uniform(0.0, 3.141592653589793);
  const Vec2 dir{std::cos(angle), std::sin(angle)};
  const Vec2 normal{-dir.y, dir.x};
  double radius = 0.0, amplitude = 0.0, width = 0.0;
  Vec2 shift{0, 0}, seg_a{0, 0}, seg_b{0, 0}, blob2{0, 0};
  std::set<std::pair<long, long>> filled;
  switch (label) {
    case 1:
      radius = defect_rng.uniform(0.13, 0.2) * size;
      amplitude = defect_rng.uniform(0.35, 0.5) * pitch;
      break;
    case 2: {
      const double a = defect_rng.uniform(0.0, 6.283185307179586);
      const double m = defect_rng.uniform(0.35, 0.5) * pitch;
      shift = {m * std::cos(a), m * std::sin(a)};
      break;
    }
    case 3: {
      const double half = defect_rng.uniform(0.25, 0.4) * size;
      seg_a = {center.x - half * dir.x, center.y - half * dir.y};
      seg_b = {center.x + half * dir.x, center.y + half * dir.y};
      width = defect_rng.uniform(1.0, 1.6);
      break;
    }
    case 4:
      radius = defect_rng.uniform(2.2, 3.5);
      amplitude = defect_rng.uniform(0.8, 1.0);
      blob2 = {center.x + defect_rng.uniform(-3, 3), center.y + defect_rng.uniform(-3, 3)};
      break;
    case 5: {
      const auto hit = lattice.locate(center);
      filled.insert({hit.i, hit.j});
      static constexpr long kNeighbors[6][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, -1}, {-1, 1}};
      const std::size_t extra = 1 + defect_rng.below(3);
      for (std::size_t k = 0; k < extra; ++k) {
        const auto& n = kNeighbors[defect_rng.below(6)];
        filled.insert({hit.i + n[0], hit.j + n[1]});
      }
      amplitude = defect_rng.uniform(0.5, 0.65);
      break;
    }
    case 6:
      width = defect_rng.uniform(2.5, 4.0);
      amplitude = defect_rng.uniform(0.55, 0.7);
      break;
    default:
      break;
  }

  Image img{S, S, std::vector<float>(S * S)};
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      Vec2 p{double(x) + 0.5, double(y) + 0.5};
      const double along = (p.x - center.x) * normal.x + (p.y - center.y) * normal.y;
      double extra = 0.0;
      if (label == 1) {
        // Swirl of the lattice around the center.
        const double dx = p.x - center.x, dy = p.y - center.y;
        const double g = amplitude * std::exp(-0.5 * (dx * dx + dy * dy) / (radius * radius));
        const double r = std::max(1e-9, std::hypot(dx, dy));
        p = {p.x - g * dy / r * 1.5, p.y + g * dx / r * 1.5};
      } else if (label == 2 && along > 0.0) {
        p = {p.x + shift.x, p.y + shift.y};
      } else if (label == 6) {
        // The two halves are pulled apart by the seam width.
        const double half = width / 2.0;
        if (std::abs(along) < half) extra = amplitude;
        const double s = along > 0 ? half : -half;
        p = {p.x - s * normal.x, p.y - s * normal.y};
      }
      const auto hit = lattice.locate(p);
      double v = background + contrast * wall(hit.edge_distance);
      if (label == 3) {
        const double d = detail::segment_distance({double(x) + 0.5, double(y) + 0.5}, seg_a, seg_b);
        const double cut = std::exp(-0.5 * (d / width) * (d / width));
        v = v * (1.0 - 0.95 * cut) - 0.08 * cut;
      } else if (label == 4) {
        const double q = double(x) + 0.5, r = double(y) + 0.5;
        const double b1 = std::exp(-0.5 * ((q - center.x) * (q - center.x) + (r - center.y) * (r - center.y)) / (radius * radius));
        const double b2 = std::exp(-0.5 * ((q - blob2.x) * (q - blob2.x) + (r - blob2.y) * (r - blob2.y)) / (radius * radius));
        v = std::max(v, background + amplitude * std::min(1.0, 1.6 * std::max(b1, b2)));
      } else if (label == 5 && filled.count({hit.i, hit.j})) {
        v = std::max(v, background + amplitude);
      }
      v = std::max(v, extra > 0.0 ? background + extra : v);
      v += noise * noise_rng.normal();
      img.pixels[y * S + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return img;
}

// ---------------------------------------------------------------------------
// Image file format: "NLXI", u32 version = 1, u32 H, u32 W, H·W LE f32.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t bits = get_u32(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("failed writing '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string encode_image(const Image& img) {
  std::string out = "NLXI";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(img.height));
  detail::put_u32(out, static_cast<std::uint32_t>(img.width));
  for (float v : img.pixels) detail::put_f32(out, v);
  return out;
}

inline Image decode_image(const std::string& bytes, const std::string& origin = "image") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(p, "NLXI", 4) != 0) throw IoError(origin + ": not an NLXI image");
  if (detail::get_u32(p + 4) != 1) throw IoError(origin + ": unsupported image version");
  Image img{detail::get_u32(p + 8), detail::get_u32(p + 12), {}};
  if (bytes.size() != 16 + 4 * img.height * img.width) throw IoError(origin + ": truncated image payload");
  img.pixels.resize(img.height * img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = detail::get_f32(p + 16 + 4 * i);
  return img;
}

inline void write_image(const std::filesystem::path& path, const Image& img) { detail::write_file_atomic(path, encode_image(img)); }
inline Image read_image(const std::filesystem::path& path) { return decode_image(detail::read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Manifests

enum class Split { Train, Val, Test, Unlabeled };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unlabeled: return "unlabeled";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "unlabeled") return Split::Unlabeled;
  throw IoError("unknown split '" + s + "'");
}

struct SliceRecord {
  int order_id = 0;
  long long order_time = 0;
  Split split = Split::Train;
  int label = 0;  // −1 for unlabeled slices
  std::string path;
  // Generation parameters; not part of the manifest file.
  int render_class = 0;
  double drift = 0.0;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::vector<SliceRecord> slices;

  std::vector<int> orders(Split s) const {
    std::vector<int> ids;
    for (const auto& r : slices)
      if (r.split == s && (ids.empty() || ids.back() != r.order_id)) ids.push_back(r.order_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  Manifest subset(Split s) const {
    Manifest m;
    for (const auto& r : slices)
      if (r.split == s) m.slices.push_back(r);
    return m;
  }

  std::array<std::size_t, kNumClasses> class_histogram() const {
    std::array<std::size_t, kNumClasses> h{};
    for (const auto& r : slices)
      if (r.label >= 0) ++h[std::size_t(r.label)];
    return h;
  }
};

inline std::string manifest_text(const Manifest& m) {
  std::string out = "order_id,order_time,split,label,relative_path\n";
  for (const auto& r : m.slices)
    out += std::to_string(r.order_id) + "," + std::to_string(r.order_time) + "," + split_name(r.split) + "," +
           std::to_string(r.label) + "," + r.path + "\n";
  return out;
}

inline Manifest parse_manifest(const std::string& text, const std::string& origin = "manifest") {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.starts_with("order_id"))) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw IoError(origin + ":" + std::to_string(lineno) + ": expected 5 fields");
    SliceRecord r;
    try {
      r.order_id = std::stoi(f[0]);
      r.order_time = std::stoll(f[1]);
      r.label = std::stoi(f[3]);
    } catch (const std::exception&) {
      throw IoError(origin + ":" + std::to_string(lineno) + ": malformed number");
    }
    r.split = parse_split(f[2]);
    r.path = f[4];
    if (r.label < -1 || r.label >= kNumClasses) throw IoError(origin + ":" + std::to_string(lineno) + ": label out of range");
    m.slices.push_back(std::move(r));
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  detail::write_file_atomic(path, manifest_text(m));
}
inline Manifest read_manifest(const std::filesystem::path& path) {
  return parse_manifest(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Dataset planning

struct DatasetSpec {
  std::size_t slices = 2000;
  std::array<std::size_t, 3> orders{32, 8, 10};  // train / val / test
  std::array<double, 3> split_fractions{0.65, 0.10, 0.25};
  std::array<double, kNumClasses> class_mix{0.39, 0.1055, 0.1065, 0.0935, 0.105, 0.0975, 0.102};
  double drift_start = 0.0;  // drift of the earliest order
  double drift_end = 0.3;    // drift of the latest order
  std::size_t unlabeled = 8000;
  std::size_t unlabeled_orders = 200;
  double unlabeled_drift_max = 1.5;
  std::uint64_t seed = 0;
  RenderConfig render{};

  void validate() const {
    auto check_fractions = [](auto const& v, const char* what) {
      double s = 0.0;
      for (double x : v) {
        if (!(x >= 0.0)) throw ConfigError(std::string(what) + " must be non-negative");
        s += x;
      }
      if (std::abs(s - 1.0) > 1e-9) throw ConfigError(std::string(what) + " must sum to 1");
    };
    check_fractions(split_fractions, "data.split_fractions");
    check_fractions(class_mix, "data.class_mix");
    for (std::size_t k = 0; k < 3; ++k)
      if (orders[k] == 0) throw ConfigError("data.orders entries must be positive");
    if (slices < orders[0] + orders[1] + orders[2]) throw ConfigError("data.slices must cover every order");
    if (drift_start < 0.0 || drift_end < 0.0 || unlabeled_drift_max < 0.0) throw ConfigError("drift levels must be non-negative");
    if (unlabeled > 0 && unlabeled_orders == 0) throw ConfigError("data.unlabeled_orders must be positive");
    if (render.image_size < 8 || render.pitch <= 2.0) throw ConfigError("render settings out of range");
    if (!(render.phase_jitter >= 0.0 && render.phase_jitter <= 1.0)) throw ConfigError("render.phase_jitter must lie in [0, 1]");
  }
};

/// Largest-remainder apportionment of `total` by the given fractions.
template <std::size_t N>
std::array<std::size_t, N> apportion(std::size_t total, const std::array<double, N>& fractions) {
  std::array<std::size_t, N> out{};
  std::array<std::pair<double, std::size_t>, N> rem{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const double exact = fractions[i] * double(total);
    out[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    used += out[i];
    rem[i] = {exact - double(out[i]), i};
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++out[rem[k % N].second];
  return out;
}

/// Label sequence with the given class totals in which every prefix keeps
/// each class within one sample of its proportional share.
template <std::size_t N>
std::vector<int> interleave_labels(const std::array<std::size_t, N>& counts) {
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  std::vector<int> seq;
  std::array<std::size_t, N> used{};
  for (std::size_t n = 1; n <= total; ++n) {
    double best = -1e300;
    std::size_t pick = 0;
    for (std::size_t c = 0; c < N; ++c) {
      if (used[c] == counts[c]) continue;
      const double deficit = double(n) * double(counts[c]) / double(total) - double(used[c]);
      if (deficit > best) best = deficit, pick = c;
    }
    ++used[pick];
    seq.push_back(int(pick));
  }
  return seq;
}

namespace detail {

inline std::string slice_path(const std::string& dir, int order_id, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "/o%05d_%04zu.nlxi", order_id, index);
  return dir + buf;
}

}  // namespace detail

/// Labeled archive: orders in chronological order, train orders first, then
/// validation, then test. Split slice totals follow split_fractions and are
/// spread evenly over each split's orders.
inline Manifest plan_labeled(const DatasetSpec& spec) {
  spec.validate();
  const auto split_slices = apportion(spec.slices, spec.split_fractions);
  const auto class_counts = apportion(spec.slices, spec.class_mix);
  const std::vector<int> labels = interleave_labels(class_counts);
  const std::size_t total_orders = spec.orders[0] + spec.orders[1] + spec.orders[2];
  Manifest m;
  std::size_t cursor = 0;
  int order_id = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t o = 0; o < spec.orders[s]; ++o, ++order_id) {
      const std::size_t n = split_slices[s] / spec.orders[s] + (o < split_slices[s] % spec.orders[s] ? 1 : 0);
      const double when = total_orders > 1 ? double(order_id) / double(total_orders - 1) : 0.0;
      const double drift = spec.drift_start + (spec.drift_end - spec.drift_start) * when;
      for (std::size_t k = 0; k < n; ++k, ++cursor) {
        SliceRecord r;
        r.order_id = order_id;
        r.order_time = 1000 + 10LL * order_id;
        r.split = static_cast<Split>(s);
        r.label = r.render_class = labels[cursor];
        r.drift = drift;
        r.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(Stream::Data), std::uint64_t(order_id), k});
        r.path = detail::slice_path("images", order_id, k);
        m.slices.push_back(std::move(r));
      }
    }
  }
  return m;
}

/// Unlabeled pool: same generator, hidden classes drawn from class_mix, labels
/// withheld, drift spread over [0, unlabeled_drift_max].
inline Manifest plan_unlabeled(const DatasetSpec& spec) {
  spec.validate();
  Manifest m;
  Rng rng = Rng::derive(spec.seed, Stream::Order, 99);
  const int first_order = 100000;
  for (std::size_t o = 0; o < spec.unlabeled_orders; ++o) {
    const std::size_t n = spec.unlabeled / spec.unlabeled_orders + (o < spec.unlabeled % spec.unlabeled_orders ? 1 : 0);
    const double drift = spec.unlabeled_orders > 1 ? spec.unlabeled_drift_max * double(o) / double(spec.unlabeled_orders - 1) : 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      double u = rng.uniform(), acc = 0.0;
      int cls = kNumClasses - 1;
      for (int c = 0; c < kNumClasses; ++c) {
        acc += spec.class_mix[std::size_t(c)];
        if (u < acc) {
          cls = c;
          break;
        }
      }
      SliceRecord r;
      r.order_id = first_order + int(o);
      r.order_time = 500 + 2LL * (long long)o;
      r.split = Split::Unlabeled;
      r.label = -1;
      r.render_class = cls;
      r.drift = drift;
      r.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(Stream::Data), std::uint64_t(r.order_id), k});
      r.path = detail::slice_path("unlabeled", r.order_id, k);
      m.slices.push_back(std::move(r));
    }
  }
  return m;
}

struct ContinualSpec {
  std::size_t batches = 4;
  std::size_t slices_per_batch = 400;
  std::size_t orders_per_batch = 5;
  std::size_t eval_orders_per_batch = 2;  // held out for the performance matrix
  double drift_first = 0.5;
  double drift_step = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (batches < 2) throw ConfigError("continual.batches must be at least 2");
    if (orders_per_batch < 2 || eval_orders_per_batch == 0 || eval_orders_per_batch >= orders_per_batch)
      throw ConfigError("continual batches need adaptation and held-out orders");
    if (slices_per_batch < orders_per_batch) throw ConfigError("continual.slices_per_batch too small");
    if (drift_first < 0.0 || drift_step < 0.0) throw ConfigError("continual drift must be non-negative");
  }
};

/// Sequential production batches with increasing drift. Within each batch the
/// earlier orders are adaptation data (split train), the later held out
/// (split test).
inline std::vector<Manifest> plan_continual(const ContinualSpec& spec, const std::array<double, kNumClasses>& class_mix) {
  spec.validate();
  std::vector<Manifest> out;
  const auto counts = apportion(spec.slices_per_batch, class_mix);
  const std::vector<int> labels = interleave_labels(counts);
  for (std::size_t b = 0; b < spec.batches; ++b) {
    Manifest m;
    // Each batch interleaves its labels independently; held-out orders are
    // drawn from the same label sequence.
    std::vector<int> perm(labels);
    Rng rng = Rng::derive(spec.seed, Stream::Order, 1000 + b);
    rng.shuffle(perm);
    const std::size_t adapt_orders = spec.orders_per_batch - spec.eval_orders_per_batch;
    std::size_t cursor = 0;
    for (std::size_t o = 0; o < spec.orders_per_batch; ++o) {
      const int order_id = 200000 + int(b * 1000 + o);
      const std::size_t n = spec.slices_per_batch / spec.orders_per_batch + (o < spec.slices_per_batch % spec.orders_per_batch ? 1 : 0);
      for (std::size_t k = 0; k < n; ++k, ++cursor) {
        SliceRecord r;
        r.order_id = order_id;
        r.order_time = 5000 + 100LL * (long long)b + (long long)o;
        r.split = o < adapt_orders ? Split::Train : Split::Test;
        r.label = r.render_class = perm[cursor];
        r.drift = spec.drift_first + spec.drift_step * double(b);
        r.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(Stream::Data), std::uint64_t(order_id), k});
        r.path = detail::slice_path("continual/batch" + std::to_string(b + 1), order_id, k);
        m.slices.push_back(std::move(r));
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// Training orders restricted to the earliest fraction p within each stratum
/// (orders grouped by majority class); other splits are kept unchanged.
inline Manifest stratified_fraction(const Manifest& m, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("labeled fraction must lie in (0, 1]");
  if (p == 1.0) return m;
  std::map<int, std::array<std::size_t, kNumClasses>> per_order;
  std::map<int, long long> order_time;
  for (const auto& r : m.slices)
    if (r.split == Split::Train) {
      auto& h = per_order[r.order_id];
      if (r.label >= 0) ++h[std::size_t(r.label)];
      order_time[r.order_id] = r.order_time;
    }
  std::map<int, std::vector<int>> strata;
  for (const auto& [id, h] : per_order) {
    const int majority = int(std::max_element(h.begin(), h.end()) - h.begin());
    strata[majority].push_back(id);
  }
  std::set<int> keep;
  for (auto& [cls, ids] : strata) {
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return order_time[a] < order_time[b]; });
    const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(p * double(ids.size()))));
    keep.insert(ids.begin(), ids.begin() + std::min(n, ids.size()));
  }
  Manifest out;
  for (const auto& r : m.slices)
    if (r.split != Split::Train || keep.count(r.order_id)) out.slices.push_back(r);
  return out;
}

/// Renders every slice of the manifest under root/.
inline void render_manifest(const Manifest& m, const std::filesystem::path& root, const RenderConfig& render) {
  for (const auto& r : m.slices) write_image(root / r.path, generate_slice(r.render_class, r.seed, r.drift, render));
}

// ---------------------------------------------------------------------------
// Loading

/// Records every image path a loader opens.
class AccessLog {
 public:
  void record(Split split, const std::string& path) {
    std::lock_guard<std::mutex> lock(mu_);
    entries_.emplace_back(split, path);
  }
  std::size_t count(Split split) const {
    std::lock_guard<std::mutex> lock(mu_);
    return std::size_t(std::count_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == split; }));
  }
  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return entries_.size();
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::pair<Split, std::string>> entries_;
};

/// In-memory images plus labels, all of one size.
struct SliceSet {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;  // N × H × W
  std::vector<int> labels;
  std::vector<int> order_ids;

  std::size_t size() const { return labels.size(); }
  const float* image(std::size_t i) const { return pixels.data() + i * height * width; }

  void append(const Image& img, int label, int order_id) {
    if (labels.empty()) height = img.height, width = img.width;
    if (img.height != height || img.width != width) throw DimensionError("slice set: image size differs from the first image");
    pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
    labels.push_back(label);
    order_ids.push_back(order_id);
  }

  void append(const SliceSet& other) {
    for (std::size_t i = 0; i < other.size(); ++i) {
      Image img{other.height, other.width, {other.image(i), other.image(i) + other.height * other.width}};
      append(img, other.labels[i], other.order_ids[i]);
    }
  }
};

/// Reads images for the manifest slices of the permitted splits; any request
/// for another split throws. Every read goes to the optional access log.
class ManifestLoader {
 public:
  ManifestLoader(std::filesystem::path root, std::set<Split> allowed, AccessLog* log = nullptr)
      : root_(std::move(root)), allowed_(std::move(allowed)), log_(log) {}

  SliceSet load(const Manifest& m, Split split) const {
    if (!allowed_.count(split)) throw ContractError(std::string("loader: split '") + split_name(split) + "' is not permitted here");
    SliceSet set;
    for (const auto& r : m.slices) {
      if (r.split != split) continue;
      if (log_) log_->record(split, r.path);
      set.append(read_image(root_ / r.path), r.label, r.order_id);
    }
    if (set.size() == 0) throw IoError(std::string("no '") + split_name(split) + "' slices in manifest");
    return set;
  }

 private:
  std::filesystem::path root_;
  std::set<Split> allowed_;
  AccessLog* log_;
};

/// Renders slices straight into memory (no files).
inline SliceSet render_set(const Manifest& m, Split split, const RenderConfig& render) {
  SliceSet set;
  for (const auto& r : m.slices)
    if (r.split == split) set.append(generate_slice(r.render_class, r.seed, r.drift, render), r.label, r.order_id);
  return set;
}

// ---------------------------------------------------------------------------
// Views and normalization

/// Bilinear resample of the window [y0, y0+h) × [x0, x0+w) of a row-major
/// image onto an out_h × out_w grid (pixel-center aligned, edge clamped).
inline void resample(const float* src, std::size_t src_h, std::size_t src_w, double y0, double x0, double h, double w,
                     std::size_t out_h, std::size_t out_w, bool flip, float* dst) {
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double sy = std::clamp(y0 + (double(oy) + 0.5) * h / double(out_h) - 0.5, 0.0, double(src_h - 1));
    const std::size_t y_lo = static_cast<std::size_t>(sy), y_hi = std::min(y_lo + 1, src_h - 1);
    const double fy = sy - double(y_lo);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double sx = std::clamp(x0 + (double(ox) + 0.5) * w / double(out_w) - 0.5, 0.0, double(src_w - 1));
      const std::size_t x_lo = static_cast<std::size_t>(sx), x_hi = std::min(x_lo + 1, src_w - 1);
      const double fx = sx - double(x_lo);
      const double top = src[y_lo * src_w + x_lo] * (1 - fx) + src[y_lo * src_w + x_hi] * fx;
      const double bot = src[y_hi * src_w + x_lo] * (1 - fx) + src[y_hi * src_w + x_hi] * fx;
      dst[oy * out_w + (flip ? out_w - 1 - ox : ox)] = static_cast<float>(top * (1 - fy) + bot * fy);
    }
  }
}

struct AugmentConfig {
  double min_scale = 0.5;  // crop area fraction range [min_scale, 1]
  double min_aspect = 3.0 / 4.0;
  double max_aspect = 4.0 / 3.0;
  double flip_probability = 0.5;
  double eval_crop = 0.875;  // centre crop fraction after the eval resize
};

/// Random resized crop followed by a random horizontal flip.
inline void train_view(const float* src, std::size_t h, std::size_t w, std::size_t out, const AugmentConfig& cfg, Rng& rng,
                       float* dst) {
  const double area = double(h * w);
  double ch = double(h), cw = double(w);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(cfg.min_scale, 1.0);
    const double aspect = std::exp(rng.uniform(std::log(cfg.min_aspect), std::log(cfg.max_aspect)));
    const double tw = std::sqrt(target * aspect), th = std::sqrt(target / aspect);
    if (tw <= double(w) && th <= double(h)) {
      ch = th, cw = tw;
      break;
    }
  }
  const double y0 = rng.uniform(0.0, double(h) - ch), x0 = rng.uniform(0.0, double(w) - cw);
  const bool flip = rng.bernoulli(cfg.flip_probability);
  resample(src, h, w, y0, x0, ch, cw, out, out, flip, dst);
}

/// Deterministic resize so the centre crop of fraction eval_crop spans the
/// output, i.e. resize then centre crop.
inline void eval_view(const float* src, std::size_t h, std::size_t w, std::size_t out, const AugmentConfig& cfg, float* dst) {
  const double ch = double(h) * cfg.eval_crop, cw = double(w) * cfg.eval_crop;
  resample(src, h, w, (double(h) - ch) / 2.0, (double(w) - cw) / 2.0, ch, cw, out, out, false, dst);
}

struct NormStats {
  double mean = 0.0;
  double stddev = 1.0;
};

/// Pixel mean and standard deviation over a (training) set.
inline NormStats compute_norm_stats(const SliceSet& set) {
  if (set.pixels.empty()) throw ContractError("normalization statistics of an empty set");
  double s = 0.0, ss = 0.0;
  for (float v : set.pixels) s += v, ss += double(v) * v;
  const double n = double(set.pixels.size());
  const double mean = s / n;
  const double var = std::max(0.0, ss / n - mean * mean);
  return {mean, var > 0.0 ? std::sqrt(var) : 1.0};
}

}  // namespace nlxct
