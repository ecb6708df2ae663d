#pragma once

// Procedural chest phantoms with label-coded inserts and templated reports.
//
// Geometry is expressed in normalized volume coordinates (voxel centres at
// (i + 0.5) / n along each axis); x runs patient left-right, y anterior to
// posterior, z superior to inferior. The insert table is fixed so that a label
// always refers to the same physical finding.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <utility>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "x2ct/binary_io.hpp"
#include "x2ct/error.hpp"
#include "x2ct/parallel.hpp"
#include "x2ct/rng.hpp"

namespace x2ct {

inline constexpr double kAirHu = -1000.0;
inline constexpr double kMinHu = -1024.0;
inline constexpr double kMaxHu = 3000.0;

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

enum class InsertShape { Ellipsoid, Box };

struct InsertSpec {
  std::string_view name;
  InsertShape shape;
  Vec3 center;
  Vec3 half_extent;
  double hu;
};

// Label-to-insert table. Order defines label indices.
inline constexpr std::array<InsertSpec, 8> kInsertTable{{
    {"cardiomegaly", InsertShape::Ellipsoid, {0.45, 0.40, 0.60}, {0.17, 0.14, 0.13}, 55.0},
    {"pleural_effusion", InsertShape::Box, {0.70, 0.50, 0.76}, {0.12, 0.14, 0.05}, 15.0},
    {"pneumothorax", InsertShape::Ellipsoid, {0.27, 0.46, 0.33}, {0.08, 0.12, 0.10}, -1000.0},
    {"lung_nodule", InsertShape::Ellipsoid, {0.72, 0.42, 0.44}, {0.045, 0.045, 0.045}, 120.0},
    {"consolidation", InsertShape::Ellipsoid, {0.30, 0.50, 0.68}, {0.08, 0.10, 0.08}, 30.0},
    {"calcification", InsertShape::Ellipsoid, {0.34, 0.40, 0.47}, {0.03, 0.03, 0.03}, 1200.0},
    {"emphysema", InsertShape::Box, {0.70, 0.48, 0.36}, {0.09, 0.13, 0.09}, -950.0},
    {"lymphadenopathy", InsertShape::Ellipsoid, {0.50, 0.44, 0.40}, {0.07, 0.06, 0.07}, 150.0},
}};

struct LabelSpace {
  std::vector<std::string> names;
  std::vector<double> prevalence;

  std::size_t size() const { return names.size(); }

  // First `count` rows of the insert table at a shared prevalence.
  static LabelSpace standard(std::size_t count = kInsertTable.size(), double prevalence = 0.3) {
    if (count < 1 || count > kInsertTable.size())
      throw ConfigError("label count must be in [1, " + std::to_string(kInsertTable.size()) + "]");
    LabelSpace ls;
    for (std::size_t i = 0; i < count; ++i) ls.names.emplace_back(kInsertTable[i].name);
    ls.prevalence.assign(count, prevalence);
    ls.validate();
    return ls;
  }

  void validate() const {
    if (names.empty()) throw ConfigError("label space is empty");
    if (prevalence.size() != names.size()) throw ConfigError("prevalence length differs from label count");
    std::set<std::string> seen;
    for (const auto& n : names)
      if (!seen.insert(n).second) throw ConfigError("duplicate label name: " + n);
    for (double p : prevalence)
      if (!(p > 0.0 && p < 1.0)) throw ConfigError("label prevalence must lie strictly inside (0, 1)");
  }
};

struct Volume {
  std::array<std::uint32_t, 3> dims{};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::vector<double> voxels;  // x fastest

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims[0] * (y + dims[1] * z);
  }
  double at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }
  double& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
};

enum class Split { Train, Test };

inline std::string_view split_name(Split s) { return s == Split::Train ? "train" : "test"; }

struct Triplet {
  std::string id;
  std::string volume_ref;
  std::string report_text;
  std::vector<int> labels;
  Split split = Split::Train;
};

struct GenConfig {
  std::size_t n_train = 512;
  std::size_t n_test = 128;
  std::size_t n_labels = 8;
  double prevalence = 0.3;
  std::array<std::uint32_t, 3> dims{64, 64, 64};
  double spacing_mm = 1.0;
  double noise_hu = 10.0;
  std::uint64_t seed = 7;
  // Test hook: every triplet gets exactly these labels.
  std::optional<std::vector<int>> forced_labels;

  LabelSpace label_space() const { return LabelSpace::standard(n_labels, prevalence); }

  void validate() const {
    if (n_train < 1 || n_test < 1) throw ConfigError("gen.n_train and gen.n_test must be >= 1");
    for (auto d : dims)
      if (d < 8) throw ConfigError("gen dims must each be >= 8");
    if (!(spacing_mm > 0.0)) throw ConfigError("gen.spacing_mm must be positive");
    if (!(noise_hu >= 0.0)) throw ConfigError("gen.noise_hu must be non-negative");
    label_space();
    if (forced_labels && forced_labels->size() != n_labels)
      throw ConfigError("forced labels length differs from label count");
  }
};

// One generated study before its volume is synthesized.
struct StudyPlan {
  Triplet triplet;
  std::uint64_t subject_seed = 0;
};

// ---- reports ----------------------------------------------------------------

inline std::string capitalized(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

inline std::string positive_sentence(std::string_view label) { return capitalized(std::string(label)) + " is present."; }
inline std::string negative_sentence(std::string_view label) { return "No " + std::string(label) + "."; }

// One sentence per positive label, negations for a seeded half (rounded up)
// of the negatives, all in seeded order.
inline std::string render_report(const std::vector<int>& labels, const LabelSpace& space, SplitMix64& rng) {
  if (labels.size() != space.size()) throw DataError("render_report: label vector length differs from label space");
  std::vector<std::string> sentences;
  std::vector<std::size_t> negatives;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) sentences.push_back(positive_sentence(space.names[i]));
    else negatives.push_back(i);
  }
  shuffle(negatives, rng);
  const std::size_t keep = (negatives.size() + 1) / 2;
  std::sort(negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(keep));
  for (std::size_t k = 0; k < keep; ++k) sentences.push_back(negative_sentence(space.names[negatives[k]]));
  shuffle(sentences, rng);
  std::string out;
  for (const auto& s : sentences) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

inline std::vector<int> sample_labels(const LabelSpace& space, SplitMix64& rng) {
  std::vector<int> labels(space.size());
  for (std::size_t i = 0; i < space.size(); ++i) labels[i] = rng.bernoulli(space.prevalence[i]) ? 1 : 0;
  return labels;
}

// ---- volumes ----------------------------------------------------------------

namespace detail {

inline bool inside(InsertShape shape, const Vec3& p, const Vec3& c, const Vec3& h) {
  const double dx = (p.x - c.x) / h.x, dy = (p.y - c.y) / h.y, dz = (p.z - c.z) / h.z;
  if (shape == InsertShape::Box) return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0 && std::abs(dz) <= 1.0;
  return dx * dx + dy * dy + dz * dz <= 1.0;
}

// Sets voxels whose centre satisfies pred; only the box centre +- half is scanned.
template <class Pred>
void paint(Volume& v, double hu, const Vec3& c, const Vec3& half, Pred&& pred) {
  auto range = [&](double lo, double hi, std::uint32_t n) {
    const auto first = static_cast<long>(std::floor(lo * n - 0.5));
    const auto last = static_cast<long>(std::ceil(hi * n - 0.5));
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(std::max(0L, first)),
                                               static_cast<std::size_t>(std::clamp(last + 1, 0L, static_cast<long>(n))));
  };
  const auto [x0, x1] = range(c.x - half.x, c.x + half.x, v.dims[0]);
  const auto [y0, y1] = range(c.y - half.y, c.y + half.y, v.dims[1]);
  const auto [z0, z1] = range(c.z - half.z, c.z + half.z, v.dims[2]);
  for (std::size_t z = z0; z < z1; ++z)
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) {
        const Vec3 p{(x + 0.5) / v.dims[0], (y + 0.5) / v.dims[1], (z + 0.5) / v.dims[2]};
        if (pred(p)) v.at(x, y, z) = hu;
      }
}

inline void paint_shape(Volume& v, double hu, InsertShape shape, const Vec3& c, const Vec3& half) {
  paint(v, hu, c, half, [&](const Vec3& p) { return inside(shape, p, c, half); });
}

}  // namespace detail

// Builds one phantom. Anatomy: air, body ellipsoid (40 HU), heart (50 HU),
// two lungs (-800 HU), spine cylinder (700 HU), then one insert per positive
// label, then Gaussian noise inside the body. Body and lung sizes vary per
// subject by up to +-8%.
inline Volume synthesize_volume(const std::vector<int>& labels, std::uint64_t subject_seed, const GenConfig& cfg) {
  if (labels.size() > kInsertTable.size()) throw DataError("more labels than inserts");
  SplitMix64 rng(subject_seed);
  const double body_scale = rng.uniform(0.92, 1.08);
  const double lung_scale = rng.uniform(0.92, 1.08);

  Volume v;
  v.dims = cfg.dims;
  v.spacing_mm = {cfg.spacing_mm, cfg.spacing_mm, cfg.spacing_mm};
  v.voxels.assign(v.voxel_count(), kAirHu);

  const Vec3 body_c{0.5, 0.5, 0.5};
  const Vec3 body_h{0.42 * body_scale, 0.30 * body_scale, 0.46};
  auto in_body = [&](const Vec3& p) { return detail::inside(InsertShape::Ellipsoid, p, body_c, body_h); };
  detail::paint_shape(v, 40.0, InsertShape::Ellipsoid, body_c, body_h);
  const Vec3 lung_h{0.14 * lung_scale, 0.18 * lung_scale, 0.30 * lung_scale};
  for (double cx : {0.28, 0.72}) detail::paint_shape(v, -800.0, InsertShape::Ellipsoid, {cx, 0.48, 0.52}, lung_h);
  detail::paint_shape(v, 50.0, InsertShape::Ellipsoid, {0.45, 0.40, 0.60}, {0.10, 0.09, 0.09});
  detail::paint(v, 700.0, {0.5, 0.70, 0.5}, {0.06, 0.06, 0.42}, [](const Vec3& p) {
    const double dx = p.x - 0.5, dy = p.y - 0.70;
    return dx * dx + dy * dy <= 0.06 * 0.06 && p.z >= 0.08 && p.z <= 0.92;
  });
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    const auto& ins = kInsertTable[i];
    detail::paint_shape(v, ins.hu, ins.shape, ins.center, ins.half_extent);
  }
  if (cfg.noise_hu > 0.0) {
    for (std::size_t z = 0; z < v.dims[2]; ++z)
      for (std::size_t y = 0; y < v.dims[1]; ++y)
        for (std::size_t x = 0; x < v.dims[0]; ++x) {
          const Vec3 p{(x + 0.5) / v.dims[0], (y + 0.5) / v.dims[1], (z + 0.5) / v.dims[2]};
          if (in_body(p)) v.at(x, y, z) += cfg.noise_hu * rng.normal();
        }
  }
  for (auto& hu : v.voxels) hu = std::clamp(hu, kMinHu, kMaxHu);
  return v;
}

// Volume file: "X2VOL", 3 x u32 dims, 3 x f32 spacing, f32 voxels (x fastest).
inline std::vector<char> encode_volume_file(const Volume& v) {
  io::ByteWriter w;
  w.bytes("X2VOL");
  for (auto d : v.dims) w.u32(d);
  for (auto s : v.spacing_mm) w.f32(static_cast<float>(s));
  for (double hu : v.voxels) w.f32(static_cast<float>(hu));
  return w.buffer();
}

inline Volume decode_volume_file(std::vector<char> bytes, const std::string& source = "volume") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic("X2VOL");
  Volume v;
  for (auto& d : v.dims) d = r.u32();
  for (auto& s : v.spacing_mm) s = r.f32();
  v.voxels.resize(v.voxel_count());
  for (auto& hu : v.voxels) hu = r.f32();
  if (!r.done()) throw DataError(source + ": trailing bytes after voxel payload");
  return v;
}

inline void write_volume(const std::filesystem::path& path, const Volume& v) {
  io::write_atomic(path, encode_volume_file(v));
}

inline Volume read_volume(const std::filesystem::path& path) {
  return decode_volume_file(io::read_file(path), path.string());
}

// ---- datasets ---------------------------------------------------------------

inline std::string study_id(Split split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu", split == Split::Train ? "tr" : "te", index);
  return buf;
}

// Labels, reports and subject seeds for every study, sorted by id.
inline std::vector<StudyPlan> plan_dataset(const GenConfig& cfg) {
  cfg.validate();
  const LabelSpace space = cfg.label_space();
  std::vector<StudyPlan> plans;
  auto add = [&](Split split, std::size_t count, std::uint64_t stream_base) {
    for (std::size_t i = 0; i < count; ++i) {
      SplitMix64 rng(derive_seed(cfg.seed, stream_base + i));
      StudyPlan p;
      p.triplet.id = study_id(split, i);
      p.triplet.split = split;
      p.triplet.labels = cfg.forced_labels ? *cfg.forced_labels : sample_labels(space, rng);
      p.triplet.report_text = render_report(p.triplet.labels, space, rng);
      p.triplet.volume_ref = "volumes/" + p.triplet.id + ".x2vol";
      p.subject_seed = rng.next();
      plans.push_back(std::move(p));
    }
  };
  add(Split::Train, cfg.n_train, 0);
  add(Split::Test, cfg.n_test, 1ULL << 32);
  std::sort(plans.begin(), plans.end(),
            [](const StudyPlan& a, const StudyPlan& b) { return a.triplet.id < b.triplet.id; });
  return plans;
}

inline std::string manifest_line(const Triplet& t) {
  nlohmann::ordered_json j;
  j["id"] = t.id;
  j["volume"] = t.volume_ref;
  j["report"] = t.report_text;
  j["labels"] = t.labels;
  j["split"] = std::string(split_name(t.split));
  return j.dump();
}

inline Triplet parse_manifest_line(const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    Triplet t;
    t.id = j.at("id").get<std::string>();
    t.volume_ref = j.at("volume").get<std::string>();
    t.report_text = j.at("report").get<std::string>();
    t.labels = j.at("labels").get<std::vector<int>>();
    const auto split = j.at("split").get<std::string>();
    if (split == "train") t.split = Split::Train;
    else if (split == "test") t.split = Split::Test;
    else throw DataError("unknown split '" + split + "'");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest record: ") + e.what());
  }
}

inline std::vector<Triplet> read_manifest(const std::filesystem::path& path) {
  const std::string text = io::read_text(path);
  std::vector<Triplet> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    if (end > start) out.push_back(parse_manifest_line(text.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

// Writes volumes and manifest.jsonl under out_dir. `on_volume` sees every
// synthesized volume (used to project radiographs alongside).
inline std::vector<Triplet> generate_dataset(
    const GenConfig& cfg, const std::filesystem::path& out_dir,
    const std::function<void(const Triplet&, const Volume&)>& on_volume = {}) {
  const auto plans = plan_dataset(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "volumes", ec);
  if (ec) throw DataError("cannot create output directory " + out_dir.string() + ": " + ec.message());
  parallel_for(plans.size(), [&](std::size_t i) {
    const auto& p = plans[i];
    const Volume v = synthesize_volume(p.triplet.labels, p.subject_seed, cfg);
    write_volume(out_dir / p.triplet.volume_ref, v);
    if (on_volume) on_volume(p.triplet, v);
  });
  std::string manifest;
  std::vector<Triplet> triplets;
  for (const auto& p : plans) {
    manifest += manifest_line(p.triplet) + "\n";
    triplets.push_back(p.triplet);
  }
  io::write_atomic(out_dir / "manifest.jsonl", manifest);
  return triplets;
}

}  // namespace x2ct
