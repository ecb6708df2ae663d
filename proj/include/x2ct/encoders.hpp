#pragma once

// The three modality encoders. Volume and report encoders are linear maps
// over handcrafted features (the frozen teachers once pre-aligned); the
// radiograph encoder is a small patch network trained as the student.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "x2ct/binary_io.hpp"
#include "x2ct/drr.hpp"
#include "x2ct/error.hpp"
#include "x2ct/phantom.hpp"
#include "x2ct/rng.hpp"
#include "x2ct/tensor.hpp"

namespace x2ct {

enum class Modality { Volume, Report, Radiograph };

inline char modality_code(Modality m) {
  switch (m) {
    case Modality::Volume: return 'C';
    case Modality::Report: return 'R';
    case Modality::Radiograph: return 'X';
  }
  return '?';
}

struct Embedding {
  std::vector<double> vector;
  Modality modality = Modality::Radiograph;
  std::string item_id;
};

// Row-aligned embeddings for a list of items.
struct EmbeddingSet {
  Modality modality = Modality::Radiograph;
  std::vector<std::string> ids;
  Tensor matrix;  // n x d, unit rows
};

using ParamMap = std::map<std::string, Tensor>;

struct EncoderParams {
  ParamMap tensors;
  bool trainable = true;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("checkpoint is missing tensor '" + name + "'");
    return it->second;
  }
};

struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden = 64;
  std::size_t patch = 8;
  std::size_t image_size = 64;

  void validate() const {
    if (embed_dim < 1 || hidden < 1) throw ConfigError("model.embed_dim and model.hidden must be >= 1");
    if (patch < 1 || image_size % patch != 0)
      throw ConfigError("model.patch must divide drr.out_size (" + std::to_string(image_size) + ")");
  }
  std::size_t patches_per_image() const { return (image_size / patch) * (image_size / patch); }
  std::size_t patch_pixels() const { return patch * patch; }
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline Tensor init_uniform(Shape shape, std::size_t fan_in, SplitMix64& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

inline void init_linear(ParamMap& params, const std::string& prefix, std::size_t in, std::size_t out,
                        SplitMix64& rng) {
  params[prefix + ".weight"] = init_uniform({in, out}, in, rng);
  params[prefix + ".bias"] = init_uniform({out}, in, rng);
}

// ---- report encoder ---------------------------------------------------------

// Template vocabulary: each label name, its negated bigram "no <label>",
// and the words "is" and "present".
struct ReportVocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, std::size_t> index;

  static ReportVocab from_labels(const LabelSpace& space) {
    ReportVocab v;
    for (const auto& n : space.names) v.add(n);
    for (const auto& n : space.names) v.add("no " + n);
    v.add("is");
    v.add("present");
    return v;
  }

  std::size_t size() const { return tokens.size(); }

 private:
  void add(const std::string& t) {
    index.emplace(t, tokens.size());
    tokens.push_back(t);
  }
};

// Lowercase, whitespace-split, punctuation stripped from token ends.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    auto keep = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
    std::size_t b = 0, e = cur.size();
    while (b < e && !keep(cur[b])) ++b;
    while (e > b && !keep(cur[e - 1])) --e;
    if (e > b) out.push_back(cur.substr(b, e - b));
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) flush();
    else cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  flush();
  return out;
}

// Bag of template tokens. "no" followed by a known label counts as the
// negated bigram only; unknown tokens are ignored.
inline std::vector<double> report_counts(std::string_view text, const ReportVocab& vocab) {
  std::vector<double> counts(vocab.size(), 0.0);
  const auto toks = tokenize(text);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (toks[i] == "no" && i + 1 < toks.size()) {
      auto it = vocab.index.find("no " + toks[i + 1]);
      if (it != vocab.index.end()) {
        counts[it->second] += 1.0;
        ++i;
        continue;
      }
    }
    auto it = vocab.index.find(toks[i]);
    if (it != vocab.index.end()) counts[it->second] += 1.0;
  }
  return counts;
}

// ---- volume encoder ---------------------------------------------------------

inline constexpr std::size_t kVolumeGrid = 4;
inline constexpr std::size_t kHistBins = 16;
inline constexpr double kHistLo = -1024.0;
inline constexpr double kHistWidth = 160.0;
inline constexpr std::size_t kVolumeFeatures = kVolumeGrid * kVolumeGrid * kVolumeGrid + kHistBins;

inline std::size_t hist_bin(double hu) {
  const double b = std::floor((hu - kHistLo) / kHistWidth);
  return static_cast<std::size_t>(std::clamp(b, 0.0, static_cast<double>(kHistBins - 1)));
}

// 64 block means (HU / 1000) over a 4x4x4 grid, then a 16-bin HU histogram
// with 160 HU bins from -1024 (outer bins absorb the tails) normalized to
// sum 1. Dimensions not divisible by 4 are padded by edge replication.
inline std::vector<double> volume_features(const Volume& vol) {
  for (auto d : vol.dims)
    if (d < 2) throw DataError("degenerate volume: every dimension must be >= 2");
  std::vector<double> f(kVolumeFeatures, 0.0);
  std::size_t block[3];
  for (int a = 0; a < 3; ++a) block[a] = (vol.dims[a] + kVolumeGrid - 1) / kVolumeGrid;
  const auto block_voxels = static_cast<double>(block[0] * block[1] * block[2]);
  const std::size_t padded_z = block[2] * kVolumeGrid, padded_y = block[1] * kVolumeGrid,
                    padded_x = block[0] * kVolumeGrid;
  for (std::size_t z = 0; z < padded_z; ++z) {
    const std::size_t sz = std::min<std::size_t>(z, vol.dims[2] - 1);
    for (std::size_t y = 0; y < padded_y; ++y) {
      const std::size_t sy = std::min<std::size_t>(y, vol.dims[1] - 1);
      for (std::size_t x = 0; x < padded_x; ++x) {
        const std::size_t sx = std::min<std::size_t>(x, vol.dims[0] - 1);
        const std::size_t cell = (x / block[0]) + kVolumeGrid * ((y / block[1]) + kVolumeGrid * (z / block[2]));
        f[cell] += vol.at(sx, sy, sz) / 1000.0;
      }
    }
  }
  for (std::size_t c = 0; c < kVolumeGrid * kVolumeGrid * kVolumeGrid; ++c) f[c] /= block_voxels;
  std::array<std::size_t, kHistBins> counts{};
  for (double hu : vol.voxels) ++counts[hist_bin(hu)];
  const auto n = static_cast<double>(vol.voxel_count());
  for (std::size_t b = 0; b < kHistBins; ++b)
    f[kVolumeGrid * kVolumeGrid * kVolumeGrid + b] = static_cast<double>(counts[b]) / n;
  return f;
}

// ---- radiograph encoder -----------------------------------------------------

// Non-overlapping patch x patch tiles, row-major over tiles, one tile per row.
inline Tensor image_patches(const Radiograph& img, const ModelConfig& cfg) {
  if (img.width != cfg.image_size || img.height != cfg.image_size)
    throw ShapeError("radiograph is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     ", encoder expects " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  if (img.width % cfg.patch != 0 || img.height % cfg.patch != 0)
    throw ShapeError("radiograph size is not divisible by patch size " + std::to_string(cfg.patch));
  const std::size_t tiles_x = img.width / cfg.patch, tiles_y = img.height / cfg.patch;
  Tensor out({tiles_x * tiles_y, cfg.patch_pixels()});
  for (std::size_t ty = 0; ty < tiles_y; ++ty)
    for (std::size_t tx = 0; tx < tiles_x; ++tx) {
      const std::size_t r = ty * tiles_x + tx;
      for (std::size_t py = 0; py < cfg.patch; ++py)
        for (std::size_t px = 0; px < cfg.patch; ++px)
          out(r, py * cfg.patch + px) = img.at(tx * cfg.patch + px, ty * cfg.patch + py);
    }
  return out;
}

// Stacks per-image patch matrices for a batch.
inline Tensor stack_rows(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) return Tensor({0, 0});
  const std::size_t cols = parts.front()->cols();
  std::size_t rows = 0;
  for (auto* p : parts) rows += p->rows();
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (auto* p : parts) {
    std::copy(p->data.begin(), p->data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p->data.size();
  }
  return out;
}

// Parameter handles for one forward pass.
struct StudentVars {
  Var patch_w, patch_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

struct LinearVars {
  Var w, b;
};

inline EncoderParams init_student(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(seed);
  EncoderParams p;
  init_linear(p.tensors, "student.patch", cfg.patch_pixels(), cfg.hidden, rng);
  init_linear(p.tensors, "student.fc1", cfg.hidden, cfg.hidden, rng);
  init_linear(p.tensors, "student.fc2", cfg.hidden, cfg.embed_dim, rng);
  p.trainable = true;
  return p;
}

inline EncoderParams init_teachers(std::size_t vocab_size, std::size_t embed_dim, std::uint64_t seed) {
  SplitMix64 rng(seed);
  EncoderParams p;
  init_linear(p.tensors, "volume", kVolumeFeatures, embed_dim, rng);
  init_linear(p.tensors, "report", vocab_size, embed_dim, rng);
  p.tensors["volume.feature_mean"] = Tensor({kVolumeFeatures});
  p.tensors["volume.feature_scale"] = Tensor({kVolumeFeatures}, 1.0);
  p.trainable = true;
  return p;
}

inline StudentVars student_leaves(Tape& tape, const EncoderParams& p, bool requires_grad) {
  auto leaf = [&](const char* n) { return tape.leaf(p.at(n), requires_grad); };
  return {leaf("student.patch.weight"), leaf("student.patch.bias"), leaf("student.fc1.weight"),
          leaf("student.fc1.bias"),     leaf("student.fc2.weight"), leaf("student.fc2.bias")};
}

inline LinearVars linear_leaves(Tape& tape, const EncoderParams& p, const std::string& prefix, bool requires_grad) {
  return {tape.leaf(p.at(prefix + ".weight"), requires_grad), tape.leaf(p.at(prefix + ".bias"), requires_grad)};
}

// patches: (n * per_image) x patch_pixels. Per-patch linear+relu embedding,
// mean over patches, then Linear-ReLU-Linear and row normalization.
inline Var student_forward(const StudentVars& v, Var patches, std::size_t per_image) {
  Var h = relu(add_bias(matmul(patches, v.patch_w), v.patch_b));
  Var pooled = mean_pool_rows(h, per_image);
  Var z = relu(add_bias(matmul(pooled, v.fc1_w), v.fc1_b));
  return l2_normalize_rows(add_bias(matmul(z, v.fc2_w), v.fc2_b));
}

inline Var linear_encoder_forward(const LinearVars& v, Var features) {
  return l2_normalize_rows(add_bias(matmul(features, v.w), v.b));
}

inline Embedding row_embedding(const Tensor& m, std::size_t r, Modality mod, std::string id) {
  Embedding e;
  e.vector.assign(m.row(r).begin(), m.row(r).end());
  e.modality = mod;
  e.item_id = std::move(id);
  return e;
}

inline Tensor embed_linear(const EncoderParams& p, const std::string& prefix, const Tensor& features) {
  Tape tape;
  const auto v = linear_leaves(tape, p, prefix, false);
  return tape.value(linear_encoder_forward(v, tape.leaf(features)));
}

inline Tensor embed_reports(const std::vector<std::string>& texts, const ReportVocab& vocab, const EncoderParams& p) {
  Tensor counts({texts.size(), vocab.size()});
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto c = report_counts(texts[i], vocab);
    std::copy(c.begin(), c.end(), counts.row(i).begin());
  }
  return embed_linear(p, "report", counts);
}

// Per-feature standardization statistics, fixed from the training split.
inline void fit_volume_standardizer(ParamMap& params, const Tensor& features) {
  const std::size_t n = features.rows(), d = features.cols();
  Tensor mean({d}), scale({d}, 1.0);
  for (std::size_t c = 0; c < d; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += features(r, c);
    m /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) var += (features(r, c) - m) * (features(r, c) - m);
    var /= static_cast<double>(n);
    mean.data[c] = m;
    if (var > 1e-24) scale.data[c] = std::sqrt(var);
  }
  params["volume.feature_mean"] = std::move(mean);
  params["volume.feature_scale"] = std::move(scale);
}

inline Tensor standardize_volume_features(const Tensor& features, const EncoderParams& p) {
  const Tensor& mean = p.at("volume.feature_mean");
  const Tensor& scale = p.at("volume.feature_scale");
  if (mean.size() != features.cols()) throw ShapeError("volume features do not match the standardizer width");
  Tensor out = features;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = (out(r, c) - mean.data[c]) / scale.data[c];
  return out;
}

inline Tensor embed_volume_features(const Tensor& features, const EncoderParams& p) {
  return embed_linear(p, "volume", standardize_volume_features(features, p));
}

// Radiographs embedded in chunks of `chunk` images.
inline Tensor embed_radiographs(const std::vector<Tensor>& patches, const EncoderParams& p, const ModelConfig& cfg,
                                std::size_t chunk = 64) {
  Tensor out({patches.size(), cfg.embed_dim});
  for (std::size_t start = 0; start < patches.size(); start += chunk) {
    const std::size_t end = std::min(patches.size(), start + chunk);
    std::vector<const Tensor*> parts;
    for (std::size_t i = start; i < end; ++i) parts.push_back(&patches[i]);
    Tape tape;
    const auto v = student_leaves(tape, p, false);
    const Tensor& e = tape.value(student_forward(v, tape.leaf(stack_rows(parts)), cfg.patches_per_image()));
    std::copy(e.data.begin(), e.data.end(), out.row(start).begin());
  }
  return out;
}

inline Embedding encode_report(const std::string& text, const ReportVocab& vocab, const EncoderParams& p) {
  return row_embedding(embed_reports({text}, vocab, p), 0, Modality::Report, {});
}

inline Embedding encode_volume(const Volume& vol, const EncoderParams& p) {
  const auto f = volume_features(vol);
  return row_embedding(embed_volume_features(Tensor({1, f.size()}, f), p), 0, Modality::Volume, {});
}

inline Embedding encode_radiograph(const Radiograph& img, const EncoderParams& p, const ModelConfig& cfg) {
  return row_embedding(embed_radiographs({image_patches(img, cfg)}, p, cfg), 0, Modality::Radiograph, img.source_id);
}

// ---- files ------------------------------------------------------------------

// Checkpoint: "X2CKPT", u32 version, u32 count, then per tensor
// u16 name length, name, u32 rank, rank x u32 dims, f64 payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<char> encode_checkpoint(const ParamMap& params) {
  io::ByteWriter w;
  w.bytes("X2CKPT");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data) w.f64(v);
  }
  return w.buffer();
}

inline ParamMap decode_checkpoint(std::vector<char> bytes, const std::string& source = "checkpoint") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic("X2CKPT");
  if (const auto version = r.u32(); version != kCheckpointVersion)
    throw DataError(source + ": unsupported checkpoint version " + std::to_string(version));
  ParamMap params;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    Tensor t(shape);
    for (auto& v : t.data) v = r.f64();
    params.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw DataError(source + ": trailing bytes after tensor table");
  return params;
}

inline std::string checkpoint_hash(const ParamMap& params) { return io::sha256_hex(encode_checkpoint(params)); }

inline void write_checkpoint(const std::filesystem::path& path, const EncoderParams& p) {
  io::write_atomic(path, encode_checkpoint(p.tensors));
}

inline EncoderParams read_checkpoint(const std::filesystem::path& path, bool trainable) {
  EncoderParams p;
  p.tensors = decode_checkpoint(io::read_file(path), path.string());
  p.trainable = trainable;
  return p;
}

// Embedding file: "X2EMB", u32 count, u32 dim, then per row u16 id length,
// id bytes, dim x f32.
inline std::vector<char> encode_embedding_file(const EmbeddingSet& set) {
  io::ByteWriter w;
  w.bytes("X2EMB");
  w.u32(static_cast<std::uint32_t>(set.ids.size()));
  w.u32(static_cast<std::uint32_t>(set.matrix.cols()));
  for (std::size_t i = 0; i < set.ids.size(); ++i) {
    w.u16(static_cast<std::uint16_t>(set.ids[i].size()));
    w.bytes(set.ids[i]);
    for (double v : set.matrix.row(i)) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

inline EmbeddingSet decode_embedding_file(std::vector<char> bytes, Modality modality,
                                          const std::string& source = "embeddings") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic("X2EMB");
  EmbeddingSet set;
  set.modality = modality;
  const auto count = r.u32();
  const auto dim = r.u32();
  set.matrix = Tensor({count, dim});
  for (std::uint32_t i = 0; i < count; ++i) {
    set.ids.push_back(r.str(r.u16()));
    for (auto& v : set.matrix.row(i)) v = r.f32();
  }
  if (!r.done()) throw DataError(source + ": trailing bytes after embeddings");
  return set;
}

}  // namespace x2ct
