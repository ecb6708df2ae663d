#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "x2ct/contrastive.hpp"
#include "x2ct/encoders.hpp"
#include "x2ct/gradcheck_suite.hpp"

using namespace x2ct;

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Volume random_volume(std::uint32_t nx, std::uint32_t ny, std::uint32_t nz, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Volume v;
  v.dims = {nx, ny, nz};
  v.voxels.resize(v.voxel_count());
  for (auto& hu : v.voxels) hu = rng.uniform(kMinHu, kMaxHu);
  return v;
}

// Independent recomputation: explicit edge-replicated padding, then each
// block summed in isolation.
std::vector<double> brute_force_features(const Volume& v) {
  std::array<std::size_t, 3> block{};
  for (int a = 0; a < 3; ++a) block[a] = (v.dims[a] + 3) / 4;
  auto voxel = [&](std::size_t x, std::size_t y, std::size_t z) {
    return v.at(std::min<std::size_t>(x, v.dims[0] - 1), std::min<std::size_t>(y, v.dims[1] - 1),
                std::min<std::size_t>(z, v.dims[2] - 1));
  };
  std::vector<double> f;
  for (std::size_t bz = 0; bz < 4; ++bz)
    for (std::size_t by = 0; by < 4; ++by)
      for (std::size_t bx = 0; bx < 4; ++bx) {
        double s = 0.0;
        for (std::size_t z = bz * block[2]; z < (bz + 1) * block[2]; ++z)
          for (std::size_t y = by * block[1]; y < (by + 1) * block[1]; ++y)
            for (std::size_t x = bx * block[0]; x < (bx + 1) * block[0]; ++x) s += voxel(x, y, z) / 1000.0;
        f.push_back(s / static_cast<double>(block[0] * block[1] * block[2]));
      }
  std::vector<double> hist(16, 0.0);
  for (double hu : v.voxels) {
    int b = static_cast<int>(std::floor((hu + 1024.0) / 160.0));
    hist[static_cast<std::size_t>(std::clamp(b, 0, 15))] += 1.0;
  }
  for (double h : hist) f.push_back(h / static_cast<double>(v.voxels.size()));
  return f;
}

}  // namespace

TEST(Tokenizer, LowercasesAndStripsPunctuation) {
  EXPECT_EQ(tokenize("  Cardiomegaly IS present.  No pleural_effusion! "),
            (std::vector<std::string>{"cardiomegaly", "is", "present", "no", "pleural_effusion"}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_TRUE(tokenize(" ... ").empty());
}

TEST(ReportCounts, NegatedBigramIsSeparateToken) {
  const auto vocab = ReportVocab::from_labels(LabelSpace::standard());
  const auto pos = report_counts("cardiomegaly is present.", vocab);
  const auto neg = report_counts("no cardiomegaly.", vocab);
  EXPECT_NE(pos, neg);
  EXPECT_EQ(pos[vocab.index.at("cardiomegaly")], 1.0);
  EXPECT_EQ(pos[vocab.index.at("no cardiomegaly")], 0.0);
  EXPECT_EQ(neg[vocab.index.at("cardiomegaly")], 0.0);
  EXPECT_EQ(neg[vocab.index.at("no cardiomegaly")], 1.0);
}

TEST(ReportCounts, UnknownTokensIgnored) {
  const auto vocab = ReportVocab::from_labels(LabelSpace::standard());
  const auto c = report_counts("No idea. Banana is present", vocab);
  EXPECT_EQ(std::accumulate(c.begin(), c.end(), 0.0), 2.0);
}

TEST(ReportEncoder, EmptyStringGivesUnitBiasDirection) {
  const auto space = LabelSpace::standard();
  const auto vocab = ReportVocab::from_labels(space);
  const auto p = init_teachers(vocab.size(), 32, 1);
  const Embedding e = encode_report("", vocab, p);
  EXPECT_EQ(e.vector.size(), 32u);
  EXPECT_NEAR(norm(e.vector), 1.0, 1e-12);
  const Tensor& b = p.at("report.bias");
  const double bn = norm(b.data);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(e.vector[i], b.data[i] / bn, 1e-12);
}

TEST(ReportEncoder, DeterministicBits) {
  const auto vocab = ReportVocab::from_labels(LabelSpace::standard());
  const auto p = init_teachers(vocab.size(), 16, 3);
  EXPECT_EQ(encode_report("No emphysema. Lung_nodule is present.", vocab, p).vector,
            encode_report("No emphysema. Lung_nodule is present.", vocab, p).vector);
}

TEST(VolumeFeatures, ConstantWaterVolume) {
  Volume v;
  v.dims = {16, 16, 16};
  v.voxels.assign(v.voxel_count(), 0.0);
  const auto f = volume_features(v);
  ASSERT_EQ(f.size(), kVolumeFeatures);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(f[i], 0.0);
  std::size_t nonzero = 0;
  for (std::size_t i = 64; i < 80; ++i) nonzero += f[i] != 0.0 ? 1 : 0;
  EXPECT_EQ(nonzero, 1u);
  EXPECT_EQ(f[64 + hist_bin(0.0)], 1.0);
}

TEST(VolumeFeatures, MatchesBruteForceOnRandomVolumes) {
  for (auto dims : {std::array<std::uint32_t, 3>{16, 16, 16}, std::array<std::uint32_t, 3>{18, 13, 9}}) {
    const Volume v = random_volume(dims[0], dims[1], dims[2], dims[1]);
    const auto fast = volume_features(v);
    const auto slow = brute_force_features(v);
    ASSERT_EQ(fast.size(), slow.size());
    // Histogram fractions are exact; block means agree up to summation order.
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(fast[i], slow[i], 1e-12);
    for (std::size_t i = 64; i < 80; ++i) EXPECT_DOUBLE_EQ(fast[i], slow[i]);
  }
}

TEST(VolumeFeatures, ExactOnCubeDivisibleByGrid) {
  const Volume v = random_volume(16, 16, 16, 21);
  EXPECT_EQ(volume_features(v), brute_force_features(v));
}

TEST(VolumeFeatures, ChangeInsideOneBlockIsLocal) {
  Volume a = random_volume(16, 16, 16, 5);
  Volume b = a;
  // Block (1, 2, 3) spans x 4..7, y 8..11, z 12..15.
  b.at(5, 9, 13) = 2900.0;
  b.at(6, 10, 14) = -1020.0;
  const auto fa = volume_features(a), fb = volume_features(b);
  const std::size_t cell = 1 + 4 * (2 + 4 * 3);
  const std::set<std::size_t> allowed{cell, 64 + hist_bin(a.at(5, 9, 13)), 64 + hist_bin(2900.0),
                                      64 + hist_bin(a.at(6, 10, 14)), 64 + hist_bin(-1020.0)};
  EXPECT_NE(fa[cell], fb[cell]);
  for (std::size_t i = 0; i < fa.size(); ++i)
    if (!allowed.count(i)) {
      EXPECT_EQ(fa[i], fb[i]) << "feature " << i;
    }
}

TEST(VolumeFeatures, DegenerateVolumeThrows) {
  Volume v;
  v.dims = {1, 8, 8};
  v.voxels.assign(64, 0.0);
  EXPECT_THROW(volume_features(v), DataError);
}

TEST(VolumeEncoder, UnitNormAndStandardizerApplied) {
  auto p = init_teachers(10, 8, 2);
  const Volume v = random_volume(16, 16, 16, 8);
  const Embedding e = encode_volume(v, p);
  EXPECT_NEAR(norm(e.vector), 1.0, 1e-12);
  Tensor feats({3, kVolumeFeatures});
  for (std::size_t r = 0; r < 3; ++r) {
    const auto f = volume_features(random_volume(16, 16, 16, 30 + r));
    std::copy(f.begin(), f.end(), feats.row(r).begin());
  }
  fit_volume_standardizer(p.tensors, feats);
  const Tensor z = standardize_volume_features(feats, p);
  for (std::size_t c = 0; c < kVolumeFeatures; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < 3; ++r) m += z(r, c);
    EXPECT_NEAR(m, 0.0, 1e-9);
  }
}

TEST(Patches, LayoutIsRowMajorOverTiles) {
  ModelConfig cfg{4, 4, 2, 4};
  Radiograph img{4, 4, {}, ""};
  for (int i = 0; i < 16; ++i) img.pixels.push_back(static_cast<float>(i));
  const Tensor p = image_patches(img, cfg);
  ASSERT_EQ(p.shape, (Shape{4, 4}));
  EXPECT_EQ(std::vector<double>(p.row(0).begin(), p.row(0).end()), (std::vector<double>{0, 1, 4, 5}));
  EXPECT_EQ(std::vector<double>(p.row(3).begin(), p.row(3).end()), (std::vector<double>{10, 11, 14, 15}));
  Radiograph wrong{6, 6, std::vector<float>(36, 0.0f), ""};
  EXPECT_THROW(image_patches(wrong, cfg), Error);
}

TEST(Student, ZeroImageIsDeterministicBiasPath) {
  ModelConfig cfg{8, 16, 8, 32};
  const auto p = init_student(cfg, 4);
  Radiograph img{32, 32, std::vector<float>(32 * 32, 0.0f), ""};
  const Embedding a = encode_radiograph(img, p, cfg);
  EXPECT_EQ(a.vector, encode_radiograph(img, p, cfg).vector);
  EXPECT_NEAR(norm(a.vector), 1.0, 1e-12);
  // Every patch embeds to relu(bias); pooling leaves that unchanged.
  Tape tape;
  const auto v = student_leaves(tape, p, false);
  Var one = student_forward(v, tape.leaf(Tensor({1, cfg.patch_pixels()})), 1);
  for (std::size_t i = 0; i < cfg.embed_dim; ++i) EXPECT_NEAR(a.vector[i], tape.value(one).data[i], 1e-14);
}

TEST(Student, PatchPermutationInvariant) {
  ModelConfig cfg{8, 16, 4, 16};
  const auto p = init_student(cfg, 6);
  SplitMix64 rng(7);
  Tensor patches({cfg.patches_per_image(), cfg.patch_pixels()});
  for (auto& x : patches.data) x = rng.uniform();
  std::vector<std::size_t> order(patches.rows());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  Tensor permuted(patches.shape);
  for (std::size_t r = 0; r < order.size(); ++r)
    std::copy(patches.row(order[r]).begin(), patches.row(order[r]).end(), permuted.row(r).begin());
  const Tensor a = embed_radiographs({patches}, p, cfg);
  const Tensor b = embed_radiographs({permuted}, p, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-14);
}

TEST(Student, ChunkingDoesNotChangeEmbeddings) {
  ModelConfig cfg{4, 8, 4, 8};
  const auto p = init_student(cfg, 9);
  SplitMix64 rng(10);
  std::vector<Tensor> images;
  for (int i = 0; i < 5; ++i) {
    Tensor t({cfg.patches_per_image(), cfg.patch_pixels()});
    for (auto& x : t.data) x = rng.uniform();
    images.push_back(t);
  }
  EXPECT_EQ(embed_radiographs(images, p, cfg, 2), embed_radiographs(images, p, cfg, 64));
}

TEST(Student, InfoNceGradientWrtAllParameters) {
  ModelConfig cfg{4, 6, 4, 8};
  SplitMix64 rng(14);
  const std::size_t n = 3;
  Tensor patches({n * cfg.patches_per_image(), cfg.patch_pixels()});
  Tensor target({n, cfg.embed_dim});
  for (auto& x : target.data) x = rng.normal();
  std::vector<Tensor> params;
  // Finite differences are only meaningful away from relu kinks.
  do {
    for (auto& x : patches.data) x = rng.uniform();
    const auto init = init_student(cfg, rng.next());
    params.clear();
    for (const char* k : {"student.patch.weight", "student.patch.bias", "student.fc1.weight", "student.fc1.bias",
                          "student.fc2.weight", "student.fc2.bias"})
      params.push_back(init.at(k));
  } while (detail::student_kink_margin(params, patches, cfg.patches_per_image()) < 1e-2);
  const double err = grad_check(
      [&](Tape& tape, std::span<const Var> x) {
        const StudentVars v{x[0], x[1], x[2], x[3], x[4], x[5]};
        Var hx = student_forward(v, tape.leaf(patches), cfg.patches_per_image());
        return info_nce_loss(hx, l2_normalize_rows(tape.leaf(target)), 0.07);
      },
      params);
  EXPECT_LT(err, 1e-4);
}

TEST(Init, UniformWithinFanInBound) {
  SplitMix64 rng(1);
  const Tensor t = init_uniform({50, 20}, 50, rng);
  const double bound = 1.0 / std::sqrt(50.0);
  for (double v : t.data) EXPECT_LE(std::abs(v), bound);
  const auto a = init_student(ModelConfig{}, 3), b = init_student(ModelConfig{}, 3);
  EXPECT_EQ(a.tensors, b.tensors);
}

TEST(Checkpoint, RoundTripHashAndVersion) {
  TempDir dir("ckpt");
  const auto p = init_teachers(18, 8, 5);
  write_checkpoint(dir / "t.x2ckpt", p);
  const auto back = read_checkpoint(dir / "t.x2ckpt", false);
  EXPECT_EQ(back.tensors, p.tensors);
  EXPECT_FALSE(back.trainable);
  EXPECT_EQ(checkpoint_hash(back.tensors), io::sha256_file(dir / "t.x2ckpt"));
  auto bytes = encode_checkpoint(p.tensors);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 6), "X2CKPT");
  bytes[6] = 9;
  EXPECT_THROW(decode_checkpoint(bytes), DataError);
}

TEST(EmbeddingFile, LayoutAndRoundTrip) {
  EmbeddingSet set{Modality::Report, {"a", "bc"}, Tensor::matrix(2, 2, {0.6, 0.8, 1.0, 0.0})};
  const auto bytes = encode_embedding_file(set);
  EXPECT_EQ(bytes.size(), 5u + 8u + (2 + 1 + 8) + (2 + 2 + 8));
  const auto back = decode_embedding_file(bytes, Modality::Report);
  EXPECT_EQ(back.ids, set.ids);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(back.matrix.data[i], static_cast<float>(set.matrix.data[i]));
  EXPECT_EQ(modality_code(Modality::Volume), 'C');
  EXPECT_EQ(modality_code(Modality::Radiograph), 'X');
}
