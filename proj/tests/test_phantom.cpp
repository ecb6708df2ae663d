#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"
#include "x2ct/phantom.hpp"

using namespace x2ct;

namespace {

GenConfig small_config() {
  GenConfig cfg;
  cfg.n_train = 6;
  cfg.n_test = 3;
  cfg.dims = {24, 24, 24};
  return cfg;
}

double mean_hu(const Volume& v) {
  double s = 0.0;
  for (double hu : v.voxels) s += hu;
  return s / static_cast<double>(v.voxels.size());
}

}  // namespace

TEST(Report, SinglePositiveMentionsLabel) {
  const auto space = LabelSpace::standard();
  std::vector<int> labels(space.size(), 0);
  labels[0] = 1;
  SplitMix64 rng(1);
  const auto text = render_report(labels, space, rng);
  EXPECT_NE(text.find("Cardiomegaly is present."), std::string::npos);
}

TEST(Report, AllNegativeHasNoPresentSentence) {
  const auto space = LabelSpace::standard();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SplitMix64 rng(seed);
    EXPECT_EQ(render_report(std::vector<int>(space.size(), 0), space, rng).find("is present"), std::string::npos);
  }
}

TEST(Report, FixedSeedIsDeterministic) {
  const auto space = LabelSpace::standard();
  const std::vector<int> labels{1, 0, 1, 0, 0, 1, 0, 0};
  SplitMix64 a(99), b(99);
  EXPECT_EQ(render_report(labels, space, a), render_report(labels, space, b));
}

TEST(Report, PositivesPlusHalfOfNegatives) {
  const auto space = LabelSpace::standard();
  SplitMix64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto labels = sample_labels(space, rng);
    const auto text = render_report(labels, space, rng);
    std::size_t negatives = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const bool pos = text.find(positive_sentence(space.names[i])) != std::string::npos;
      const bool neg = text.find(negative_sentence(space.names[i])) != std::string::npos;
      EXPECT_EQ(pos, labels[i] == 1);
      if (labels[i]) {
        EXPECT_FALSE(neg);
      }
      negatives += neg ? 1 : 0;
    }
    const auto absent = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 0));
    EXPECT_EQ(negatives, (absent + 1) / 2);
  }
}

TEST(Report, LengthMismatchThrows) {
  SplitMix64 rng(0);
  EXPECT_THROW(render_report({1, 0}, LabelSpace::standard(), rng), DataError);
}

TEST(LabelSpaceTest, RejectsBadPrevalenceAndDuplicates) {
  EXPECT_THROW(LabelSpace::standard(8, 1.0), ConfigError);
  EXPECT_THROW(LabelSpace::standard(8, 0.0), ConfigError);
  LabelSpace dup{{"a", "a"}, {0.3, 0.3}};
  EXPECT_THROW(dup.validate(), ConfigError);
}

TEST(Prevalence, ThousandDrawsWithinFivePoints) {
  GenConfig cfg;
  cfg.n_train = 1000;
  cfg.n_test = 1;
  std::vector<double> positives(cfg.n_labels, 0.0);
  std::size_t n = 0;
  for (const auto& p : plan_dataset(cfg)) {
    if (p.triplet.split != Split::Train) continue;
    ++n;
    for (std::size_t l = 0; l < cfg.n_labels; ++l) positives[l] += p.triplet.labels[l];
  }
  ASSERT_EQ(n, 1000u);
  for (double c : positives) EXPECT_NEAR(c / 1000.0, 0.3, 0.05);
}

TEST(Synthesis, VolumeInvariants) {
  const GenConfig cfg = small_config();
  const Volume v = synthesize_volume(std::vector<int>(8, 1), 123, cfg);
  EXPECT_EQ(v.voxels.size(), 24u * 24u * 24u);
  for (double hu : v.voxels) {
    EXPECT_GE(hu, kMinHu);
    EXPECT_LE(hu, kMaxHu);
  }
  EXPECT_EQ(v.at(0, 0, 0), kAirHu);
}

TEST(Synthesis, AnatomyHasExpectedTissues) {
  GenConfig cfg;
  cfg.noise_hu = 0.0;
  const Volume v = synthesize_volume(std::vector<int>(8, 0), 5, cfg);
  std::set<double> values(v.voxels.begin(), v.voxels.end());
  EXPECT_EQ(values, (std::set<double>{-1000.0, -800.0, 40.0, 50.0, 700.0}));
}

TEST(Synthesis, ForcedNegativeHasNoInserts) {
  GenConfig cfg = small_config();
  cfg.n_train = 1;
  cfg.n_test = 1;
  cfg.noise_hu = 0.0;
  cfg.forced_labels = std::vector<int>(8, 0);
  const auto plans = plan_dataset(cfg);
  for (const auto& p : plans) {
    EXPECT_EQ(p.triplet.report_text.find("is present"), std::string::npos);
    const Volume v = synthesize_volume(p.triplet.labels, p.subject_seed, cfg);
    for (double hu : v.voxels) EXPECT_TRUE(hu == -1000.0 || hu == -800.0 || hu == 40.0 || hu == 50.0 || hu == 700.0);
  }
}

TEST(Synthesis, EveryInsertChangesMeanHuOnlyInsideItsRegion) {
  GenConfig cfg;
  cfg.dims = {48, 48, 48};
  const Volume base = synthesize_volume(std::vector<int>(8, 0), 77, cfg);
  for (std::size_t l = 0; l < kInsertTable.size(); ++l) {
    SCOPED_TRACE(std::string(kInsertTable[l].name));
    std::vector<int> labels(8, 0);
    labels[l] = 1;
    const Volume v = synthesize_volume(labels, 77, cfg);
    EXPECT_NE(mean_hu(v), mean_hu(base));
    const auto& ins = kInsertTable[l];
    std::size_t changed = 0;
    for (std::size_t z = 0; z < 48; ++z)
      for (std::size_t y = 0; y < 48; ++y)
        for (std::size_t x = 0; x < 48; ++x) {
          if (v.at(x, y, z) == base.at(x, y, z)) continue;
          ++changed;
          const Vec3 p{(x + 0.5) / 48, (y + 0.5) / 48, (z + 0.5) / 48};
          EXPECT_TRUE(detail::inside(ins.shape, p, ins.center, ins.half_extent));
        }
    EXPECT_GT(changed, 0u);
  }
}

TEST(Synthesis, SameSeedSameVolume) {
  const GenConfig cfg = small_config();
  const std::vector<int> labels{1, 0, 0, 1, 0, 0, 1, 0};
  EXPECT_EQ(synthesize_volume(labels, 42, cfg).voxels, synthesize_volume(labels, 42, cfg).voxels);
  EXPECT_NE(synthesize_volume(labels, 42, cfg).voxels, synthesize_volume(labels, 43, cfg).voxels);
}

TEST(VolumeFile, RoundTripsThroughFloat32) {
  const Volume v = synthesize_volume(std::vector<int>(8, 1), 9, small_config());
  const Volume back = decode_volume_file(encode_volume_file(v));
  EXPECT_EQ(back.dims, v.dims);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) EXPECT_EQ(back.voxels[i], static_cast<float>(v.voxels[i]));
  auto bytes = encode_volume_file(v);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "X2VOL");
  EXPECT_EQ(bytes.size(), 5 + 12 + 12 + 4 * v.voxels.size());
  bytes.pop_back();
  EXPECT_THROW(decode_volume_file(bytes), DataError);
  bytes[0] = 'Y';
  EXPECT_THROW(decode_volume_file(bytes), DataError);
}

TEST(Dataset, SplitsAreDisjointAndSorted) {
  const auto plans = plan_dataset(small_config());
  std::set<std::string> ids;
  std::size_t train = 0, test = 0;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    EXPECT_TRUE(ids.insert(plans[i].triplet.id).second);
    if (i > 0) {
      EXPECT_LT(plans[i - 1].triplet.id, plans[i].triplet.id);
    }
    (plans[i].triplet.split == Split::Train ? train : test) += 1;
    EXPECT_EQ(plans[i].triplet.id.substr(0, 2), plans[i].triplet.split == Split::Train ? "tr" : "te");
  }
  EXPECT_EQ(train, 6u);
  EXPECT_EQ(test, 3u);
}

TEST(Dataset, SameSeedGivesByteIdenticalFiles) {
  TempDir a("gen_a"), b("gen_b");
  const GenConfig cfg = small_config();
  const auto ta = generate_dataset(cfg, a.path());
  generate_dataset(cfg, b.path());
  EXPECT_EQ(io::sha256_file(a / "manifest.jsonl"), io::sha256_file(b / "manifest.jsonl"));
  for (const auto& t : ta) EXPECT_EQ(io::sha256_file(a / t.volume_ref), io::sha256_file(b / t.volume_ref));
  GenConfig other = cfg;
  other.seed = 8;
  TempDir c("gen_c");
  generate_dataset(other, c.path());
  EXPECT_NE(io::sha256_file(a / "manifest.jsonl"), io::sha256_file(c / "manifest.jsonl"));
}

TEST(Manifest, RoundTripsRecords) {
  TempDir dir("manifest");
  const auto written = generate_dataset(small_config(), dir.path());
  const auto read = read_manifest(dir / "manifest.jsonl");
  ASSERT_EQ(read.size(), written.size());
  for (std::size_t i = 0; i < read.size(); ++i) {
    EXPECT_EQ(read[i].id, written[i].id);
    EXPECT_EQ(read[i].labels, written[i].labels);
    EXPECT_EQ(read[i].report_text, written[i].report_text);
    EXPECT_EQ(read[i].split, written[i].split);
  }
  EXPECT_THROW(parse_manifest_line("{\"id\": 3}"), DataError);
  EXPECT_THROW(parse_manifest_line("not json"), DataError);
}

TEST(GenConfigTest, Validation) {
  GenConfig cfg;
  cfg.dims = {4, 64, 64};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = GenConfig{};
  cfg.n_test = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
