#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <memory>

#include "test_util.hpp"
#include "x2ct/config.hpp"

using namespace x2ct;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result run_cli(const std::string& args) {
  const std::string cmd = std::string(X2CT_CLI_PATH) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const std::string kTiny =
    " --set gen.n_train=12 --set gen.n_test=6 --set gen.nx=24 --set gen.ny=24 --set gen.nz=24"
    " --set drr.out_size=16 --set model.patch=4 --set model.hidden=8 --set model.embed_dim=8"
    " --set train.epochs=2 --set teacher.epochs=2 --set train.batch_size=4 --set probe.epochs=20";

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli_pipeline");
    ASSERT_EQ(run_cli("gen --out " + data() + kTiny).code, 0);
    ASSERT_EQ(run_cli("train teacher --data " + data() + " --out " + teacher_dir() + kTiny).code, 0);
    ASSERT_EQ(run_cli("train student --data " + data() + " --teacher " + teacher() + " --out " + student_dir() + kTiny)
                  .code,
              0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string data() { return (*dir_ / "data").string(); }
  static std::string teacher_dir() { return (*dir_ / "teacher").string(); }
  static std::string teacher() { return (*dir_ / "teacher" / "teacher.x2ckpt").string(); }
  static std::string student_dir() { return (*dir_ / "student").string(); }
  static std::string student() { return (*dir_ / "student" / "student.x2ckpt").string(); }
  static std::string scratch(const std::string& name) { return (*dir_ / name).string(); }

  static inline TempDir* dir_ = nullptr;
};

}  // namespace

TEST(CliConfig, UnknownKeyExitsWithConfigCodeAndNamesKey) {
  TempDir dir("cli_unknown");
  const Result r = run_cli("gen --out " + (dir / "d").string() + " --set train.bogus=1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("train.bogus"), std::string::npos);
}

TEST(CliConfig, InvalidFractionNamesKey) {
  TempDir dir("cli_fraction");
  const Result r = run_cli("gen --out " + (dir / "d").string() + " --set fewshot.fraction=1.5");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("fewshot.fraction"), std::string::npos);
}

TEST(CliConfig, MissingRequiredOptionIsUsageError) {
  EXPECT_EQ(run_cli("gen").code, 2);
  EXPECT_EQ(run_cli("").code, 2);
}

TEST(CliConfig, ConfigFileParsesAndResolves) {
  TempDir dir("cli_conf");
  {
    std::ofstream f(dir / "a.conf");
    f << "# comment\npreset = desk\nseed = 11\ntrain.tau = 0.1  # trailing\n";
  }
  const RunConfig cfg = load_config_file(dir / "a.conf", {{"train.epochs", "3"}});
  EXPECT_EQ(cfg.train.tau, 0.1);
  EXPECT_EQ(cfg.train.epochs, 3u);
  EXPECT_EQ(cfg.model.patch, 16u);
  const RunConfig again = load_config_text(resolved_config(cfg));
  EXPECT_EQ(resolved_config(again), resolved_config(cfg));
  EXPECT_EQ(config_hash(again), config_hash(cfg));
  EXPECT_NE(config_hash(load_config_text("")), config_hash(cfg));
  EXPECT_THROW(load_config_text("no equals sign"), ConfigError);
  EXPECT_THROW(load_config_text("preset = nonsense"), ConfigError);
  EXPECT_THROW(load_config_file(dir / "missing.conf"), ConfigError);
}

TEST(CliConfig, FullPresetScales) {
  const RunConfig cfg = load_config_text("preset = full");
  EXPECT_EQ(cfg.train.batch_size, 360u);
  EXPECT_EQ(cfg.model.embed_dim, 512u);
  EXPECT_EQ(cfg.drr.out_size, 224u);
}

TEST(CliGen, NonEmptyOutputNeedsForce) {
  TempDir dir("cli_force");
  fs::create_directories(dir / "d");
  std::ofstream(dir / "d" / "stray.txt") << "x";
  const Result r = run_cli("gen --out " + (dir / "d").string() + kTiny);
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(run_cli("gen --force --out " + (dir / "d").string() + kTiny).code, 0);
}

TEST(CliGen, RepeatIsByteIdentical) {
  TempDir dir("cli_repeat");
  ASSERT_EQ(run_cli("gen --previews --out " + (dir / "a").string() + kTiny).code, 0);
  ASSERT_EQ(run_cli("gen --previews --out " + (dir / "b").string() + kTiny).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    if (rel == "run.json") continue;
    ++files;
    EXPECT_EQ(io::sha256_file(e.path()), io::sha256_file(dir / "b" / rel)) << rel;
  }
  EXPECT_GT(files, 18u * 2);
}

TEST(CliStats, DeLongFromCsv) {
  TempDir dir("cli_stats");
  std::ofstream(dir / "s.csv") << "label,score_a,score_b\n1,0.9,0.4\n0,0.1,0.6\n1,0.8,0.7\n0,0.3,0.2\n";
  const Result r = run_cli("stats " + (dir / "s.csv").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.output.rfind("auc_a,auc_b,z,p_two_tailed\n1,0.75,", 0), 0u) << r.output;
  std::ofstream(dir / "bad.csv") << "label,score_a,score_b\n1,x,0.4\n";
  EXPECT_EQ(run_cli("stats " + (dir / "bad.csv").string()).code, 3);
}

TEST(CliGradcheck, PassesAndReportsEveryCase) {
  const Result r = run_cli("gradcheck --seeds 2");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("PASS"), std::string::npos);
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
  EXPECT_EQ(run_cli("gradcheck --seeds 2 --tolerance 1e-30").code, 4);
}

TEST_F(CliPipeline, TrainingWritesCheckpointsAndLosses) {
  EXPECT_TRUE(fs::exists(teacher()));
  EXPECT_TRUE(fs::exists(fs::path(teacher_dir()) / "teacher_loss.csv"));
  EXPECT_TRUE(fs::exists(student()));
  EXPECT_TRUE(fs::exists(fs::path(student_dir()) / "student_loss.csv"));
  EXPECT_TRUE(fs::exists(fs::path(student_dir()) / "config.resolved"));
  EXPECT_TRUE(fs::exists(fs::path(student_dir()) / "run.json"));
}

TEST_F(CliPipeline, MissingTeacherIsDataError) {
  const Result r = run_cli("train student --data " + data() + " --teacher " + scratch("nope.x2ckpt") + " --out " +
                           scratch("s_missing") + kTiny);
  EXPECT_EQ(r.code, 3);
}

TEST_F(CliPipeline, StudentWeightFlagsOverrideConfig) {
  const Result r = run_cli("train student --beta 1 --gamma 0 --data " + data() + " --teacher " + teacher() +
                           " --out " + scratch("s_beta") + kTiny);
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string loss = io::read_text(fs::path(scratch("s_beta")) / "student_loss.csv");
  EXPECT_NE(loss.find("L_XR"), std::string::npos);
  EXPECT_EQ(loss.find("L_XC"), std::string::npos);
  EXPECT_EQ(run_cli("train student --beta 0 --gamma 0 --data " + data() + " --teacher " + teacher() + " --out " +
                    scratch("s_zero") + kTiny)
                .code,
            2);
}

TEST_F(CliPipeline, EvalTasksWriteMetricFiles) {
  const std::string common = " --data " + data() + " --teacher " + teacher() + " --student " + student() + kTiny;
  const Result ret = run_cli("eval retrieval --out " + scratch("e_ret") + common);
  ASSERT_EQ(ret.code, 0) << ret.output;
  EXPECT_NE(ret.output.find("retrieval,synthetic,X->C,recall"), std::string::npos) << ret.output;
  for (const char* f : {"embeddings_C.x2emb", "embeddings_R.x2emb", "embeddings_X.x2emb", "retrieval_metrics.csv",
                        "retrieval_summary.json"})
    EXPECT_TRUE(fs::exists(fs::path(scratch("e_ret")) / f)) << f;
  const Result zs = run_cli("eval zeroshot --out " + scratch("e_zs") + common);
  ASSERT_EQ(zs.code, 0) << zs.output;
  EXPECT_NE(zs.output.find("zeroshot,synthetic,macro,auc"), std::string::npos);
  const Result fsr = run_cli("eval fewshot --fraction 0.5 --out " + scratch("e_fs") + common);
  ASSERT_EQ(fsr.code, 0) << fsr.output;
  EXPECT_NE(fsr.output.find("fewshot,synthetic,macro,auc"), std::string::npos);
  EXPECT_NE(run_cli("eval fewshot --fraction 1.5 --out " + scratch("e_fs_bad") + common).code, 0);
}

TEST_F(CliPipeline, EvalIsReproducible) {
  const std::string common = " --data " + data() + " --teacher " + teacher() + " --student " + student() + kTiny;
  ASSERT_EQ(run_cli("eval zeroshot --out " + scratch("r1") + common).code, 0);
  ASSERT_EQ(run_cli("eval zeroshot --out " + scratch("r2") + common).code, 0);
  EXPECT_EQ(io::sha256_file(fs::path(scratch("r1")) / "zeroshot_metrics.csv"),
            io::sha256_file(fs::path(scratch("r2")) / "zeroshot_metrics.csv"));
}
