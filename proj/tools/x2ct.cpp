// x2ct: generate phantom data, train teachers and student, evaluate, ablate.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "x2ct/gradcheck_suite.hpp"
#include "x2ct/pipeline.hpp"

namespace {

using namespace x2ct;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;

  RunConfig load() const {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      overrides.emplace_back(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    }
    if (config_path.empty()) return load_config_text("", overrides);
    return load_config_file(config_path, overrides);
  }
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "key = value config file");
  cmd->add_option("--set", opts.sets, "override one config key (key=value), repeatable");
}

void print_report(const MetricReport& report) {
  std::cout << report.csv();
}

// CSV with header label,score_a,score_b.
void run_stats(const std::string& path) {
  std::stringstream in(io::read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  std::vector<int> labels;
  std::vector<double> a, b;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::stringstream row(line);
    std::string f0, f1, f2;
    if (!std::getline(row, f0, ',') || !std::getline(row, f1, ',') || !std::getline(row, f2))
      throw DataError(path + ":" + std::to_string(lineno) + ": expected label,score_a,score_b");
    try {
      labels.push_back(std::stoi(f0));
      a.push_back(std::stod(f1));
      b.push_back(std::stod(f2));
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": non-numeric field");
    }
  }
  const auto r = delong_test(a, b, labels);
  std::printf("auc_a,auc_b,z,p_two_tailed\n%s,%s,%s,%s\n", detail::fmt_double(r.auc_a).c_str(),
              detail::fmt_double(r.auc_b).c_str(), detail::fmt_double(r.z).c_str(),
              detail::fmt_double(r.p_two_tailed).c_str());
}

int run(int argc, char** argv) {
  CLI::App app{"X-ray/CT contrastive transfer at desk scale"};
  app.require_subcommand(1);
  CommonOptions common;

  std::string out_dir, data_dir, teacher_path, student_path;
  bool force = false, previews = false;

  auto* gen = app.add_subcommand("gen", "generate phantom volumes, reports and radiographs");
  add_common(gen, common);
  gen->add_option("--out", out_dir, "dataset directory")->required();
  gen->add_flag("--force", force, "allow a non-empty output directory");
  gen->add_flag("--previews", previews, "also write PGM previews of the radiographs");

  auto* train = app.add_subcommand("train", "train the teacher pair or the student");
  train->require_subcommand(1);
  auto* teacher = train->add_subcommand("teacher", "stage 1: align volume and report encoders");
  add_common(teacher, common);
  teacher->add_option("--data", data_dir)->required();
  teacher->add_option("--out", out_dir)->required();
  auto* student = train->add_subcommand("student", "stage 2: train the radiograph encoder");
  add_common(student, common);
  std::optional<double> alpha, beta, gamma;
  student->add_option("--data", data_dir)->required();
  student->add_option("--teacher", teacher_path, "teacher.x2ckpt")->required();
  student->add_option("--out", out_dir)->required();
  student->add_option("--alpha", alpha);
  student->add_option("--beta", beta);
  student->add_option("--gamma", gamma);

  auto* eval = app.add_subcommand("eval", "evaluate a trained student");
  eval->require_subcommand(1);
  std::vector<double> fractions;
  std::optional<std::uint64_t> fewshot_seed;
  std::vector<std::pair<CLI::App*, EvalTask>> eval_tasks;
  for (auto task : {EvalTask::Retrieval, EvalTask::ZeroShot, EvalTask::FewShot}) {
    auto* sub = eval->add_subcommand(std::string(task_name(task)));
    add_common(sub, common);
    sub->add_option("--data", data_dir)->required();
    sub->add_option("--teacher", teacher_path)->required();
    sub->add_option("--student", student_path)->required();
    sub->add_option("--out", out_dir)->required();
    if (task == EvalTask::FewShot) {
      sub->add_option("--fraction", fractions, "training fraction(s) in (0, 1)");
      sub->add_option("--seed", fewshot_seed, "stratified sampling seed");
    }
    eval_tasks.emplace_back(sub, task);
  }

  auto* ablate = app.add_subcommand("ablate", "train and score the (beta, gamma) arms");
  add_common(ablate, common);
  ablate->add_option("--data", data_dir)->required();
  ablate->add_option("--teacher", teacher_path)->required();
  ablate->add_option("--out", out_dir)->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op");
  std::size_t seeds = 20;
  double tolerance = 1e-4;
  gradcheck->add_option("--seeds", seeds);
  gradcheck->add_option("--tolerance", tolerance);

  auto* stats = app.add_subcommand("stats", "DeLong test on a label,score_a,score_b CSV");
  std::string scores_path;
  stats->add_option("scores", scores_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::Config);
  }

  if (*gen) {
    const auto s = cmd_gen(common.load(), out_dir, force, previews);
    std::printf("generated %zu train + %zu test triplets in %s\n", s.n_train, s.n_test, out_dir.c_str());
  } else if (*teacher) {
    cmd_train_teacher(common.load(), data_dir, out_dir);
    std::printf("wrote %s/teacher.x2ckpt\n", out_dir.c_str());
  } else if (*student) {
    const RunConfig cfg = common.load();
    LossWeights w = cfg.loss;
    if (alpha) w.alpha = *alpha;
    if (beta) w.beta = *beta;
    if (gamma) w.gamma = *gamma;
    cmd_train_student(cfg, data_dir, teacher_path, w, out_dir);
    std::printf("wrote %s/student.x2ckpt\n", out_dir.c_str());
  } else if (*eval) {
    for (const auto& [sub, task] : eval_tasks) {
      if (!*sub) continue;
      RunConfig cfg = common.load();
      if (fewshot_seed) cfg.fewshot_seed = *fewshot_seed;
      print_report(cmd_eval(task, cfg, data_dir, teacher_path, student_path, out_dir, fractions));
    }
  } else if (*ablate) {
    std::cout << ablation_csv(cmd_ablate(common.load(), data_dir, teacher_path, out_dir));
  } else if (*gradcheck) {
    bool ok = true;
    for (const auto& c : run_gradcheck_suite(seeds)) {
      const bool pass = c.worst < tolerance;
      ok = ok && pass;
      std::printf("%-34s worst_rel_err=%.3e %s\n", c.name.c_str(), c.worst, pass ? "PASS" : "FAIL");
    }
    if (!ok) return static_cast<int>(ErrorKind::Numeric);
  } else if (*stats) {
    run_stats(scores_path);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const x2ct::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
