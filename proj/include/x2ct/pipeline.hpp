#pragma once

// End-to-end commands: dataset generation, the two training stages,
// evaluation protocols and the loss-weight ablation. Every command writes
// its resolved config and input hashes next to its outputs.

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "x2ct/binary_io.hpp"
#include "x2ct/config.hpp"
#include "x2ct/contrastive.hpp"
#include "x2ct/drr.hpp"
#include "x2ct/encoders.hpp"
#include "x2ct/evalkit.hpp"
#include "x2ct/parallel.hpp"
#include "x2ct/phantom.hpp"

namespace x2ct {

namespace fs = std::filesystem;

inline constexpr const char* kDatasetName = "synthetic";

inline std::string radiograph_ref(const std::string& id) { return "radiographs/" + id + ".x2img"; }

// ---- run records ------------------------------------------------------------

inline void write_run_record(const fs::path& out_dir, const std::string& command, const RunConfig& cfg,
                             const std::map<std::string, std::string>& input_hashes) {
  io::write_atomic(out_dir / "config.resolved", resolved_config(cfg));
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash(cfg);
  j["inputs"] = input_hashes;
  io::write_atomic(out_dir / "run.json", j.dump(2) + "\n");
}

inline void prepare_out_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force)
    throw DataError("output directory " + dir.string() + " is not empty (use --force)");
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

// ---- gen --------------------------------------------------------------------

struct GenSummary {
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::string manifest_hash;
};

inline GenSummary cmd_gen(const RunConfig& cfg, const fs::path& out_dir, bool force = false, bool write_previews = false) {
  validate_config(cfg);
  prepare_out_dir(out_dir, force);
  std::error_code ec;
  fs::create_directories(out_dir / "radiographs", ec);
  if (write_previews) fs::create_directories(out_dir / "previews", ec);
  const DrrConfig drr = cfg.drr;
  auto triplets = generate_dataset(cfg.gen_config(), out_dir, [&](const Triplet& t, const Volume& v) {
    const Radiograph img = project_ap(v, drr, t.id);
    write_radiograph(out_dir / radiograph_ref(t.id), img);
    if (write_previews) write_pgm(out_dir / "previews" / (t.id + ".pgm"), img);
  });
  GenSummary s;
  for (const auto& t : triplets) (t.split == Split::Train ? s.n_train : s.n_test) += 1;
  s.manifest_hash = io::sha256_file(out_dir / "manifest.jsonl");
  write_run_record(out_dir, "gen", cfg, {{"manifest.jsonl", s.manifest_hash}});
  return s;
}

// ---- loading ----------------------------------------------------------------

// One split of a dataset, with whatever modalities were requested.
struct SplitData {
  std::vector<std::string> ids;
  std::vector<std::vector<int>> labels;
  std::vector<std::string> reports;
  Tensor volume_features;
  Tensor report_counts;
  std::vector<Tensor> patches;

  std::size_t size() const { return ids.size(); }
};

struct DatasetData {
  LabelSpace labels;
  ReportVocab vocab;
  SplitData train;
  SplitData test;
  std::string manifest_hash;
};

inline DatasetData load_dataset(const fs::path& dir, const RunConfig& cfg) {
  const fs::path manifest = dir / "manifest.jsonl";
  if (!fs::exists(manifest)) throw DataError("no manifest.jsonl in " + dir.string());
  const auto triplets = read_manifest(manifest);
  if (triplets.empty()) throw DataError("manifest in " + dir.string() + " is empty");
  DatasetData data;
  data.manifest_hash = io::sha256_file(manifest);
  const std::size_t n_labels = triplets.front().labels.size();
  data.labels = LabelSpace::standard(n_labels, cfg.gen.prevalence);
  data.vocab = ReportVocab::from_labels(data.labels);
  const ModelConfig model = cfg.model_config();
  for (Split split : {Split::Train, Split::Test}) {
    SplitData& s = split == Split::Train ? data.train : data.test;
    std::vector<const Triplet*> rows;
    for (const auto& t : triplets) {
      if (t.labels.size() != n_labels) throw DataError("manifest record " + t.id + " has a different label count");
      if (t.split == split) rows.push_back(&t);
    }
    s.volume_features = Tensor({rows.size(), kVolumeFeatures});
    s.report_counts = Tensor({rows.size(), data.vocab.size()});
    s.patches.resize(rows.size());
    for (auto* t : rows) {
      s.ids.push_back(t->id);
      s.labels.push_back(t->labels);
      s.reports.push_back(t->report_text);
    }
    parallel_for(rows.size(), [&](std::size_t i) {
      const auto f = volume_features(read_volume(dir / rows[i]->volume_ref));
      std::copy(f.begin(), f.end(), s.volume_features.row(i).begin());
      const auto c = report_counts(rows[i]->report_text, data.vocab);
      std::copy(c.begin(), c.end(), s.report_counts.row(i).begin());
      s.patches[i] = image_patches(read_radiograph(dir / radiograph_ref(rows[i]->id)), model);
    });
  }
  if (data.train.size() < 2) throw DataError("dataset needs at least 2 training triplets");
  if (data.test.size() < 1) throw DataError("dataset has no test triplets");
  return data;
}

inline TripletFeatures triplet_features(const SplitData& s) {
  return {s.volume_features, s.report_counts, s.patches};
}

// ---- train ------------------------------------------------------------------

inline EncoderParams train_teachers(const DatasetData& data, const RunConfig& cfg, TrainLog* log) {
  return train_stage1_teachers(triplet_features(data.train), cfg.model_config(), cfg.teacher_train(), log);
}

inline EncoderParams train_student(const DatasetData& data, const EncoderParams& teachers, const RunConfig& cfg,
                                   const LossWeights& weights, TrainLog* log) {
  return train_stage2_student(triplet_features(data.train), teachers, cfg.model_config(), cfg.student_train(), weights,
                              log);
}

inline void cmd_train_teacher(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
  validate_config(cfg);
  const DatasetData data = load_dataset(data_dir, cfg);
  TrainLog log;
  const EncoderParams teachers = train_teachers(data, cfg, &log);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  write_checkpoint(out_dir / "teacher.x2ckpt", teachers);
  io::write_atomic(out_dir / "teacher_loss.csv", log.csv());
  write_run_record(out_dir, "train teacher", cfg,
                   {{"manifest.jsonl", data.manifest_hash}, {"teacher.x2ckpt", io::sha256_file(out_dir / "teacher.x2ckpt")}});
}

inline EncoderParams load_teachers(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("teacher checkpoint " + path.string() + " not found");
  return read_checkpoint(path, /*trainable=*/false);
}

inline EncoderParams load_student(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("student checkpoint " + path.string() + " not found");
  return read_checkpoint(path, /*trainable=*/true);
}

// Trains a student and verifies the teacher file is unchanged afterwards.
inline void cmd_train_student(const RunConfig& cfg, const fs::path& data_dir, const fs::path& teacher_path,
                              const LossWeights& weights, const fs::path& out_dir) {
  validate_config(cfg);
  weights.validate();
  const std::string before = io::sha256_file(teacher_path);
  const EncoderParams teachers = load_teachers(teacher_path);
  const DatasetData data = load_dataset(data_dir, cfg);
  TrainLog log;
  const EncoderParams student = train_student(data, teachers, cfg, weights, &log);
  const std::string after = io::sha256_file(teacher_path);
  if (before != after) throw ContractError("teacher checkpoint " + teacher_path.string() + " changed during training");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  write_checkpoint(out_dir / "student.x2ckpt", student);
  io::write_atomic(out_dir / "student_loss.csv", log.csv());
  RunConfig recorded = cfg;
  recorded.loss = weights;
  write_run_record(out_dir, "train student", recorded,
                   {{"manifest.jsonl", data.manifest_hash},
                    {"teacher.x2ckpt", before},
                    {"student.x2ckpt", io::sha256_file(out_dir / "student.x2ckpt")}});
}

// ---- eval -------------------------------------------------------------------

struct MetricRow {
  std::string task;
  std::string dataset = kDatasetName;
  std::string key;  // direction or label
  std::string metric;
  double value = 0.0;
  std::string k_or_fraction;
  std::uint64_t seed = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();

  void add(MetricRow r) { rows.push_back(std::move(r)); }

  std::optional<double> find(const std::string& task, const std::string& key, const std::string& metric,
                             const std::string& k = {}) const {
    for (const auto& r : rows)
      if (r.task == task && r.key == key && r.metric == metric && (k.empty() || r.k_or_fraction == k)) return r.value;
    return std::nullopt;
  }

  std::string csv() const {
    std::string out = "task,dataset,direction_or_label,metric,value,k_or_fraction,seed\n";
    for (const auto& r : rows)
      out += r.task + ',' + r.dataset + ',' + r.key + ',' + r.metric + ',' +
             (std::isnan(r.value) ? std::string("nan") : detail::fmt_double(r.value)) + ',' + r.k_or_fraction + ',' +
             std::to_string(r.seed) + '\n';
    return out;
  }
};

// Test-split embeddings for all three modalities.
struct TestEmbeddings {
  Tensor volume;
  Tensor report;
  Tensor radiograph;
};

inline TestEmbeddings embed_split(const SplitData& s, const EncoderParams& teachers, const EncoderParams& student,
                                  const ModelConfig& model) {
  return {embed_volume_features(s.volume_features, teachers), embed_linear(teachers, "report", s.report_counts),
          embed_radiographs(s.patches, student, model)};
}

inline void eval_retrieval(const TestEmbeddings& e, const RunConfig& cfg, MetricReport& report) {
  const auto matches = identity_matches(e.radiograph.rows());
  struct Dir {
    const char* name;
    const Tensor* q;
    const Tensor* g;
  };
  const Dir dirs[] = {{"X->C", &e.radiograph, &e.volume}, {"X->R", &e.radiograph, &e.report}, {"C->R", &e.volume, &e.report}};
  for (const auto& d : dirs)
    for (auto k : cfg.eval_ks) {
      if (k > d.g->rows()) continue;
      const auto r = topk_recall(*d.q, *d.g, matches, k, d.name);
      report.add({"retrieval", kDatasetName, d.name, "recall", r.recall, std::to_string(k), cfg.seed});
      report.summary["retrieval"][d.name]["R" + std::to_string(k)] = r.recall;
    }
}

inline LabelMetrics add_label_rows(MetricReport& report, const std::string& task, const LabelSpace& space,
                                   const LabelMetrics& m, const std::string& k_or_fraction, std::uint64_t seed,
                                   const std::string& suffix = {}) {
  for (std::size_t l = 0; l < space.size(); ++l) {
    if (!m.auc[l]) {
      report.add({task, kDatasetName, space.names[l], "skipped" + suffix, std::nan(""), k_or_fraction, seed});
      continue;
    }
    report.add({task, kDatasetName, space.names[l], "auc" + suffix, *m.auc[l], k_or_fraction, seed});
    report.add({task, kDatasetName, space.names[l], "pr" + suffix, *m.pr[l], k_or_fraction, seed});
  }
  report.add({task, kDatasetName, "macro", "auc" + suffix, m.macro_auc, k_or_fraction, seed});
  report.add({task, kDatasetName, "macro", "pr" + suffix, m.macro_pr, k_or_fraction, seed});
  return m;
}

// Zero-shot scores for radiograph queries, plus the volume-query reference
// and a per-label DeLong comparison between the two.
inline void eval_zeroshot(const DatasetData& data, const TestEmbeddings& e, const EncoderParams& teachers,
                          const RunConfig& cfg, MetricReport& report) {
  const auto prompts = zero_shot_prompts(data.labels, data.vocab, teachers);
  const Tensor xs = zero_shot_scores(e.radiograph, prompts, cfg.train.tau);
  const Tensor cs = zero_shot_scores(e.volume, prompts, cfg.train.tau);
  const auto mx = label_metrics(xs, data.test.labels);
  const auto mc = label_metrics(cs, data.test.labels);
  add_label_rows(report, "zeroshot", data.labels, mx, "", cfg.seed);
  add_label_rows(report, "zeroshot", data.labels, mc, "", cfg.seed, "_ref_C");
  for (std::size_t l = 0; l < data.labels.size(); ++l) {
    if (!mx.auc[l]) continue;
    const auto y = label_column(data.test.labels, l);
    const auto t = delong_test(column(xs, l), column(cs, l), y);
    report.add({"zeroshot", kDatasetName, data.labels.names[l], "delong_z", t.z, "", cfg.seed});
    report.add({"zeroshot", kDatasetName, data.labels.names[l], "delong_p", t.p_two_tailed, "", cfg.seed});
  }
  report.summary["zeroshot"]["macro_auc"] = mx.macro_auc;
  report.summary["zeroshot"]["macro_pr"] = mx.macro_pr;
  report.summary["zeroshot"]["macro_auc_ref_C"] = mc.macro_auc;
  report.summary["zeroshot"]["skipped"] = mx.skipped.size();
}

inline LabelMetrics fewshot_metrics(const DatasetData& data, const Tensor& train_x, const Tensor& test_x,
                                    double fraction, std::uint64_t seed, const ProbeConfig& probe) {
  const auto subset = iterative_stratified_sample(data.train.labels, fraction, seed);
  Tensor xs({subset.size(), train_x.cols()});
  std::vector<std::vector<int>> ys;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    std::copy(train_x.row(subset[i]).begin(), train_x.row(subset[i]).end(), xs.row(i).begin());
    ys.push_back(data.train.labels[subset[i]]);
  }
  const ClassifierHead head = train_linear_probe(xs, ys, probe);
  return label_metrics(probe_scores(head, test_x), data.test.labels);
}

inline void eval_fewshot(const DatasetData& data, const EncoderParams& student, const Tensor& test_x,
                         const RunConfig& cfg, const std::vector<double>& fractions, MetricReport& report) {
  const Tensor train_x = embed_radiographs(data.train.patches, student, cfg.model_config());
  for (double f : fractions) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("invalid value for key 'fewshot.fraction': must lie in (0, 1)");
    const auto m = fewshot_metrics(data, train_x, test_x, f, cfg.fewshot_seed, cfg.probe);
    const std::string key = detail::fmt_double(f);
    add_label_rows(report, "fewshot", data.labels, m, key, cfg.fewshot_seed);
    report.summary["fewshot"][key]["macro_auc"] = m.macro_auc;
    report.summary["fewshot"][key]["macro_pr"] = m.macro_pr;
  }
}

enum class EvalTask { Retrieval, ZeroShot, FewShot };

inline std::string_view task_name(EvalTask t) {
  switch (t) {
    case EvalTask::Retrieval: return "retrieval";
    case EvalTask::ZeroShot: return "zeroshot";
    case EvalTask::FewShot: return "fewshot";
  }
  return "";
}

inline MetricReport evaluate(EvalTask task, const DatasetData& data, const EncoderParams& teachers,
                             const EncoderParams& student, const RunConfig& cfg, const std::vector<double>& fractions) {
  MetricReport report;
  const TestEmbeddings e = embed_split(data.test, teachers, student, cfg.model_config());
  switch (task) {
    case EvalTask::Retrieval: eval_retrieval(e, cfg, report); break;
    case EvalTask::ZeroShot: eval_zeroshot(data, e, teachers, cfg, report); break;
    case EvalTask::FewShot: eval_fewshot(data, student, e.radiograph, cfg, fractions, report); break;
  }
  return report;
}

inline MetricReport cmd_eval(EvalTask task, const RunConfig& cfg, const fs::path& data_dir, const fs::path& teacher_path,
                             const fs::path& student_path, const fs::path& out_dir, std::vector<double> fractions = {}) {
  validate_config(cfg);
  if (fractions.empty()) fractions.push_back(cfg.fewshot_fraction);
  const EncoderParams teachers = load_teachers(teacher_path);
  const EncoderParams student = load_student(student_path);
  const DatasetData data = load_dataset(data_dir, cfg);
  MetricReport report = evaluate(task, data, teachers, student, cfg, fractions);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const std::string name(task_name(task));
  if (task == EvalTask::Retrieval) {
    const TestEmbeddings e = embed_split(data.test, teachers, student, cfg.model_config());
    io::write_atomic(out_dir / "embeddings_C.x2emb", encode_embedding_file({Modality::Volume, data.test.ids, e.volume}));
    io::write_atomic(out_dir / "embeddings_R.x2emb", encode_embedding_file({Modality::Report, data.test.ids, e.report}));
    io::write_atomic(out_dir / "embeddings_X.x2emb",
                     encode_embedding_file({Modality::Radiograph, data.test.ids, e.radiograph}));
  }
  io::write_atomic(out_dir / (name + "_metrics.csv"), report.csv());
  nlohmann::ordered_json j;
  j["task"] = name;
  j["config_hash"] = config_hash(cfg);
  j["metrics"] = report.summary;
  io::write_atomic(out_dir / (name + "_summary.json"), j.dump(2) + "\n");
  write_run_record(out_dir, "eval " + name, cfg,
                   {{"manifest.jsonl", data.manifest_hash},
                    {"teacher.x2ckpt", io::sha256_file(teacher_path)},
                    {"student.x2ckpt", io::sha256_file(student_path)}});
  return report;
}

// ---- ablate -----------------------------------------------------------------

struct AblationRow {
  double beta = 0.0;
  double gamma = 0.0;
  double ft_auc = 0.0;
  double ft_pr = 0.0;
  double report_r5 = 0.0, report_r10 = 0.0, report_r50 = 0.0;
  double volume_r5 = 0.0, volume_r10 = 0.0, volume_r50 = 0.0;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "beta,gamma,ft_auc,ft_pr,report_r5,report_r10,report_r50,volume_r5,volume_r10,volume_r50\n";
  auto f = [](double v) { return detail::fmt_double(v); };
  for (const auto& r : rows)
    out += f(r.beta) + ',' + f(r.gamma) + ',' + f(r.ft_auc) + ',' + f(r.ft_pr) + ',' + f(r.report_r5) + ',' +
           f(r.report_r10) + ',' + f(r.report_r50) + ',' + f(r.volume_r5) + ',' + f(r.volume_r10) + ',' +
           f(r.volume_r50) + '\n';
  return out;
}

// Retrieval and linear-probe metrics for one trained student.
inline AblationRow score_student(const DatasetData& data, const EncoderParams& teachers, const EncoderParams& student,
                                 const RunConfig& cfg) {
  const ModelConfig model = cfg.model_config();
  const TestEmbeddings e = embed_split(data.test, teachers, student, model);
  const auto matches = identity_matches(data.test.size());
  auto recall = [&](const Tensor& g, std::size_t k) {
    return topk_recall(e.radiograph, g, matches, std::min(k, g.rows())).recall;
  };
  AblationRow row;
  row.report_r5 = recall(e.report, 5);
  row.report_r10 = recall(e.report, 10);
  row.report_r50 = recall(e.report, 50);
  row.volume_r5 = recall(e.volume, 5);
  row.volume_r10 = recall(e.volume, 10);
  row.volume_r50 = recall(e.volume, 50);
  const Tensor train_x = embed_radiographs(data.train.patches, student, model);
  const auto m = fewshot_metrics(data, train_x, e.radiograph, cfg.ablate_fraction, cfg.fewshot_seed, cfg.probe);
  row.ft_auc = m.macro_auc;
  row.ft_pr = m.macro_pr;
  return row;
}

// The three (beta, gamma) arms, in row order (1,0), (0,1), (1,1).
inline std::vector<AblationRow> run_ablation(const DatasetData& data, const EncoderParams& teachers, const RunConfig& cfg,
                                             const fs::path* out_dir = nullptr) {
  const std::pair<double, double> arms[] = {{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}};
  std::vector<AblationRow> rows;
  for (const auto& [beta, gamma] : arms) {
    const LossWeights w{0.0, beta, gamma};
    TrainLog log;
    const EncoderParams student = train_student(data, teachers, cfg, w, &log);
    AblationRow row = score_student(data, teachers, student, cfg);
    row.beta = beta;
    row.gamma = gamma;
    rows.push_back(row);
    if (out_dir) {
      const std::string tag = "beta" + detail::fmt_double(beta) + "_gamma" + detail::fmt_double(gamma);
      write_checkpoint(*out_dir / ("student_" + tag + ".x2ckpt"), student);
      io::write_atomic(*out_dir / ("student_" + tag + "_loss.csv"), log.csv());
    }
  }
  return rows;
}

inline std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const fs::path& data_dir, const fs::path& teacher_path,
                                           const fs::path& out_dir) {
  validate_config(cfg);
  const std::string before = io::sha256_file(teacher_path);
  const EncoderParams teachers = load_teachers(teacher_path);
  const DatasetData data = load_dataset(data_dir, cfg);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const auto rows = run_ablation(data, teachers, cfg, &out_dir);
  if (io::sha256_file(teacher_path) != before)
    throw ContractError("teacher checkpoint " + teacher_path.string() + " changed during the ablation");
  io::write_atomic(out_dir / "ablation.csv", ablation_csv(rows));
  write_run_record(out_dir, "ablate", cfg, {{"manifest.jsonl", data.manifest_hash}, {"teacher.x2ckpt", before}});
  return rows;
}

}  // namespace x2ct
