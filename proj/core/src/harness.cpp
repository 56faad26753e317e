#include "kdaudit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "kdaudit/error.hpp"
#include "kdaudit/util.hpp"

namespace kdaudit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::atomic<bool> g_harness_logging{false};
std::mutex g_log_mutex;

void log_line(const std::string& line) {
  if (!g_harness_logging.load()) return;
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::fprintf(stderr, "[kdaudit] %s\n", line.c_str());
}

const std::vector<std::string> kRunMetrics = {
    "activation_distance", "rank_disagreement",        "prediction_disagreement",
    "js_divergence",       "variation_of_information", "procrustes_distance",
    "prediction_agreement", "agree_correct",           "agree_incorrect",
    "accuracy",            "test_loss"};

const std::vector<std::string> kSignificanceMetrics = {
    "activation_distance", "rank_disagreement", "prediction_disagreement",
    "js_divergence",       "variation_of_information", "procrustes_distance",
    "accuracy",            "test_loss"};

// Runs fn(0..n) on up to `jobs` workers; fn must not throw.
void parallel_for(int jobs, int64_t n, const std::function<void(int64_t)>& fn) {
  jobs = std::max(1, jobs);
  std::atomic<int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) break;
      fn(i);
    }
  };
  std::vector<std::thread> threads;
  for (int t = 0; t + 1 < jobs; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
}

std::string alpha_tag(double alpha) { return "a" + fmt6(alpha); }

std::string run_id(Condition::Kind kind, double alpha, uint64_t ts, uint64_t ss, double width) {
  std::string id;
  if (width != 1.0) id += "w" + fmt6(width) + "_";
  id += to_string(kind);
  if (kind != Condition::Kind::SIDDO) id += "_" + alpha_tag(alpha);
  id += "_t" + std::to_string(ts) + "_s" + std::to_string(ss);
  return id;
}

// Everything the jobs need from the dataset side.
struct DataBundle {
  // blobs
  std::optional<BlobDataset> blobs_train;
  std::optional<BlobDataset> blobs_test;
  // char
  std::optional<CharCorpus> corpus;          // students train on this
  std::optional<CharCorpus> teacher_corpus;  // adversarial transform applied when configured
  std::optional<CharEvalSet> eval_set;       // clean test-region sample
  std::vector<int32_t> eval_labels;
};

DataBundle load_data(const ExperimentConfig& cfg) {
  DataBundle data;
  if (cfg.dataset_kind == "blobs") {
    BlobConfig train_cfg = cfg.blob_config();
    data.blobs_train = make_blobs(train_cfg, cfg.blobs_train_seed);
    BlobConfig test_cfg = train_cfg;
    test_cfg.n = cfg.blobs_n_test;
    test_cfg.noise_rate = 0.0;  // clean ground truth on the evaluation side
    data.blobs_test = make_blobs(test_cfg, cfg.blobs_test_seed);
    data.eval_labels = data.blobs_test->labels;
  } else {
    data.corpus = resolve_corpus(cfg);
    if (cfg.adversarial_teacher) {
      data.teacher_corpus = corpus_from_text(
          adversarial_transform(data.corpus->text, cfg.adversarial_word_boundary));
      if (data.teacher_corpus->vocab != data.corpus->vocab)
        throw std::invalid_argument("adversarial transform changed the vocabulary");
    } else {
      data.teacher_corpus = data.corpus;
    }
    data.eval_set = make_char_eval_set(*data.corpus, cfg.gpt.block_size, cfg.train.eval_blocks,
                                       /*test_region=*/true, cfg.train.eval_seed);
    data.eval_labels = data.eval_set->targets;
  }
  return data;
}

GptConfig gpt_config_for(const ExperimentConfig& cfg, const DataBundle& data, double width) {
  GptConfig g = cfg.gpt;
  g.vocab = data.corpus->vocab_size();
  g.width_fraction = width;
  return g;
}

ModelCheckpoint make_init(const ExperimentConfig& cfg, const DataBundle& data, uint64_t seed,
                          double width) {
  if (cfg.model_kind == "mlp") return init_model(cfg.mlp_config(), seed);
  return init_model(gpt_config_for(cfg, data, width), seed);
}

ModelCheckpoint train_one(const ExperimentConfig& cfg, const DataBundle& data,
                          const Condition& cond, const ModelCheckpoint* teacher,
                          const ModelCheckpoint& init, bool on_teacher_corpus) {
  if (cfg.model_kind == "mlp")
    return train_student_blobs(cond, teacher, init, *data.blobs_train, *data.blobs_test,
                               cfg.train);
  const CharCorpus& corpus = on_teacher_corpus ? *data.teacher_corpus : *data.corpus;
  return train_student_char(cond, teacher, init, corpus, cfg.train);
}

LogitsMatrix eval_one(const ExperimentConfig& cfg, const DataBundle& data,
                      const ModelCheckpoint& ckpt) {
  LogitsMatrix m = cfg.model_kind == "mlp"
                       ? logits_from_tensor(mlp_eval_logits(ckpt, data.blobs_test->points))
                       : logits_from_tensor(gpt_eval_logits_on(ckpt, *data.eval_set));
  return m;
}

Condition make_condition(const ExperimentConfig& cfg, Condition::Kind kind, double alpha,
                         uint64_t data_seed) {
  Condition cond;
  cond.kind = kind;
  cond.alpha = kind == Condition::Kind::SIDDO ? 0.0 : alpha;
  cond.temperature = cfg.temperature;
  cond.feature_block = cfg.feature_block;
  cond.data_seed = data_seed;
  cond.kl_t_squared = cfg.kl_t_squared;
  cond.rcd_normalize = cfg.rcd_normalize;
  cond.rcd_fixed_per_example = cfg.rcd_fixed_per_example;
  return cond;
}

struct StudentJob {
  std::string id;
  Condition cond;
  double width = 1.0;
  uint64_t teacher_seed = 0;
  uint64_t student_seed = 0;
  size_t teacher_slot = 0;
  bool uses_teacher = false;
  const ModelCheckpoint* init = nullptr;
};

struct JobOutcome {
  RunRecord record;
  std::optional<LogitsMatrix> logits;
};

void fill_record_from(const ModelCheckpoint& ckpt, RunRecord& rec) {
  rec.train_loss = ckpt.provenance.train_loss;
  rec.train_accuracy = ckpt.provenance.train_accuracy;
  rec.test_loss = ckpt.provenance.test_loss;
  rec.test_accuracy = ckpt.provenance.test_accuracy;
}

// ----------------------------------------------------------- CSV writers

std::string metrics_csv(const std::vector<std::pair<RunRecord, std::map<std::string, double>>>&
                            rows) {
  std::ostringstream out;
  out << "condition,alpha,student_seed,metric,value\n";
  for (const auto& [rec, metrics] : rows)
    for (const auto& name : kRunMetrics) {
      const auto it = metrics.find(name);
      if (it == metrics.end()) continue;
      out << rec.condition << ',' << fmt6(rec.alpha) << ',' << rec.student_seed << ',' << name
          << ',' << fmt6(it->second) << '\n';
    }
  return out.str();
}

std::string aggregate_csv(const std::vector<MetricSamples>& cells) {
  std::ostringstream out;
  out << "condition,alpha,metric,mean,sem,n\n";
  for (const auto& cell : cells)
    for (const auto& name : kRunMetrics) {
      const auto it = cell.by_metric.find(name);
      if (it == cell.by_metric.end() || it->second.empty()) continue;
      const auto& v = it->second;
      const double s = v.size() >= 2 ? sem(v) : std::numeric_limits<double>::quiet_NaN();
      out << to_string(cell.kind) << ',' << fmt6(cell.alpha) << ',' << name << ','
          << fmt6(mean(v)) << ',' << fmt6(s) << ',' << v.size() << '\n';
    }
  return out.str();
}

std::string agreement_delta_csv(const std::vector<AgreementDeltaRow>& rows, bool with_width) {
  std::ostringstream out;
  if (with_width)
    out << "width,alpha,delta_correct,delta_incorrect,sem_correct,sem_incorrect,"
           "baseline_condition\n";
  else
    out << "alpha,delta_correct,delta_incorrect,sem_correct,sem_incorrect,baseline_condition\n";
  for (const auto& r : rows) {
    if (with_width) out << fmt6(r.width) << ',';
    out << fmt6(r.alpha) << ',' << fmt6(r.delta_correct) << ',' << fmt6(r.delta_incorrect) << ','
        << fmt6(r.sem_correct) << ',' << fmt6(r.sem_incorrect) << ',' << r.baseline << '\n';
  }
  return out.str();
}

// --------------------------------------------------------- report builder

std::map<std::string, double> metric_map_for(const LogitsMatrix& teacher_logits,
                                             const std::vector<int32_t>& teacher_preds,
                                             const LogitsMatrix& student_logits,
                                             std::span<const int32_t> labels,
                                             const RunRecord& rec) {
  const MetricRow m = all_metrics(teacher_logits, student_logits);
  const auto student_preds = top1_predictions(student_logits);
  const AgreementSplit split = agreement_split(student_preds, teacher_preds, labels);
  std::map<std::string, double> metrics;
  metrics["activation_distance"] = m.activation_distance;
  metrics["rank_disagreement"] = m.rank_disagreement;
  metrics["prediction_disagreement"] = m.prediction_disagreement;
  metrics["js_divergence"] = m.js_divergence;
  metrics["variation_of_information"] = m.variation_of_information;
  metrics["procrustes_distance"] = m.procrustes_distance;
  metrics["prediction_agreement"] = 1.0 - m.prediction_disagreement;
  metrics["agree_correct"] = split.agree_correct;
  metrics["agree_incorrect"] = split.agree_incorrect;
  metrics["accuracy"] = rec.test_accuracy;
  metrics["test_loss"] = rec.test_loss;
  return metrics;
}

struct CellKey {
  Condition::Kind kind;
  double alpha;
  bool operator<(const CellKey& other) const {
    if (kind != other.kind) return static_cast<int>(kind) < static_cast<int>(other.kind);
    return alpha < other.alpha;
  }
};

bool is_control(Condition::Kind kind) {
  return kind == Condition::Kind::SIDDO || kind == Condition::Kind::RCD;
}

// Builds cells, best control, deltas and significance for one teacher seed.
PerTeacherReport build_report(
    uint64_t teacher_seed,
    const std::vector<std::pair<RunRecord, std::map<std::string, double>>>& rows) {
  PerTeacherReport report;
  report.teacher_seed = teacher_seed;

  std::map<CellKey, MetricSamples> cells;
  for (const auto& [rec, metrics] : rows) {
    const CellKey key{condition_kind_from_string(rec.condition), rec.alpha};
    auto& cell = cells[key];
    cell.kind = key.kind;
    cell.alpha = key.alpha;
    for (const auto& [name, value] : metrics) cell.by_metric[name].push_back(value);
  }
  for (auto& [key, cell] : cells) report.cells.push_back(cell);

  std::vector<ControlCell> controls;
  for (const auto& cell : report.cells) {
    if (!is_control(cell.kind)) continue;
    const auto it = cell.by_metric.find("prediction_agreement");
    if (it == cell.by_metric.end() || it->second.empty()) continue;
    controls.push_back({cell.kind, cell.alpha, mean(it->second)});
  }
  if (controls.empty()) return report;  // nothing to baseline against
  report.best_control = best_control_baseline(controls);

  const MetricSamples* baseline = nullptr;
  for (const auto& cell : report.cells)
    if (cell_label(cell.kind, cell.alpha) == report.best_control) baseline = &cell;
  const double base_correct = mean(baseline->by_metric.at("agree_correct"));
  const double base_incorrect = mean(baseline->by_metric.at("agree_incorrect"));

  for (const auto& cell : report.cells) {
    if (is_control(cell.kind)) continue;
    AgreementDeltaRow row;
    row.condition = to_string(cell.kind);
    row.alpha = cell.alpha;
    row.baseline = report.best_control;
    const auto& corr = cell.by_metric.at("agree_correct");
    const auto& inc = cell.by_metric.at("agree_incorrect");
    for (double v : corr) row.per_seed_delta_correct.push_back(v - base_correct);
    for (double v : inc) row.per_seed_delta_incorrect.push_back(v - base_incorrect);
    row.delta_correct = mean(row.per_seed_delta_correct);
    row.delta_incorrect = mean(row.per_seed_delta_incorrect);
    row.sem_correct = corr.size() >= 2 ? sem(row.per_seed_delta_correct)
                                       : std::numeric_limits<double>::quiet_NaN();
    row.sem_incorrect = inc.size() >= 2 ? sem(row.per_seed_delta_incorrect)
                                        : std::numeric_limits<double>::quiet_NaN();
    report.deltas.push_back(std::move(row));
  }

  // Significance: one alpha slice at a time so a missing pair only marks its
  // own rows incomplete.
  const MetricSamples* siddo = nullptr;
  std::map<double, const MetricSamples*> rcd_by_alpha;
  for (const auto& cell : report.cells) {
    if (cell.kind == Condition::Kind::SIDDO) siddo = &cell;
    if (cell.kind == Condition::Kind::RCD) rcd_by_alpha[cell.alpha] = &cell;
  }
  for (const auto& cell : report.cells) {
    if (is_control(cell.kind) || cell.kind == Condition::Kind::LS) continue;
    auto emit_incomplete = [&](const std::string& gap) {
      for (const auto& name : kSignificanceMetrics) {
        if (!cell.by_metric.count(name)) continue;
        SignificanceRow row;
        row.metric = name;
        row.condition = to_string(cell.kind);
        row.alpha = cell.alpha;
        row.u_vs_siddo = row.p_vs_siddo = std::numeric_limits<double>::quiet_NaN();
        row.u_vs_rcd = row.p_vs_rcd = std::numeric_limits<double>::quiet_NaN();
        row.significant = false;
        row.status = "incomplete:" + gap;
        report.significance.push_back(std::move(row));
      }
    };
    const auto rcd_it = rcd_by_alpha.find(cell.alpha);
    const size_t n_kd = cell.by_metric.count("accuracy") ? cell.by_metric.at("accuracy").size() : 0;
    if (!siddo) {
      emit_incomplete("siddo");
      continue;
    }
    if (rcd_it == rcd_by_alpha.end()) {
      emit_incomplete("rcd_" + alpha_tag(cell.alpha));
      continue;
    }
    const size_t n_siddo = siddo->by_metric.at("accuracy").size();
    const size_t n_rcd = rcd_it->second->by_metric.at("accuracy").size();
    if (n_kd < 3 || n_siddo < 3 || n_rcd < 3) {
      emit_incomplete("need_3_runs");
      continue;
    }
    MetricSamples kd_slice;
    kd_slice.kind = cell.kind;
    kd_slice.alpha = cell.alpha;
    MetricSamples siddo_slice = *siddo;
    MetricSamples rcd_slice = *rcd_it->second;
    for (const auto& name : kSignificanceMetrics)
      if (cell.by_metric.count(name)) kd_slice.by_metric[name] = cell.by_metric.at(name);
    const auto rows_for_cell =
        build_significance_table({kd_slice, siddo_slice, rcd_slice});
    for (const auto& r : rows_for_cell) report.significance.push_back(r);
  }
  // stable metric-major output: sort by (alpha, metric order)
  std::stable_sort(report.significance.begin(), report.significance.end(),
                   [](const SignificanceRow& a, const SignificanceRow& b) {
                     if (a.alpha != b.alpha) return a.alpha < b.alpha;
                     const auto rank = [](const std::string& m) {
                       const auto it =
                           std::find(kSignificanceMetrics.begin(), kSignificanceMetrics.end(), m);
                       return it - kSignificanceMetrics.begin();
                     };
                     return rank(a.metric) < rank(b.metric);
                   });
  return report;
}

PerTeacherReport write_teacher_reports(
    const fs::path& outdir, uint64_t ts,
    const std::vector<std::pair<RunRecord, std::map<std::string, double>>>& rows,
    std::vector<std::string>& report_files) {
  const std::string suffix = "_t" + std::to_string(ts) + ".csv";
  write_text_file(outdir / "reports" / ("metrics" + suffix), metrics_csv(rows));
  report_files.push_back("reports/metrics" + suffix);

  PerTeacherReport report = build_report(ts, rows);
  write_text_file(outdir / "reports" / ("aggregate" + suffix), aggregate_csv(report.cells));
  report_files.push_back("reports/aggregate" + suffix);
  write_text_file(outdir / "reports" / ("significance" + suffix),
                  significance_table_csv(report.significance));
  report_files.push_back("reports/significance" + suffix);

  std::map<std::string, std::vector<AgreementDeltaRow>> delta_groups;
  for (const auto& row : report.deltas) delta_groups[row.condition].push_back(row);
  write_text_file(outdir / "reports" / ("agreement_delta" + suffix),
                  agreement_delta_csv(delta_groups["kd"], /*with_width=*/false));
  report_files.push_back("reports/agreement_delta" + suffix);
  for (const auto& [condition, grouped] : delta_groups) {
    if (condition == "kd") continue;
    const std::string path = "reports/agreement_delta_" + condition + suffix;
    write_text_file(outdir / path, agreement_delta_csv(grouped, /*with_width=*/false));
    report_files.push_back(path);
  }
  return report;
}

}  // namespace

void set_harness_logging(bool enabled) { g_harness_logging.store(enabled); }

// --------------------------------------------------------------- manifest

std::string cell_label(Condition::Kind kind, double alpha) {
  if (kind == Condition::Kind::SIDDO) return "siddo";
  return to_string(kind) + "@" + fmt6(alpha);
}

std::string best_control_baseline(const std::vector<ControlCell>& controls) {
  if (controls.empty())
    throw std::invalid_argument("best_control_baseline: no control conditions present");
  const ControlCell* best = &controls.front();
  for (const auto& c : controls) {
    if (c.mean_agreement > best->mean_agreement) {
      best = &c;
    } else if (c.mean_agreement == best->mean_agreement) {
      // tie: lowest alpha wins, SIDDO ordered before RCD
      const auto key = [](const ControlCell& x) {
        return std::make_pair(x.kind == Condition::Kind::SIDDO ? 0.0 : x.alpha,
                              x.kind == Condition::Kind::SIDDO ? 0 : 1);
      };
      if (key(c) < key(*best)) best = &c;
    }
  }
  return cell_label(best->kind, best->alpha);
}

void save_manifest(const RunManifest& manifest, const fs::path& outdir) {
  json runs = json::array();
  for (const auto& r : manifest.runs) {
    runs.push_back(json{{"id", r.id},
                        {"condition", r.condition},
                        {"alpha", r.alpha},
                        {"width", r.width},
                        {"teacher_seed", r.teacher_seed},
                        {"student_seed", r.student_seed},
                        {"status", r.status},
                        {"train_loss", r.train_loss},
                        {"train_accuracy", r.train_accuracy},
                        {"test_loss", r.test_loss},
                        {"test_accuracy", r.test_accuracy}});
  }
  json files = json::array();
  for (const auto& f : manifest.files) files.push_back(json{{"path", f.path}, {"hash", f.hash}});
  json doc{{"format_version", 1},
           {"config_text", manifest.config_snapshot.print()},
           {"runs", runs},
           {"files", files}};
  write_text_file(outdir / "manifest.json", doc.dump(2) + "\n");
}

RunManifest load_manifest(const fs::path& outdir) {
  const json doc = json::parse(read_text_file(outdir / "manifest.json"));
  RunManifest manifest;
  manifest.config_snapshot = ConfigDoc::parse(doc.at("config_text").get<std::string>());
  for (const auto& r : doc.at("runs")) {
    RunRecord rec;
    rec.id = r.at("id").get<std::string>();
    rec.condition = r.at("condition").get<std::string>();
    rec.alpha = r.at("alpha").get<double>();
    rec.width = r.at("width").get<double>();
    rec.teacher_seed = r.at("teacher_seed").get<uint64_t>();
    rec.student_seed = r.at("student_seed").get<uint64_t>();
    rec.status = r.at("status").get<std::string>();
    rec.train_loss = r.at("train_loss").get<double>();
    rec.train_accuracy = r.at("train_accuracy").get<double>();
    rec.test_loss = r.at("test_loss").get<double>();
    rec.test_accuracy = r.at("test_accuracy").get<double>();
    manifest.runs.push_back(std::move(rec));
  }
  for (const auto& f : doc.at("files")) {
    RunManifest::FileEntry entry{f.at("path").get<std::string>(), f.at("hash").get<uint64_t>()};
    const fs::path full = outdir / entry.path;
    if (!fs::exists(full))
      throw IoError("manifest: missing file " + entry.path);
    if (hash_file(full) != entry.hash)
      throw IoError("manifest: content hash mismatch for " + entry.path);
    manifest.files.push_back(std::move(entry));
  }
  return manifest;
}

// -------------------------------------------------------------- matrices

MatrixResult run_matrix(const ExperimentConfig& cfg, const fs::path& outdir, int jobs) {
  cfg.validate();
  fs::create_directories(outdir / "models");
  fs::create_directories(outdir / "logits");
  fs::create_directories(outdir / "reports");
  const DataBundle data = load_data(cfg);
  save_labels(data.eval_labels, outdir / "labels.dlab");

  MatrixResult result;
  result.manifest.config_snapshot = doc_from_config(cfg);

  // -------- teachers
  struct TeacherSlot {
    ModelCheckpoint init0;
    ModelCheckpoint trained;
    LogitsMatrix logits;
    RunRecord rec;
    bool ok = false;
  };
  const auto n_teachers = static_cast<int64_t>(cfg.teacher_seeds.size());
  std::vector<TeacherSlot> teachers(static_cast<size_t>(n_teachers));
  parallel_for(jobs, n_teachers, [&](int64_t i) {
    TeacherSlot& slot = teachers[size_t(i)];
    const uint64_t ts = cfg.teacher_seeds[size_t(i)];
    slot.rec.id = "teacher_t" + std::to_string(ts);
    slot.rec.condition = "teacher";
    slot.rec.teacher_seed = ts;
    slot.rec.student_seed = ts;
    try {
      slot.init0 = make_init(cfg, data, ts, cfg.gpt.width_fraction);
      const Condition cond = make_condition(cfg, Condition::Kind::SIDDO, 0.0, ts);
      slot.trained = train_one(cfg, data, cond, nullptr, slot.init0, /*teacher_corpus=*/true);
      slot.trained.provenance.condition = "teacher";
      save_checkpoint(slot.trained, outdir / "models" / slot.rec.id);
      slot.logits = eval_one(cfg, data, slot.trained);
      save_logits(slot.logits, outdir / "logits" / (slot.rec.id + ".dlog"));
      fill_record_from(slot.trained, slot.rec);
      slot.ok = true;
    } catch (const std::exception& e) {
      slot.rec.status = std::string("failed: ") + e.what();
    }
    log_line(slot.rec.id + " " + slot.rec.status);
  });

  // -------- student jobs (deterministic order)
  std::vector<StudentJob> job_list;
  for (size_t ti = 0; ti < cfg.teacher_seeds.size(); ++ti) {
    for (const auto kind : cfg.conditions) {
      const std::vector<double> alphas =
          kind == Condition::Kind::SIDDO ? std::vector<double>{0.0} : cfg.alphas;
      for (const double alpha : alphas) {
        for (const uint64_t ss : cfg.student_seeds) {
          StudentJob job;
          job.cond = make_condition(cfg, kind, alpha, ss);
          job.id = run_id(kind, job.cond.alpha, cfg.teacher_seeds[ti], ss, 1.0);
          job.teacher_seed = cfg.teacher_seeds[ti];
          job.student_seed = ss;
          job.teacher_slot = ti;
          job.uses_teacher =
              kind == Condition::Kind::KD || kind == Condition::Kind::FeatureKD;
          job_list.push_back(std::move(job));
        }
      }
    }
  }

  std::vector<JobOutcome> outcomes(job_list.size());
  parallel_for(jobs, static_cast<int64_t>(job_list.size()), [&](int64_t i) {
    const StudentJob& job = job_list[size_t(i)];
    const TeacherSlot& tslot = teachers[job.teacher_slot];
    JobOutcome& out = outcomes[size_t(i)];
    out.record.id = job.id;
    out.record.condition = to_string(job.cond.kind);
    out.record.alpha = job.cond.alpha;
    out.record.teacher_seed = job.teacher_seed;
    out.record.student_seed = job.student_seed;
    if (!tslot.ok) {
      out.record.status = "failed: teacher " + tslot.rec.id + " unavailable";
      return;
    }
    try {
      const ModelCheckpoint* teacher = job.uses_teacher ? &tslot.trained : nullptr;
      ModelCheckpoint trained =
          train_one(cfg, data, job.cond, teacher, tslot.init0, /*teacher_corpus=*/false);
      trained.provenance.teacher = job.uses_teacher ? tslot.rec.id : "";
      save_checkpoint(trained, outdir / "models" / job.id);
      LogitsMatrix logits = eval_one(cfg, data, trained);
      save_logits(logits, outdir / "logits" / (job.id + ".dlog"));
      fill_record_from(trained, out.record);
      out.logits = std::move(logits);
    } catch (const std::exception& e) {
      out.record.status = std::string("failed: ") + e.what();
    }
    log_line(out.record.id + " " + out.record.status);
  });

  // -------- assemble reports per teacher seed
  std::vector<std::string> report_files;
  for (size_t ti = 0; ti < cfg.teacher_seeds.size(); ++ti) {
    const uint64_t ts = cfg.teacher_seeds[ti];
    const TeacherSlot& tslot = teachers[ti];
    result.manifest.runs.push_back(tslot.rec);
    if (!tslot.ok) ++result.failed_jobs;

    std::vector<std::pair<RunRecord, std::map<std::string, double>>> rows;
    const auto teacher_preds = tslot.ok ? top1_predictions(tslot.logits) : std::vector<int32_t>{};
    for (size_t i = 0; i < job_list.size(); ++i) {
      if (job_list[i].teacher_slot != ti) continue;
      const JobOutcome& out = outcomes[i];
      result.manifest.runs.push_back(out.record);
      if (out.record.status != "ok" || !out.logits) {
        ++result.failed_jobs;
        continue;
      }
      rows.emplace_back(out.record, metric_map_for(tslot.logits, teacher_preds, *out.logits,
                                                   data.eval_labels, out.record));
    }

    result.per_teacher.push_back(write_teacher_reports(outdir, ts, rows, report_files));
  }

  // -------- manifest with the file inventory
  auto add_file = [&](const std::string& rel) {
    result.manifest.files.push_back({rel, hash_file(outdir / rel)});
  };
  add_file("labels.dlab");
  for (const auto& rec : result.manifest.runs) {
    if (rec.status != "ok") continue;
    add_file("models/" + rec.id + "/manifest.json");
    add_file("models/" + rec.id + "/weights.bin");
    add_file("logits/" + rec.id + ".dlog");
  }
  for (const auto& rel : report_files) add_file(rel);
  save_manifest(result.manifest, outdir);
  return result;
}

// ------------------------------------------------------------ adversarial

AdversarialCounts adversarial_eval(const ModelCheckpoint& ckpt, const CharCorpus& clean_corpus,
                                   int64_t gen_chars, int64_t streams, int64_t prompt_len,
                                   double temperature, uint64_t seed) {
  if (ckpt.kind != ModelKind::Gpt)
    throw std::invalid_argument("adversarial_eval: expected a GPT checkpoint");
  if (ckpt.gpt.vocab != clean_corpus.vocab_size())
    throw std::invalid_argument("adversarial_eval: checkpoint vocab does not match corpus");
  if (streams < 1 || gen_chars < streams)
    throw std::invalid_argument("adversarial_eval: need gen_chars >= streams >= 1");
  if (prompt_len < 1 || prompt_len > ckpt.gpt.block_size)
    throw std::invalid_argument("adversarial_eval: prompt length out of range");

  // Fixed prompts from the clean test region.
  RngStream prompt_rng(derive_seed(seed, "adv_prompts", 0));
  const int64_t lo = clean_corpus.train_boundary;
  const int64_t hi = static_cast<int64_t>(clean_corpus.tokens.size()) - prompt_len;
  if (hi < lo) throw std::invalid_argument("adversarial_eval: test region too small");
  std::vector<std::vector<int32_t>> prompts;
  for (int64_t s = 0; s < streams; ++s) {
    const int64_t start = lo + static_cast<int64_t>(prompt_rng.uniform_below(uint64_t(hi - lo + 1)));
    prompts.emplace_back(clean_corpus.tokens.begin() + start,
                         clean_corpus.tokens.begin() + start + prompt_len);
  }
  const int64_t per_stream = (gen_chars + streams - 1) / streams;
  const auto generated = gpt_generate_batched(ckpt, prompts, per_stream, temperature, seed);
  AdversarialCounts counts;
  for (const auto& stream : generated) {
    const std::string text = clean_corpus.decode(stream);
    counts.tha += count_word(text, "tha");
    counts.the += count_word(text, "the");
  }
  return counts;
}

AdversarialResult run_adversarial(const ExperimentConfig& cfg, const fs::path& outdir,
                                  int jobs) {
  ExperimentConfig acfg = cfg;
  acfg.dataset_kind = "char";
  acfg.model_kind = "gpt";
  acfg.adversarial_teacher = true;
  AdversarialResult result;
  result.matrix = run_matrix(acfg, outdir, jobs);

  const CharCorpus clean = resolve_corpus(acfg);
  std::vector<const RunRecord*> ok_runs;
  for (const auto& rec : result.matrix.manifest.runs)
    if (rec.status == "ok") ok_runs.push_back(&rec);

  const int64_t greedy_chars = std::min<int64_t>(acfg.gen_chars, 2000);
  result.rows.resize(ok_runs.size() * 2);
  parallel_for(jobs, static_cast<int64_t>(ok_runs.size()), [&](int64_t i) {
    const RunRecord& rec = *ok_runs[size_t(i)];
    const ModelCheckpoint ckpt = load_checkpoint(outdir / "models" / rec.id);
    AdversarialRow sampled;
    sampled.id = rec.id;
    sampled.condition = rec.condition;
    sampled.alpha = rec.alpha;
    sampled.student_seed = rec.student_seed;
    sampled.temperature = acfg.gen_temperature;
    sampled.counts =
        adversarial_eval(ckpt, clean, acfg.gen_chars, acfg.gen_streams, acfg.gen_prompt_len,
                         acfg.gen_temperature, acfg.gen_seed);
    AdversarialRow greedy = sampled;
    greedy.temperature = 0.0;
    greedy.counts = adversarial_eval(ckpt, clean, greedy_chars, acfg.gen_streams,
                                     acfg.gen_prompt_len, 0.0, acfg.gen_seed);
    result.rows[size_t(2 * i)] = std::move(sampled);
    result.rows[size_t(2 * i + 1)] = std::move(greedy);
  });

  std::ostringstream csv;
  csv << "id,condition,alpha,student_seed,temperature,count_tha,count_the\n";
  for (const auto& row : result.rows)
    csv << row.id << ',' << row.condition << ',' << fmt6(row.alpha) << ',' << row.student_seed
        << ',' << fmt6(row.temperature) << ',' << row.counts.tha << ',' << row.counts.the << '\n';
  write_text_file(outdir / "reports" / "adversarial_counts.csv", csv.str());
  result.matrix.manifest.files.push_back(
      {"reports/adversarial_counts.csv", hash_file(outdir / "reports/adversarial_counts.csv")});
  save_manifest(result.matrix.manifest, outdir);
  return result;
}

// ------------------------------------------------------------ width sweep

WidthSweepResult width_sweep(const ExperimentConfig& cfg, const fs::path& outdir, int jobs) {
  ExperimentConfig scfg = cfg;
  scfg.validate();
  if (scfg.dataset_kind != "char" || scfg.model_kind != "gpt")
    throw std::invalid_argument("width_sweep: requires the char dataset and gpt model");
  fs::create_directories(outdir / "models");
  fs::create_directories(outdir / "logits");
  fs::create_directories(outdir / "reports");
  const DataBundle data = load_data(scfg);
  save_labels(data.eval_labels, outdir / "labels.dlab");

  WidthSweepResult result;
  result.manifest.config_snapshot = doc_from_config(scfg);

  // teacher at full width, first teacher seed
  const uint64_t ts = scfg.teacher_seeds.front();
  ModelCheckpoint teacher_init = make_init(scfg, data, ts, 1.0);
  RunRecord trec;
  trec.id = "teacher_t" + std::to_string(ts);
  trec.condition = "teacher";
  trec.teacher_seed = trec.student_seed = ts;
  ModelCheckpoint teacher;
  LogitsMatrix teacher_logits;
  try {
    teacher = train_one(scfg, data, make_condition(scfg, Condition::Kind::SIDDO, 0.0, ts),
                        nullptr, teacher_init, true);
    teacher.provenance.condition = "teacher";
    save_checkpoint(teacher, outdir / "models" / trec.id);
    teacher_logits = eval_one(scfg, data, teacher);
    save_logits(teacher_logits, outdir / "logits" / (trec.id + ".dlog"));
    fill_record_from(teacher, trec);
  } catch (const std::exception& e) {
    trec.status = std::string("failed: ") + e.what();
    result.manifest.runs.push_back(trec);
    ++result.failed_jobs;
    save_manifest(result.manifest, outdir);
    return result;
  }
  result.manifest.runs.push_back(trec);

  // per-width shared inits (width 1.0 reuses the teacher's own init)
  std::vector<ModelCheckpoint> width_inits;
  for (size_t wi = 0; wi < scfg.width_fractions.size(); ++wi) {
    const double w = scfg.width_fractions[wi];
    if (w == 1.0)
      width_inits.push_back(teacher_init);
    else
      width_inits.push_back(make_init(
          scfg, data, derive_seed(scfg.experiment_seed, "width_init", uint64_t(wi)), w));
  }

  std::vector<StudentJob> job_list;
  for (size_t wi = 0; wi < scfg.width_fractions.size(); ++wi) {
    const double w = scfg.width_fractions[wi];
    for (const auto kind : scfg.conditions) {
      const std::vector<double> alphas =
          kind == Condition::Kind::SIDDO ? std::vector<double>{0.0} : scfg.alphas;
      for (const double alpha : alphas) {
        for (const uint64_t ss : scfg.student_seeds) {
          StudentJob job;
          job.cond = make_condition(scfg, kind, alpha, ss);
          job.width = w;
          job.id = run_id(kind, job.cond.alpha, ts, ss, w);
          job.teacher_seed = ts;
          job.student_seed = ss;
          job.uses_teacher =
              kind == Condition::Kind::KD || kind == Condition::Kind::FeatureKD;
          job.init = &width_inits[wi];
          job_list.push_back(std::move(job));
        }
      }
    }
  }

  std::vector<JobOutcome> outcomes(job_list.size());
  parallel_for(jobs, static_cast<int64_t>(job_list.size()), [&](int64_t i) {
    const StudentJob& job = job_list[size_t(i)];
    JobOutcome& out = outcomes[size_t(i)];
    out.record.id = job.id;
    out.record.condition = to_string(job.cond.kind);
    out.record.alpha = job.cond.alpha;
    out.record.width = job.width;
    out.record.teacher_seed = job.teacher_seed;
    out.record.student_seed = job.student_seed;
    try {
      const ModelCheckpoint* t = job.uses_teacher ? &teacher : nullptr;
      ModelCheckpoint trained = train_one(scfg, data, job.cond, t, *job.init, false);
      trained.provenance.teacher = job.uses_teacher ? trec.id : "";
      save_checkpoint(trained, outdir / "models" / job.id);
      LogitsMatrix logits = eval_one(scfg, data, trained);
      save_logits(logits, outdir / "logits" / (job.id + ".dlog"));
      fill_record_from(trained, out.record);
      out.logits = std::move(logits);
    } catch (const std::exception& e) {
      out.record.status = std::string("failed: ") + e.what();
    }
    log_line(out.record.id + " " + out.record.status);
  });

  const auto teacher_preds = top1_predictions(teacher_logits);
  for (size_t wi = 0; wi < scfg.width_fractions.size(); ++wi) {
    const double w = scfg.width_fractions[wi];
    std::vector<std::pair<RunRecord, std::map<std::string, double>>> rows;
    for (size_t i = 0; i < job_list.size(); ++i) {
      if (job_list[i].width != w) continue;
      const JobOutcome& out = outcomes[i];
      result.manifest.runs.push_back(out.record);
      if (out.record.status != "ok" || !out.logits) {
        ++result.failed_jobs;
        continue;
      }
      const auto student_preds = top1_predictions(*out.logits);
      const AgreementSplit split =
          agreement_split(student_preds, teacher_preds, data.eval_labels);
      std::map<std::string, double> metrics;
      metrics["prediction_agreement"] =
          1.0 - prediction_disagreement(teacher_logits, *out.logits);
      metrics["agree_correct"] = split.agree_correct;
      metrics["agree_incorrect"] = split.agree_incorrect;
      metrics["accuracy"] = out.record.test_accuracy;
      metrics["test_loss"] = out.record.test_loss;
      rows.emplace_back(out.record, std::move(metrics));
    }
    PerTeacherReport report = build_report(ts, rows);
    for (auto& row : report.deltas) {
      if (row.condition != "kd") continue;
      row.width = w;
      result.deltas.push_back(row);
    }
  }
  std::stable_sort(result.deltas.begin(), result.deltas.end(),
                   [](const AgreementDeltaRow& a, const AgreementDeltaRow& b) {
                     if (a.width != b.width) return a.width < b.width;
                     return a.alpha < b.alpha;
                   });
  write_text_file(outdir / "reports" / "width_agreement_delta.csv",
                  agreement_delta_csv(result.deltas, /*with_width=*/true));

  auto add_file = [&](const std::string& rel) {
    result.manifest.files.push_back({rel, hash_file(outdir / rel)});
  };
  add_file("labels.dlab");
  for (const auto& rec : result.manifest.runs) {
    if (rec.status != "ok") continue;
    add_file("models/" + rec.id + "/manifest.json");
    add_file("models/" + rec.id + "/weights.bin");
    add_file("logits/" + rec.id + ".dlog");
  }
  add_file("reports/width_agreement_delta.csv");
  save_manifest(result.manifest, outdir);
  return result;
}

// ------------------------------------------------------ one-off training

ModelCheckpoint init_for_config(const ExperimentConfig& cfg, uint64_t seed) {
  const DataBundle data = load_data(cfg);
  return make_init(cfg, data, seed, cfg.gpt.width_fraction);
}

ModelCheckpoint train_one_model(const ExperimentConfig& cfg, const Condition& cond,
                                const ModelCheckpoint* teacher, const ModelCheckpoint& init,
                                bool on_teacher_corpus) {
  const DataBundle data = load_data(cfg);
  return train_one(cfg, data, cond, teacher, init, on_teacher_corpus);
}

LogitsMatrix eval_model(const ExperimentConfig& cfg, const ModelCheckpoint& ckpt) {
  const DataBundle data = load_data(cfg);
  return eval_one(cfg, data, ckpt);
}

std::vector<int32_t> eval_labels_for(const ExperimentConfig& cfg) {
  return load_data(cfg).eval_labels;
}

// ----------------------------------------------------------- re-reporting

void rebuild_reports(const fs::path& runs_dir, const fs::path& out_dir) {
  const RunManifest manifest = load_manifest(runs_dir);  // verifies hashes
  fs::create_directories(out_dir / "reports");
  const auto labels = load_labels(runs_dir / "labels.dlab");

  std::vector<uint64_t> teacher_seeds;
  for (const auto& rec : manifest.runs)
    if (rec.condition == "teacher" && rec.status == "ok") teacher_seeds.push_back(rec.teacher_seed);
  if (teacher_seeds.empty()) throw IncompleteMatrix("rebuild_reports: no trained teacher runs");

  std::vector<std::string> report_files;
  for (const uint64_t ts : teacher_seeds) {
    const LogitsMatrix teacher_logits =
        load_logits(runs_dir / "logits" / ("teacher_t" + std::to_string(ts) + ".dlog"));
    const auto teacher_preds = top1_predictions(teacher_logits);
    std::vector<std::pair<RunRecord, std::map<std::string, double>>> rows;
    for (const auto& rec : manifest.runs) {
      if (rec.condition == "teacher" || rec.teacher_seed != ts || rec.status != "ok" ||
          rec.width != 1.0)
        continue;
      const LogitsMatrix student_logits = load_logits(runs_dir / "logits" / (rec.id + ".dlog"));
      rows.emplace_back(rec, metric_map_for(teacher_logits, teacher_preds, student_logits,
                                            labels, rec));
    }
    write_teacher_reports(out_dir, ts, rows, report_files);
  }
}

// -------------------------------------------------------------- corpus IO

CharCorpus resolve_corpus(const ExperimentConfig& cfg) {
  if (!cfg.corpus_path.empty()) return load_char_corpus(cfg.corpus_path);
  const char* cache_env = std::getenv("DISTILL_AUDIT_CACHE");
  if (cache_env == nullptr || *cache_env == '\0')
    throw std::invalid_argument(
        "no dataset.corpus_path configured and DISTILL_AUDIT_CACHE is unset");
  const fs::path cache_dir(cache_env);
  fs::create_directories(cache_dir);
  std::ostringstream name;
  name << std::hex << fnv1a64(cfg.corpus_url);
  const fs::path dest = cache_dir / (name.str() + ".txt");
  if (!fs::exists(dest)) fetch_url(cfg.corpus_url, dest);
  return load_char_corpus(dest);
}

}  // namespace kdaudit
