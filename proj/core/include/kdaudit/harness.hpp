#pragma once

// Orchestration: the teachers x conditions x alphas x student-seeds matrix,
// the adversarial-transfer evaluation, the width-scaling sweep, and CSV/
// manifest emission. Jobs are independent and deterministic, so reports are
// byte-identical for any worker count.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kdaudit/checkpoint.hpp"
#include "kdaudit/config.hpp"
#include "kdaudit/data.hpp"
#include "kdaudit/funcsim.hpp"
#include "kdaudit/stats.hpp"

namespace kdaudit {

struct RunRecord {
  std::string id;  // e.g. teacher_t0, kd_a0.9_t0_s10, w0.5_siddo_t0_s11
  std::string condition;
  double alpha = 0.0;
  double width = 1.0;
  uint64_t teacher_seed = 0;
  uint64_t student_seed = 0;
  std::string status = "ok";  // ok | failed: <reason>
  double train_loss = 0.0, train_accuracy = 0.0;
  double test_loss = 0.0, test_accuracy = 0.0;
};

struct RunManifest {
  ConfigDoc config_snapshot;
  std::vector<RunRecord> runs;
  struct FileEntry {
    std::string path;  // relative to the run directory
    uint64_t hash = 0;
  };
  std::vector<FileEntry> files;
};

void save_manifest(const RunManifest& manifest, const std::filesystem::path& outdir);
// Verifies that every referenced file exists and hash-matches; throws
// IoError naming the first offending file.
RunManifest load_manifest(const std::filesystem::path& outdir);

// Cell label used in reports and for best-control selection, e.g. "siddo",
// "rcd@0.1", "kd@0.9".
std::string cell_label(Condition::Kind kind, double alpha);

// Highest mean prediction agreement with the teacher among the control
// cells (SIDDO and every RCD alpha). Ties resolve to the lowest alpha with
// SIDDO ordered before RCD. Throws std::invalid_argument with no controls.
struct ControlCell {
  Condition::Kind kind;
  double alpha = 0.0;
  double mean_agreement = 0.0;
};
std::string best_control_baseline(const std::vector<ControlCell>& controls);

struct AgreementDeltaRow {
  std::string condition = "kd";
  double alpha = 0.0;
  double width = 1.0;
  double delta_correct = 0.0, delta_incorrect = 0.0;
  double sem_correct = 0.0, sem_incorrect = 0.0;
  std::string baseline;
  std::vector<double> per_seed_delta_correct, per_seed_delta_incorrect;
};

struct PerTeacherReport {
  uint64_t teacher_seed = 0;
  std::vector<MetricSamples> cells;
  std::string best_control;
  std::vector<AgreementDeltaRow> deltas;
  std::vector<SignificanceRow> significance;
};

struct MatrixResult {
  RunManifest manifest;
  std::vector<PerTeacherReport> per_teacher;
  int failed_jobs = 0;
};

// Trains teachers then every student condition from the teacher's init,
// dumps logits of every model on the shared evaluation set, and emits
// per-condition metric CSVs, aggregates, significance tables and
// agreement-split deltas against the best control. Failed jobs are recorded
// and skipped; the matrix continues.
MatrixResult run_matrix(const ExperimentConfig& cfg, const std::filesystem::path& outdir,
                        int jobs = 1);

// ----------------------------------------------------------- adversarial

struct AdversarialCounts {
  int64_t tha = 0;
  int64_t the = 0;
};

// Generates gen_chars characters from fixed seeded clean-corpus prompts and
// counts whole-word "tha"/"the" occurrences in the completion text.
AdversarialCounts adversarial_eval(const ModelCheckpoint& ckpt, const CharCorpus& clean_corpus,
                                   int64_t gen_chars, int64_t streams, int64_t prompt_len,
                                   double temperature, uint64_t seed);

struct AdversarialRow {
  std::string id;
  std::string condition;
  double alpha = 0.0;
  uint64_t student_seed = 0;
  double temperature = 1.0;
  AdversarialCounts counts;
};

struct AdversarialResult {
  MatrixResult matrix;
  std::vector<AdversarialRow> rows;  // sampled at gen_temperature and greedy
};

// Full workflow bound to the adversarial experiment: runs the matrix with
// dataset.adversarial_teacher enabled, then evaluates every model's
// completion counts at the configured temperature and greedily.
AdversarialResult run_adversarial(const ExperimentConfig& cfg,
                                  const std::filesystem::path& outdir, int jobs = 1);

// ----------------------------------------------------------- width sweep

struct WidthSweepResult {
  RunManifest manifest;
  std::vector<AgreementDeltaRow> deltas;  // one row per (width, alpha)
  int failed_jobs = 0;
};

// Fixed-step-budget sweep over cfg.width_fractions at each alpha: KD
// students plus width-matched controls; width 1.0 students start from the
// teacher's own init (the self-distillation cell), smaller widths from a
// shared fresh init per width. Uses the first teacher seed.
WidthSweepResult width_sweep(const ExperimentConfig& cfg, const std::filesystem::path& outdir,
                             int jobs = 1);

// ------------------------------------------------------ one-off training

// Dataset-aware init (GPT vocab comes from the configured corpus).
ModelCheckpoint init_for_config(const ExperimentConfig& cfg, uint64_t seed);

// Trains a single model under `cond`; on_teacher_corpus selects the
// (possibly adversarial) teacher-side corpus for char datasets.
ModelCheckpoint train_one_model(const ExperimentConfig& cfg, const Condition& cond,
                                const ModelCheckpoint* teacher, const ModelCheckpoint& init,
                                bool on_teacher_corpus);

// Logits/labels on the shared evaluation set defined by the config.
LogitsMatrix eval_model(const ExperimentConfig& cfg, const ModelCheckpoint& ckpt);
std::vector<int32_t> eval_labels_for(const ExperimentConfig& cfg);

// ------------------------------------------------------------- utilities

// Recomputes every report CSV of an existing run directory (manifest is
// hash-verified first) into out_dir.
void rebuild_reports(const std::filesystem::path& runs_dir,
                     const std::filesystem::path& out_dir);

// Progress lines on stderr as jobs finish (off by default).
void set_harness_logging(bool enabled);

// Resolves the corpus: explicit path, then the DISTILL_AUDIT_CACHE download
// cache, then a download from cfg.corpus_url into the cache.
CharCorpus resolve_corpus(const ExperimentConfig& cfg);

// Downloads a URL to a file (http, and https when built with TLS support).
void fetch_url(const std::string& url, const std::filesystem::path& dest);

}  // namespace kdaudit
