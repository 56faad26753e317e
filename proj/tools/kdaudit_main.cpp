// kdaudit CLI: trains teachers/students, computes functional-similarity
// metrics, runs the full experiment matrix, the adversarial-transfer
// evaluation, and the width-scaling sweep.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>

#include "kdaudit/checkpoint.hpp"
#include "kdaudit/config.hpp"
#include "kdaudit/data.hpp"
#include "kdaudit/error.hpp"
#include "kdaudit/funcsim.hpp"
#include "kdaudit/harness.hpp"
#include "kdaudit/util.hpp"

namespace fs = std::filesystem;
using namespace kdaudit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct CommonOpts {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;
  bool verbose = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "configuration file (key = value lines)");
  cmd->add_option("--preset", opts.preset,
                  "configuration preset: blobs-mlp, desk-gpt, paper-gpt, pico-gpt");
  cmd->add_option("--set", opts.overrides, "override a config key, e.g. --set train.steps=100");
  cmd->add_flag("--verbose", opts.verbose, "progress lines on stderr");
}

ExperimentConfig resolve_config(const CommonOpts& opts) {
  ConfigDoc doc = opts.preset.empty() ? doc_from_config(ExperimentConfig{})
                                      : doc_from_config(preset_config(opts.preset));
  if (!opts.config_path.empty()) {
    const ConfigDoc file = ConfigDoc::load(opts.config_path);
    for (const auto& [k, v] : file.entries) doc.set(k, v);
  }
  for (const auto& kv : opts.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    doc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.verbose) set_harness_logging(true);
  return config_from_doc(doc);
}

int usage_error(const std::exception& e) {
  std::cerr << "error: " << e.what() << "\n";
  return kExitUsage;
}

int runtime_error_exit(const std::exception& e) {
  std::cerr << "error: " << e.what() << "\n";
  return kExitRuntime;
}

// ------------------------------------------------------------ subcommands

int cmd_print_config(const CommonOpts& opts) {
  ConfigDoc doc;
  try {
    doc = opts.preset.empty() ? doc_from_config(ExperimentConfig{})
                              : doc_from_config(preset_config(opts.preset));
  } catch (const std::exception& e) {
    return usage_error(e);
  }
  std::cout << doc.print();
  return kExitOk;
}

int cmd_fetch_corpus(const std::string& url, const std::string& out) {
  try {
    fs::path dest;
    if (!out.empty()) {
      dest = out;
    } else {
      const char* cache = std::getenv("DISTILL_AUDIT_CACHE");
      if (cache == nullptr || *cache == '\0')
        throw std::invalid_argument("--out not given and DISTILL_AUDIT_CACHE is unset");
      fs::create_directories(cache);
      dest = fs::path(cache) / "tinyshakespeare.txt";
    }
    fetch_url(url, dest);
    std::cout << "saved " << dest.string() << " hash " << std::hex << hash_file(dest) << "\n";
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    return usage_error(e);
  } catch (const std::exception& e) {
    return runtime_error_exit(e);
  }
}

int cmd_train_teacher(const CommonOpts& opts, uint64_t seed, const std::string& out) {
  ExperimentConfig cfg;
  try {
    cfg = resolve_config(opts);
  } catch (const std::exception& e) {
    return usage_error(e);
  }
  try {
    ModelCheckpoint init = init_for_config(cfg, seed);
    Condition cond;
    cond.kind = Condition::Kind::SIDDO;
    cond.temperature = cfg.temperature;
    cond.data_seed = seed;
    ModelCheckpoint teacher = train_one_model(cfg, cond, nullptr, init, /*teacher_corpus=*/true);
    teacher.provenance.condition = "teacher";
    save_checkpoint(teacher, out);
    const auto& p = teacher.provenance;
    const std::string report = "train_loss " + fmt6(p.train_loss) + "\ntrain_accuracy " +
                               fmt6(p.train_accuracy) + "\ntest_loss " + fmt6(p.test_loss) +
                               "\ntest_accuracy " + fmt6(p.test_accuracy) + "\n";
    write_text_file(fs::path(out) / "training_report.txt", report);
    std::cout << report;
    return kExitOk;
  } catch (const std::exception& e) {
    return runtime_error_exit(e);
  }
}

int cmd_distill(const CommonOpts& opts, const std::string& teacher_dir,
                const std::string& condition, double alpha, bool alpha_given, int block,
                uint64_t seed, uint64_t init_seed, bool init_seed_given,
                const std::string& out) {
  ExperimentConfig cfg;
  Condition cond;
  ModelCheckpoint init;
  const ModelCheckpoint* teacher_ptr = nullptr;
  ModelCheckpoint teacher;
  try {
    cfg = resolve_config(opts);
    cond.kind = condition_kind_from_string(condition);
    if (cond.kind == Condition::Kind::SIDDO && alpha_given)
      throw std::invalid_argument("alpha is invalid for siddo (fixed at 0)");
    cond.alpha = cond.kind == Condition::Kind::SIDDO ? 0.0 : alpha;
    cond.temperature = cfg.temperature;
    cond.feature_block = block >= 0 ? block : cfg.feature_block;
    cond.data_seed = seed;
    cond.kl_t_squared = cfg.kl_t_squared;
    cond.rcd_normalize = cfg.rcd_normalize;
    cond.rcd_fixed_per_example = cfg.rcd_fixed_per_example;
    cond.validate();

    const bool needs_teacher =
        cond.kind == Condition::Kind::KD || cond.kind == Condition::Kind::FeatureKD;
    if (needs_teacher && teacher_dir.empty())
      throw std::invalid_argument(condition + " requires --teacher");
    if (!teacher_dir.empty() && !needs_teacher)
      std::cerr << "warning: --teacher is ignored for condition " << condition << "\n";
    if (needs_teacher) {
      teacher = load_checkpoint(teacher_dir);
      teacher_ptr = &teacher;
      // self-distillation default: the student starts from the teacher's M_0
      if (!init_seed_given) init_seed = teacher.init_seed;
    }
    init = init_for_config(cfg, init_seed);
  } catch (const std::exception& e) {
    return usage_error(e);
  }
  try {
    ModelCheckpoint student =
        train_one_model(cfg, cond, teacher_ptr, init, /*teacher_corpus=*/false);
    if (teacher_ptr) student.provenance.teacher = teacher_dir;
    save_checkpoint(student, out);
    save_logits(eval_model(cfg, student), fs::path(out) / "logits.dlog");
    std::cout << "condition " << to_string(cond.kind) << " alpha " << fmt6(cond.alpha)
              << " test_loss " << fmt6(student.provenance.test_loss) << " test_accuracy "
              << fmt6(student.provenance.test_accuracy) << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    return runtime_error_exit(e);
  }
}

int cmd_metrics(const std::string& a_path, const std::string& b_path,
                const std::string& labels_path, const std::string& out_path) {
  try {
    const LogitsMatrix a = load_logits(a_path);
    const LogitsMatrix b = load_logits(b_path);
    const MetricRow m = all_metrics(a, b);
    std::string csv = "metric,value\n";
    csv += "activation_distance," + fmt6(m.activation_distance) + "\n";
    csv += "rank_disagreement," + fmt6(m.rank_disagreement) + "\n";
    csv += "prediction_disagreement," + fmt6(m.prediction_disagreement) + "\n";
    csv += "js_divergence," + fmt6(m.js_divergence) + "\n";
    csv += "variation_of_information," + fmt6(m.variation_of_information) + "\n";
    csv += "procrustes_distance," + fmt6(m.procrustes_distance) + "\n";
    if (!labels_path.empty()) {
      const auto labels = load_labels(labels_path);
      const AgreementSplit split =
          agreement_split(top1_predictions(b), top1_predictions(a), labels);
      csv += "agree_correct," + fmt6(split.agree_correct) + "\n";
      csv += "agree_incorrect," + fmt6(split.agree_incorrect) + "\n";
    }
    std::cout << csv;
    if (!out_path.empty()) write_text_file(out_path, csv);
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    return usage_error(e);
  } catch (const IoError& e) {
    return usage_error(e);
  } catch (const std::exception& e) {
    return runtime_error_exit(e);
  }
}

int cmd_report(const std::string& runs_dir, const std::string& out_dir) {
  try {
    rebuild_reports(runs_dir, out_dir);
    std::cout << "reports written to " << out_dir << "\n";
    return kExitOk;
  } catch (const IoError& e) {
    return usage_error(e);
  } catch (const std::invalid_argument& e) {
    return usage_error(e);
  } catch (const std::exception& e) {
    return runtime_error_exit(e);
  }
}

int cmd_run_matrix(const CommonOpts& opts, const std::string& out, int jobs) {
  ExperimentConfig cfg;
  try {
    cfg = resolve_config(opts);
  } catch (const std::exception& e) {
    return usage_error(e);
  }
  try {
    const MatrixResult result = run_matrix(cfg, out, jobs);
    std::cout << "runs " << result.manifest.runs.size() << " failed " << result.failed_jobs
              << "\n";
    return result.failed_jobs == 0 ? kExitOk : kExitRuntime;
  } catch (const std::exception& e) {
    return runtime_error_exit(e);
  }
}

int cmd_adversarial(const CommonOpts& opts, const std::string& out, int jobs) {
  ExperimentConfig cfg;
  try {
    cfg = resolve_config(opts);
  } catch (const std::exception& e) {
    return usage_error(e);
  }
  try {
    const AdversarialResult result = run_adversarial(cfg, out, jobs);
    for (const auto& row : result.rows)
      if (row.temperature != 0.0)
        std::cout << row.id << " tha " << row.counts.tha << " the " << row.counts.the << "\n";
    return result.matrix.failed_jobs == 0 ? kExitOk : kExitRuntime;
  } catch (const std::exception& e) {
    return runtime_error_exit(e);
  }
}

int cmd_sweep_width(const CommonOpts& opts, const std::string& out, int jobs) {
  ExperimentConfig cfg;
  try {
    cfg = resolve_config(opts);
  } catch (const std::exception& e) {
    return usage_error(e);
  }
  try {
    const WidthSweepResult result = width_sweep(cfg, out, jobs);
    for (const auto& row : result.deltas)
      std::cout << "width " << fmt6(row.width) << " alpha " << fmt6(row.alpha)
                << " delta_correct " << fmt6(row.delta_correct) << " delta_incorrect "
                << fmt6(row.delta_incorrect) << "\n";
    return result.failed_jobs == 0 ? kExitOk : kExitRuntime;
  } catch (const std::exception& e) {
    return runtime_error_exit(e);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kdaudit: knowledge-distillation audit toolkit"};
  app.require_subcommand(1);
  std::function<int()> action;

  // print-config
  {
    auto opts = std::make_shared<CommonOpts>();
    CLI::App* cmd = app.add_subcommand("print-config", "print the full default configuration");
    cmd->add_option("--preset", opts->preset, "start from a named preset");
    cmd->callback([&action, opts] { action = [opts] { return cmd_print_config(*opts); }; });
  }
  // fetch-corpus
  {
    auto url = std::make_shared<std::string>(ExperimentConfig{}.corpus_url);
    auto out = std::make_shared<std::string>();
    CLI::App* cmd = app.add_subcommand("fetch-corpus", "download a training corpus");
    cmd->add_option("--url", *url, "corpus URL");
    cmd->add_option("--out", *out, "destination file (default: DISTILL_AUDIT_CACHE)");
    cmd->callback([&action, url, out] {
      action = [url, out] { return cmd_fetch_corpus(*url, *out); };
    });
  }
  // train-teacher
  {
    auto opts = std::make_shared<CommonOpts>();
    auto seed = std::make_shared<uint64_t>(0);
    auto out = std::make_shared<std::string>();
    CLI::App* cmd = app.add_subcommand("train-teacher", "train a teacher model");
    add_common(cmd, *opts);
    cmd->add_option("--seed", *seed, "teacher seed (init and data order)");
    cmd->add_option("--out", *out, "output checkpoint directory")->required();
    cmd->callback([&action, opts, seed, out] {
      action = [opts, seed, out] { return cmd_train_teacher(*opts, *seed, *out); };
    });
  }
  // distill
  {
    auto opts = std::make_shared<CommonOpts>();
    auto teacher = std::make_shared<std::string>();
    auto condition = std::make_shared<std::string>("kd");
    auto alpha = std::make_shared<double>(0.5);
    auto block = std::make_shared<int>(-1);
    auto seed = std::make_shared<uint64_t>(10);
    auto init_seed = std::make_shared<uint64_t>(0);
    auto out = std::make_shared<std::string>();
    CLI::App* cmd = app.add_subcommand("distill", "train a student/control model");
    add_common(cmd, *opts);
    cmd->add_option("--teacher", *teacher, "teacher checkpoint directory (kd/feature-kd)");
    cmd->add_option("--condition", *condition, "kd | rcd | siddo | ls | feature-kd");
    CLI::Option* alpha_opt = cmd->add_option("--alpha", *alpha, "teacher weighting coefficient");
    cmd->add_option("--block", *block, "feature-kd block index");
    cmd->add_option("--seed", *seed, "student seed (data order)");
    CLI::Option* init_opt =
        cmd->add_option("--init-seed", *init_seed,
                        "init seed (defaults to the teacher's M_0 when --teacher is given)");
    cmd->add_option("--out", *out, "output checkpoint directory")->required();
    cmd->callback([&action, opts, teacher, condition, alpha, alpha_opt, block, seed, init_seed,
                   init_opt, out] {
      action = [=] {
        return cmd_distill(*opts, *teacher, *condition, *alpha, alpha_opt->count() > 0, *block,
                           *seed, *init_seed, init_opt->count() > 0, *out);
      };
    });
  }
  // metrics
  {
    auto a = std::make_shared<std::string>();
    auto b = std::make_shared<std::string>();
    auto labels = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    CLI::App* cmd = app.add_subcommand("metrics", "functional similarity of two logits files");
    cmd->add_option("--a", *a, "first logits file (reference/teacher)")->required();
    cmd->add_option("--b", *b, "second logits file (comparison/student)")->required();
    cmd->add_option("--labels", *labels, "labels file for the agreement split");
    cmd->add_option("--out", *out, "also write the CSV here");
    cmd->callback([&action, a, b, labels, out] {
      action = [=] { return cmd_metrics(*a, *b, *labels, *out); };
    });
  }
  // report
  {
    auto runs = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    CLI::App* cmd = app.add_subcommand("report", "rebuild reports from a run directory");
    cmd->add_option("--runs", *runs, "existing run directory (manifest is verified)")->required();
    cmd->add_option("--out", *out, "output directory for the CSVs")->required();
    cmd->callback([&action, runs, out] {
      action = [=] { return cmd_report(*runs, *out); };
    });
  }
  // run-matrix / adversarial / sweep-width share the same surface
  const struct {
    const char* name;
    const char* help;
    int (*fn)(const CommonOpts&, const std::string&, int);
  } matrix_cmds[] = {
      {"run-matrix", "run the full teachers x conditions x seeds matrix", cmd_run_matrix},
      {"adversarial", "run the adversarial-teacher experiment and count completions",
       cmd_adversarial},
      {"sweep-width", "run the student-width scaling sweep", cmd_sweep_width},
  };
  for (const auto& spec : matrix_cmds) {
    auto opts = std::make_shared<CommonOpts>();
    auto out = std::make_shared<std::string>();
    auto jobs = std::make_shared<int>(1);
    CLI::App* cmd = app.add_subcommand(spec.name, spec.help);
    add_common(cmd, *opts);
    cmd->add_option("--out", *out, "output run directory")->required();
    cmd->add_option("--jobs", *jobs, "parallel training jobs (does not affect outputs)");
    auto fn = spec.fn;
    cmd->callback([&action, opts, out, jobs, fn] {
      action = [=] { return fn(*opts, *out, *jobs); };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  return action ? action() : kExitUsage;
}
