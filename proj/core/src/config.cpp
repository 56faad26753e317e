#include "kdaudit/config.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "kdaudit/error.hpp"
#include "kdaudit/util.hpp"

namespace kdaudit {

namespace {

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

template <typename T>
std::string join_list(const std::vector<T>& values) {
  std::ostringstream out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) out << ',';
    if constexpr (std::is_same_v<T, double>)
      out << fmt6(values[i]);
    else
      out << values[i];
  }
  return out.str();
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : value) {
    if (c == ',') {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty() || !parts.empty()) parts.push_back(trim(cur));
  if (!parts.empty() && parts.back().empty()) parts.pop_back();
  return parts;
}

// Typed reader that tracks consumed keys so unknown keys can be rejected.
struct Reader {
  const ConfigDoc& doc;
  std::set<std::string> consumed;

  const std::string* find(const std::string& key) {
    const std::string* last = nullptr;
    for (const auto& [k, v] : doc.entries)
      if (k == key) last = &v;
    if (last) consumed.insert(key);
    return last;
  }
  std::string str(const std::string& key, const std::string& fallback) {
    const auto* v = find(key);
    return v ? *v : fallback;
  }
  bool boolean(const std::string& key, bool fallback) {
    const auto* v = find(key);
    if (!v) return fallback;
    if (*v == "true") return true;
    if (*v == "false") return false;
    throw std::invalid_argument("config: " + key + " must be true or false, got '" + *v + "'");
  }
  int64_t integer(const std::string& key, int64_t fallback) {
    const auto* v = find(key);
    if (!v) return fallback;
    try {
      return std::stoll(*v);
    } catch (...) {
      throw std::invalid_argument("config: " + key + " must be an integer, got '" + *v + "'");
    }
  }
  uint64_t uinteger(const std::string& key, uint64_t fallback) {
    const auto* v = find(key);
    if (!v) return fallback;
    try {
      return std::stoull(*v);
    } catch (...) {
      throw std::invalid_argument("config: " + key + " must be an integer, got '" + *v + "'");
    }
  }
  double real(const std::string& key, double fallback) {
    const auto* v = find(key);
    if (!v) return fallback;
    try {
      return std::stod(*v);
    } catch (...) {
      throw std::invalid_argument("config: " + key + " must be a number, got '" + *v + "'");
    }
  }
  template <typename T, typename Parse>
  std::vector<T> list(const std::string& key, std::vector<T> fallback, Parse parse) {
    const auto* v = find(key);
    if (!v) return fallback;
    std::vector<T> out;
    for (const auto& part : split_list(*v)) out.push_back(parse(part));
    return out;
  }
};

}  // namespace

void ExperimentConfig::validate() const {
  std::set<uint64_t> teachers(teacher_seeds.begin(), teacher_seeds.end());
  for (uint64_t s : student_seeds)
    if (teachers.count(s))
      throw std::invalid_argument("config: teacher and student seed lists must be disjoint");
  if (teacher_seeds.empty() || student_seeds.empty())
    throw std::invalid_argument("config: need at least one teacher and one student seed");
  for (double a : alphas)
    if (a < 0.0 || a > 1.0) throw std::invalid_argument("config: alphas must be in [0,1]");
  if (conditions.empty()) throw std::invalid_argument("config: no conditions selected");
  if (dataset_kind != "blobs" && dataset_kind != "char")
    throw std::invalid_argument("config: dataset.kind must be blobs or char");
  if (model_kind != "mlp" && model_kind != "gpt")
    throw std::invalid_argument("config: model.kind must be mlp or gpt");
  if (dataset_kind == "char" && model_kind != "gpt")
    throw std::invalid_argument("config: char datasets require the gpt model");
  if (dataset_kind == "blobs" && model_kind != "mlp")
    throw std::invalid_argument("config: blob datasets require the mlp model");
  if (!(temperature > 0.0)) throw std::invalid_argument("config: temperature must be > 0");
  const bool has_feature_kd =
      std::find(conditions.begin(), conditions.end(), Condition::Kind::FeatureKD) !=
      conditions.end();
  if (has_feature_kd && feature_block < 0)
    throw std::invalid_argument("config: feature_kd condition needs experiment.feature_block");
  if (train.steps < 1 || train.batch_size < 1)
    throw std::invalid_argument("config: train.steps and train.batch_size must be >= 1");
  for (double w : width_fractions)
    if (w <= 0.0 || w > 1.0)
      throw std::invalid_argument("config: width fractions must be in (0,1]");
  if (gen_streams < 1 || gen_chars < gen_streams)
    throw std::invalid_argument("config: eval.gen_chars must be >= eval.gen_streams >= 1");
}

ConfigDoc ConfigDoc::parse(std::string_view text) {
  ConfigDoc doc;
  size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string trimmed = trim(line);
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value");
    doc.entries.emplace_back(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
  }
  return doc;
}

ConfigDoc ConfigDoc::load(const std::filesystem::path& path) {
  return parse(read_text_file(path));
}

std::string ConfigDoc::print() const {
  std::ostringstream out;
  for (const auto& [k, v] : entries) out << k << " = " << v << '\n';
  return out.str();
}

void ConfigDoc::set(const std::string& key, const std::string& value) {
  static const ConfigDoc schema = doc_from_config(ExperimentConfig{});
  const bool known = std::any_of(schema.entries.begin(), schema.entries.end(),
                                 [&](const auto& e) { return e.first == key; });
  if (!known) throw std::invalid_argument("config: unknown key '" + key + "'");
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries.emplace_back(key, value);
}

ConfigDoc doc_from_config(const ExperimentConfig& c) {
  ConfigDoc doc;
  auto put = [&](const std::string& k, const std::string& v) { doc.entries.emplace_back(k, v); };
  put("experiment.seed", std::to_string(c.experiment_seed));
  put("experiment.teacher_seeds", join_list(c.teacher_seeds));
  put("experiment.student_seeds", join_list(c.student_seeds));
  put("experiment.alphas", join_list(c.alphas));
  {
    std::vector<std::string> names;
    for (auto k : c.conditions) names.push_back(to_string(k));
    put("experiment.conditions", join_list(names));
  }
  put("experiment.temperature", fmt6(c.temperature));
  put("experiment.kl_t_squared", c.kl_t_squared ? "true" : "false");
  put("experiment.rcd_normalize", c.rcd_normalize ? "true" : "false");
  put("experiment.rcd_fixed_per_example", c.rcd_fixed_per_example ? "true" : "false");
  put("experiment.feature_block", std::to_string(c.feature_block));
  put("dataset.kind", c.dataset_kind);
  put("dataset.corpus_path", c.corpus_path);
  put("dataset.corpus_url", c.corpus_url);
  put("dataset.adversarial_teacher", c.adversarial_teacher ? "true" : "false");
  put("dataset.adversarial_word_boundary", c.adversarial_word_boundary ? "true" : "false");
  put("dataset.blobs.n_train", std::to_string(c.blobs_n_train));
  put("dataset.blobs.n_test", std::to_string(c.blobs_n_test));
  put("dataset.blobs.dims", std::to_string(c.blobs_dims));
  put("dataset.blobs.classes", std::to_string(c.blobs_classes));
  put("dataset.blobs.noise_rate", fmt6(c.blobs_noise_rate));
  put("dataset.blobs.separation", fmt6(c.blobs_separation));
  put("dataset.blobs.center_seed", std::to_string(c.blobs_center_seed));
  put("dataset.blobs.train_seed", std::to_string(c.blobs_train_seed));
  put("dataset.blobs.test_seed", std::to_string(c.blobs_test_seed));
  put("model.kind", c.model_kind);
  put("model.mlp.hidden", join_list(c.mlp_hidden));
  put("model.gpt.embed_dim", std::to_string(c.gpt.embed_dim));
  put("model.gpt.layers", std::to_string(c.gpt.layers));
  put("model.gpt.heads", std::to_string(c.gpt.heads));
  put("model.gpt.block_size", std::to_string(c.gpt.block_size));
  put("model.gpt.dropout", fmt6(c.gpt.dropout));
  put("model.gpt.width_fraction", fmt6(c.gpt.width_fraction));
  put("train.steps", std::to_string(c.train.steps));
  put("train.batch_size", std::to_string(c.train.batch_size));
  put("train.optimizer", c.train.optimizer == OptimizerKind::Adam ? "adam" : "sgd");
  put("train.lr", fmt6(c.train.lr));
  put("train.eval_blocks", std::to_string(c.train.eval_blocks));
  put("train.eval_seed", std::to_string(c.train.eval_seed));
  put("eval.gen_chars", std::to_string(c.gen_chars));
  put("eval.gen_streams", std::to_string(c.gen_streams));
  put("eval.gen_prompt_len", std::to_string(c.gen_prompt_len));
  put("eval.gen_temperature", fmt6(c.gen_temperature));
  put("eval.gen_seed", std::to_string(c.gen_seed));
  put("sweep.width_fractions", join_list(c.width_fractions));
  return doc;
}

ExperimentConfig config_from_doc(const ConfigDoc& doc) {
  ExperimentConfig c;
  Reader r{doc, {}};
  c.experiment_seed = r.uinteger("experiment.seed", c.experiment_seed);
  c.teacher_seeds = r.list<uint64_t>("experiment.teacher_seeds", c.teacher_seeds,
                                     [](const std::string& s) { return std::stoull(s); });
  c.student_seeds = r.list<uint64_t>("experiment.student_seeds", c.student_seeds,
                                     [](const std::string& s) { return std::stoull(s); });
  c.alphas = r.list<double>("experiment.alphas", c.alphas,
                            [](const std::string& s) { return std::stod(s); });
  c.conditions = r.list<Condition::Kind>(
      "experiment.conditions", c.conditions,
      [](const std::string& s) { return condition_kind_from_string(s); });
  c.temperature = r.real("experiment.temperature", c.temperature);
  c.kl_t_squared = r.boolean("experiment.kl_t_squared", c.kl_t_squared);
  c.rcd_normalize = r.boolean("experiment.rcd_normalize", c.rcd_normalize);
  c.rcd_fixed_per_example = r.boolean("experiment.rcd_fixed_per_example", c.rcd_fixed_per_example);
  c.feature_block = static_cast<int>(r.integer("experiment.feature_block", c.feature_block));
  c.dataset_kind = r.str("dataset.kind", c.dataset_kind);
  c.corpus_path = r.str("dataset.corpus_path", c.corpus_path);
  c.corpus_url = r.str("dataset.corpus_url", c.corpus_url);
  c.adversarial_teacher = r.boolean("dataset.adversarial_teacher", c.adversarial_teacher);
  c.adversarial_word_boundary =
      r.boolean("dataset.adversarial_word_boundary", c.adversarial_word_boundary);
  c.blobs_n_train = r.integer("dataset.blobs.n_train", c.blobs_n_train);
  c.blobs_n_test = r.integer("dataset.blobs.n_test", c.blobs_n_test);
  c.blobs_dims = r.integer("dataset.blobs.dims", c.blobs_dims);
  c.blobs_classes = r.integer("dataset.blobs.classes", c.blobs_classes);
  c.blobs_noise_rate = r.real("dataset.blobs.noise_rate", c.blobs_noise_rate);
  c.blobs_separation = r.real("dataset.blobs.separation", c.blobs_separation);
  c.blobs_center_seed = r.uinteger("dataset.blobs.center_seed", c.blobs_center_seed);
  c.blobs_train_seed = r.uinteger("dataset.blobs.train_seed", c.blobs_train_seed);
  c.blobs_test_seed = r.uinteger("dataset.blobs.test_seed", c.blobs_test_seed);
  c.model_kind = r.str("model.kind", c.model_kind);
  c.mlp_hidden = r.list<int64_t>("model.mlp.hidden", c.mlp_hidden,
                                 [](const std::string& s) { return std::stoll(s); });
  c.gpt.embed_dim = r.integer("model.gpt.embed_dim", c.gpt.embed_dim);
  c.gpt.layers = r.integer("model.gpt.layers", c.gpt.layers);
  c.gpt.heads = r.integer("model.gpt.heads", c.gpt.heads);
  c.gpt.block_size = r.integer("model.gpt.block_size", c.gpt.block_size);
  c.gpt.dropout = r.real("model.gpt.dropout", c.gpt.dropout);
  c.gpt.width_fraction = r.real("model.gpt.width_fraction", c.gpt.width_fraction);
  c.train.steps = r.integer("train.steps", c.train.steps);
  c.train.batch_size = r.integer("train.batch_size", c.train.batch_size);
  {
    const std::string opt = r.str("train.optimizer", "adam");
    if (opt == "adam")
      c.train.optimizer = OptimizerKind::Adam;
    else if (opt == "sgd")
      c.train.optimizer = OptimizerKind::Sgd;
    else
      throw std::invalid_argument("config: train.optimizer must be adam or sgd");
  }
  c.train.lr = r.real("train.lr", c.train.lr);
  c.train.eval_blocks = r.integer("train.eval_blocks", c.train.eval_blocks);
  c.train.eval_seed = r.uinteger("train.eval_seed", c.train.eval_seed);
  c.gen_chars = r.integer("eval.gen_chars", c.gen_chars);
  c.gen_streams = r.integer("eval.gen_streams", c.gen_streams);
  c.gen_prompt_len = r.integer("eval.gen_prompt_len", c.gen_prompt_len);
  c.gen_temperature = r.real("eval.gen_temperature", c.gen_temperature);
  c.gen_seed = r.uinteger("eval.gen_seed", c.gen_seed);
  c.width_fractions = r.list<double>("sweep.width_fractions", c.width_fractions,
                                     [](const std::string& s) { return std::stod(s); });
  for (const auto& [k, v] : doc.entries)
    if (!r.consumed.count(k)) throw std::invalid_argument("config: unknown key '" + k + "'");
  c.validate();
  return c;
}

ExperimentConfig preset_config(const std::string& name) {
  ExperimentConfig c;
  if (name == "blobs-mlp") {
    c.dataset_kind = "blobs";
    c.model_kind = "mlp";
    c.mlp_hidden = {64, 64};
    c.train.steps = 3000;
    c.train.batch_size = 64;
    c.train.lr = 1e-3;
    return c;
  }
  if (name == "desk-gpt" || name == "paper-gpt" || name == "pico-gpt") {
    c.dataset_kind = "char";
    c.model_kind = "gpt";
    c.corpus_path = "data/tinyshakespeare.txt";
    if (name == "desk-gpt") {
      c.gpt = GptConfig{.vocab = 65, .embed_dim = 128, .layers = 4, .heads = 4,
                        .block_size = 128, .dropout = 0.1, .width_fraction = 1.0};
      c.train.steps = 2000;
      c.train.batch_size = 32;
      c.train.lr = 3e-4;
    } else {
      c.gpt = GptConfig{.vocab = 65, .embed_dim = name == "pico-gpt" ? 192 : 384,
                        .layers = 6, .heads = 6, .block_size = 256, .dropout = 0.2,
                        .width_fraction = 1.0};
      c.train.steps = 5000;
      c.train.batch_size = 64;
      c.train.lr = 3e-4;
    }
    return c;
  }
  throw std::invalid_argument("unknown preset '" + name + "' (expected one of " +
                              join_list(preset_names()) + ")");
}

std::vector<std::string> preset_names() {
  return {"blobs-mlp", "desk-gpt", "paper-gpt", "pico-gpt"};
}

}  // namespace kdaudit
