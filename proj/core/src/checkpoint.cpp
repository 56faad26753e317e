#include "kdaudit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "kdaudit/error.hpp"
#include "kdaudit/ops.hpp"
#include "kdaudit/util.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swapping");

namespace kdaudit {

using nlohmann::json;

std::string to_string(ModelKind kind) { return kind == ModelKind::Mlp ? "mlp" : "gpt"; }

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "mlp") return ModelKind::Mlp;
  if (s == "gpt") return ModelKind::Gpt;
  throw std::invalid_argument("unknown model kind: " + s);
}

ModelCheckpoint init_model(const MlpConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelCheckpoint ckpt;
  ckpt.kind = ModelKind::Mlp;
  ckpt.mlp = cfg;
  ckpt.init_seed = seed;
  ckpt.params = mlp_param_shapes<float>(cfg);
  init_params(ckpt.params, seed);
  return ckpt;
}

ModelCheckpoint init_model(const GptConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelCheckpoint ckpt;
  ckpt.kind = ModelKind::Gpt;
  ckpt.gpt = cfg;
  ckpt.init_seed = seed;
  ckpt.params = gpt_param_shapes<float>(cfg);
  init_params(ckpt.params, seed);
  return ckpt;
}

namespace {

json config_to_json(const ModelCheckpoint& ckpt) {
  if (ckpt.kind == ModelKind::Mlp) {
    return json{{"input_dim", ckpt.mlp.input_dim},
                {"hidden", ckpt.mlp.hidden},
                {"classes", ckpt.mlp.classes}};
  }
  return json{{"vocab", ckpt.gpt.vocab},         {"embed_dim", ckpt.gpt.embed_dim},
              {"layers", ckpt.gpt.layers},       {"heads", ckpt.gpt.heads},
              {"block_size", ckpt.gpt.block_size}, {"dropout", ckpt.gpt.dropout},
              {"width_fraction", ckpt.gpt.width_fraction}};
}

void config_from_json(const json& j, ModelCheckpoint& ckpt) {
  if (ckpt.kind == ModelKind::Mlp) {
    ckpt.mlp.input_dim = j.at("input_dim").get<int64_t>();
    ckpt.mlp.hidden = j.at("hidden").get<std::vector<int64_t>>();
    ckpt.mlp.classes = j.at("classes").get<int64_t>();
  } else {
    ckpt.gpt.vocab = j.at("vocab").get<int64_t>();
    ckpt.gpt.embed_dim = j.at("embed_dim").get<int64_t>();
    ckpt.gpt.layers = j.at("layers").get<int64_t>();
    ckpt.gpt.heads = j.at("heads").get<int64_t>();
    ckpt.gpt.block_size = j.at("block_size").get<int64_t>();
    ckpt.gpt.dropout = j.at("dropout").get<double>();
    ckpt.gpt.width_fraction = j.at("width_fraction").get<double>();
  }
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json tensors = json::array();
  int64_t offset = 0;
  for (size_t i = 0; i < ckpt.params.names.size(); ++i) {
    const auto& t = ckpt.params.tensors[i];
    const int64_t bytes = t.numel() * static_cast<int64_t>(sizeof(float));
    tensors.push_back(json{{"name", ckpt.params.names[i]},
                           {"shape", t.shape},
                           {"offset", offset},
                           {"length", bytes}});
    offset += bytes;
  }
  const auto& p = ckpt.provenance;
  json manifest{
      {"format_version", 1},
      {"kind", to_string(ckpt.kind)},
      {"config", config_to_json(ckpt)},
      {"init_seed", ckpt.init_seed},
      {"provenance",
       {{"condition", p.condition},
        {"alpha", p.alpha},
        {"temperature", p.temperature},
        {"data_seed", p.data_seed},
        {"steps", p.steps},
        {"train_loss", p.train_loss},
        {"train_accuracy", p.train_accuracy},
        {"test_loss", p.test_loss},
        {"test_accuracy", p.test_accuracy},
        {"dataset_hash", p.dataset_hash},
        {"teacher", p.teacher}}},
      {"tensors", tensors}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "weights.bin").string());
  for (const auto& t : ckpt.params.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + (dir / "weights.bin").string());
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  json manifest = json::parse(read_text_file(dir / "manifest.json"));
  ModelCheckpoint ckpt;
  ckpt.kind = model_kind_from_string(manifest.at("kind").get<std::string>());
  config_from_json(manifest.at("config"), ckpt);
  ckpt.init_seed = manifest.at("init_seed").get<uint64_t>();
  const json& p = manifest.at("provenance");
  ckpt.provenance.condition = p.at("condition").get<std::string>();
  ckpt.provenance.alpha = p.at("alpha").get<double>();
  ckpt.provenance.temperature = p.at("temperature").get<double>();
  ckpt.provenance.data_seed = p.at("data_seed").get<uint64_t>();
  ckpt.provenance.steps = p.at("steps").get<int64_t>();
  ckpt.provenance.train_loss = p.at("train_loss").get<double>();
  ckpt.provenance.train_accuracy = p.at("train_accuracy").get<double>();
  ckpt.provenance.test_loss = p.at("test_loss").get<double>();
  ckpt.provenance.test_accuracy = p.at("test_accuracy").get<double>();
  ckpt.provenance.dataset_hash = p.at("dataset_hash").get<uint64_t>();
  ckpt.provenance.teacher = p.at("teacher").get<std::string>();

  ParamSet<float> expected = ckpt.kind == ModelKind::Mlp
                                 ? mlp_param_shapes<float>(ckpt.mlp)
                                 : gpt_param_shapes<float>(ckpt.gpt);
  auto bytes = read_binary_file(dir / "weights.bin");
  int64_t offset = 0;
  const json& tensors = manifest.at("tensors");
  if (tensors.size() != expected.names.size())
    throw std::invalid_argument("checkpoint: tensor count does not match config");
  for (size_t i = 0; i < expected.names.size(); ++i) {
    const json& tj = tensors.at(i);
    if (tj.at("name").get<std::string>() != expected.names[i])
      throw std::invalid_argument("checkpoint: unexpected tensor " +
                                  tj.at("name").get<std::string>());
    const auto shape = tj.at("shape").get<std::vector<int64_t>>();
    if (!same_shape(shape, expected.tensors[i].shape))
      throw std::invalid_argument("checkpoint: shape mismatch for " + expected.names[i]);
    const int64_t length = tj.at("length").get<int64_t>();
    if (tj.at("offset").get<int64_t>() != offset ||
        length != expected.tensors[i].numel() * static_cast<int64_t>(sizeof(float)))
      throw std::invalid_argument("checkpoint: bad tensor extent for " + expected.names[i]);
    if (offset + length > static_cast<int64_t>(bytes.size()))
      throw std::invalid_argument("checkpoint: weights.bin is truncated");
    std::memcpy(expected.tensors[i].data.data(), bytes.data() + offset,
                static_cast<size_t>(length));
    offset += length;
  }
  if (offset != static_cast<int64_t>(bytes.size()))
    throw std::invalid_argument("checkpoint: weights.bin has trailing bytes");
  ckpt.params = std::move(expected);
  return ckpt;
}

// ------------------------------------------------------------- inference

Tensor<float> mlp_eval_logits(const ModelCheckpoint& ckpt, const Tensor<float>& inputs) {
  if (ckpt.kind != ModelKind::Mlp) throw std::invalid_argument("expected an MLP checkpoint");
  GraphContext<float> ctx;
  ctx.grad_enabled = false;
  auto& params = const_cast<ParamSet<float>&>(ckpt.params);
  auto bp = BoundParams<float>::bind(ctx, params, false);
  Node<float>* in = leaf(ctx, const_cast<Tensor<float>&>(inputs), false);
  Node<float>* logits = mlp_forward(ctx, bp, ckpt.mlp, in);
  Tensor<float> out(logits->shape);
  std::copy(logits->value, logits->value + logits->n, out.data.begin());
  return out;
}

Tensor<float> gpt_eval_logits(const ModelCheckpoint& ckpt, std::span<const int32_t> ids,
                              int64_t batch, int64_t seq) {
  if (ckpt.kind != ModelKind::Gpt) throw std::invalid_argument("expected a GPT checkpoint");
  GraphContext<float> ctx;
  ctx.grad_enabled = false;
  auto& params = const_cast<ParamSet<float>&>(ckpt.params);
  auto bp = BoundParams<float>::bind(ctx, params, false);
  Node<float>* logits = gpt_forward(ctx, bp, ckpt.gpt, ids, batch, seq);
  Tensor<float> out(logits->shape);
  std::copy(logits->value, logits->value + logits->n, out.data.begin());
  return out;
}

std::vector<std::vector<int32_t>> gpt_generate_batched(
    const ModelCheckpoint& ckpt, const std::vector<std::vector<int32_t>>& prompts,
    int64_t length, double temperature, uint64_t seed) {
  if (ckpt.kind != ModelKind::Gpt) throw std::invalid_argument("expected a GPT checkpoint");
  if (prompts.empty()) throw std::invalid_argument("generate: need at least one prompt");
  if (length < 1) throw std::invalid_argument("generate: length must be >= 1");
  if (temperature < 0.0) throw std::invalid_argument("generate: negative temperature");
  const int64_t nstreams = static_cast<int64_t>(prompts.size());
  const size_t prompt_len = prompts.front().size();
  if (prompt_len == 0) throw std::invalid_argument("generate: empty prompt");
  for (const auto& p : prompts) {
    if (p.size() != prompt_len)
      throw std::invalid_argument("generate: prompts must share one length");
    if (static_cast<int64_t>(p.size()) > ckpt.gpt.block_size)
      throw std::invalid_argument("generate: prompt longer than block size");
    for (int32_t id : p)
      if (id < 0 || id >= ckpt.gpt.vocab)
        throw std::invalid_argument("generate: prompt token outside vocab");
  }

  std::vector<std::vector<int32_t>> streams = prompts;  // grows as we sample
  std::vector<RngStream> rngs;
  rngs.reserve(static_cast<size_t>(nstreams));
  for (int64_t s = 0; s < nstreams; ++s)
    rngs.emplace_back(derive_seed(seed, "generate", static_cast<uint64_t>(s)));

  GraphContext<float> ctx;
  ctx.grad_enabled = false;
  auto& params = const_cast<ParamSet<float>&>(ckpt.params);
  const int64_t V = ckpt.gpt.vocab;
  std::vector<int32_t> window;
  std::vector<double> row(static_cast<size_t>(V));
  for (int64_t step = 0; step < length; ++step) {
    const int64_t ctx_len =
        std::min<int64_t>(static_cast<int64_t>(streams.front().size()), ckpt.gpt.block_size);
    window.resize(static_cast<size_t>(nstreams * ctx_len));
    for (int64_t s = 0; s < nstreams; ++s) {
      const auto& toks = streams[static_cast<size_t>(s)];
      std::copy(toks.end() - ctx_len, toks.end(), window.begin() + s * ctx_len);
    }
    ctx.reset();
    auto bp = BoundParams<float>::bind(ctx, params, false);
    Node<float>* logits = gpt_forward(ctx, bp, ckpt.gpt, window, nstreams, ctx_len);
    for (int64_t s = 0; s < nstreams; ++s) {
      const float* last = logits->value + ((s + 1) * ctx_len - 1) * V;
      int32_t next;
      if (V == 1) {
        next = 0;
      } else if (temperature == 0.0) {
        next = static_cast<int32_t>(argmax_tiebreak_low(std::span<const float>(last, V)));
      } else {
        for (int64_t k = 0; k < V; ++k) row[static_cast<size_t>(k)] = double(last[k]);
        const auto probs = softmax(row, temperature);
        const double u = rngs[static_cast<size_t>(s)].uniform();
        double cum = 0.0;
        next = static_cast<int32_t>(V - 1);
        for (int64_t k = 0; k < V; ++k) {
          cum += probs[static_cast<size_t>(k)];
          if (u < cum) {
            next = static_cast<int32_t>(k);
            break;
          }
        }
      }
      streams[static_cast<size_t>(s)].push_back(next);
    }
  }
  for (auto& s : streams) s.erase(s.begin(), s.begin() + static_cast<int64_t>(prompt_len));
  return streams;
}

std::vector<int32_t> gpt_generate(const ModelCheckpoint& ckpt, std::span<const int32_t> prompt,
                                  int64_t length, double temperature, uint64_t seed) {
  std::vector<std::vector<int32_t>> prompts{std::vector<int32_t>(prompt.begin(), prompt.end())};
  return gpt_generate_batched(ckpt, prompts, length, temperature, seed).front();
}

}  // namespace kdaudit
