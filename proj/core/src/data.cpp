#include "kdaudit/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "kdaudit/error.hpp"
#include "kdaudit/util.hpp"

namespace kdaudit {

namespace {

// Minimal UTF-8 decoder; throws on malformed input.
std::vector<char32_t> decode_utf8(std::string_view text) {
  std::vector<char32_t> out;
  out.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    const auto b0 = static_cast<unsigned char>(text[i]);
    char32_t cp = 0;
    int extra = 0;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6) {
      cp = b0 & 0x1f;
      extra = 1;
    } else if ((b0 >> 4) == 0xe) {
      cp = b0 & 0x0f;
      extra = 2;
    } else if ((b0 >> 3) == 0x1e) {
      cp = b0 & 0x07;
      extra = 3;
    } else {
      throw std::invalid_argument("corpus is not valid UTF-8");
    }
    if (i + extra >= text.size()) throw std::invalid_argument("corpus is not valid UTF-8");
    for (int k = 1; k <= extra; ++k) {
      const auto b = static_cast<unsigned char>(text[i + k]);
      if ((b >> 6) != 0x2) throw std::invalid_argument("corpus is not valid UTF-8");
      cp = (cp << 6) | (b & 0x3f);
    }
    out.push_back(cp);
    i += 1 + extra;
  }
  return out;
}

}  // namespace

std::string CharCorpus::decode(std::span<const int32_t> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    if (id < 0 || id >= vocab_size())
      throw std::invalid_argument("decode: token id outside vocabulary");
    const char32_t cp = vocab[static_cast<size_t>(id)];
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
      out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
  }
  return out;
}

CharCorpus corpus_from_text(std::string text) {
  if (text.empty()) throw std::invalid_argument("corpus text is empty");
  CharCorpus corpus;
  corpus.content_hash = fnv1a64(text.data(), text.size());
  corpus.text = std::move(text);
  const auto codepoints = decode_utf8(corpus.text);
  std::set<char32_t> uniq(codepoints.begin(), codepoints.end());
  corpus.vocab.assign(uniq.begin(), uniq.end());
  corpus.tokens.reserve(codepoints.size());
  for (char32_t cp : codepoints) {
    const auto it = std::lower_bound(corpus.vocab.begin(), corpus.vocab.end(), cp);
    corpus.tokens.push_back(static_cast<int32_t>(it - corpus.vocab.begin()));
  }
  corpus.train_boundary =
      static_cast<int64_t>(std::floor(0.9 * double(corpus.tokens.size())));
  return corpus;
}

CharCorpus load_char_corpus(const std::filesystem::path& path) {
  CharCorpus corpus = corpus_from_text(read_text_file(path));
  corpus.source_path = path;
  return corpus;
}

std::string adversarial_transform(std::string_view text, bool word_boundary) {
  const auto is_letter = [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
  };
  std::string out;
  out.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    if (i + 3 <= text.size() && text[i] == 't' && text[i + 1] == 'h' && text[i + 2] == 'e') {
      bool match = true;
      if (word_boundary) {
        const bool left_ok = i == 0 || !is_letter(text[i - 1]);
        const bool right_ok = i + 3 == text.size() || !is_letter(text[i + 3]);
        match = left_ok && right_ok;
      }
      if (match) {
        out += "tha";
        i += 3;
        continue;
      }
    }
    out.push_back(text[i]);
    ++i;
  }
  return out;
}

std::map<char32_t, double> char_frequencies(const CharCorpus& corpus) {
  std::map<char32_t, double> freq;
  for (int32_t id : corpus.tokens) freq[corpus.vocab[static_cast<size_t>(id)]] += 1.0;
  const double n = double(corpus.tokens.size());
  for (auto& [cp, count] : freq) count /= n;
  return freq;
}

// -------------------------------------------------------------- blobs

void BlobConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("blobs: need K >= 2 classes");
  if (dims < 2) throw std::invalid_argument("blobs: need D >= 2 dimensions");
  if (n < classes) throw std::invalid_argument("blobs: need at least one point per class");
  if (noise_rate < 0.0 || noise_rate >= 0.5)
    throw std::invalid_argument("blobs: noise rate must be in [0, 0.5)");
  if (separation <= 0.0) throw std::invalid_argument("blobs: separation must be positive");
}

BlobDataset make_blobs(const BlobConfig& cfg, uint64_t seed) {
  cfg.validate();
  // Centers: standard normal draws rescaled so the closest pair sits at
  // cfg.separation (points get unit-variance noise).
  RngStream center_rng(derive_seed(cfg.center_seed, "blob_centers", 0));
  std::vector<double> centers(static_cast<size_t>(cfg.classes * cfg.dims));
  for (auto& c : centers) c = center_rng.normal();
  double min_dist2 = std::numeric_limits<double>::infinity();
  for (int64_t a = 0; a < cfg.classes; ++a)
    for (int64_t b = a + 1; b < cfg.classes; ++b) {
      double d2 = 0.0;
      for (int64_t k = 0; k < cfg.dims; ++k) {
        const double diff =
            centers[a * cfg.dims + k] - centers[b * cfg.dims + k];
        d2 += diff * diff;
      }
      min_dist2 = std::min(min_dist2, d2);
    }
  const double rescale = cfg.separation / std::sqrt(min_dist2);
  for (auto& c : centers) c *= rescale;

  BlobDataset ds;
  ds.classes = cfg.classes;
  ds.noise_rate = cfg.noise_rate;
  ds.seed = seed;
  ds.points = Tensor<float>({cfg.n, cfg.dims});
  ds.clean_labels.resize(static_cast<size_t>(cfg.n));

  RngStream point_rng(derive_seed(seed, "blob_points", 0));
  for (int64_t i = 0; i < cfg.n; ++i) {
    const auto label = static_cast<int32_t>(point_rng.uniform_below(uint64_t(cfg.classes)));
    ds.clean_labels[static_cast<size_t>(i)] = label;
    for (int64_t k = 0; k < cfg.dims; ++k)
      ds.points.data[static_cast<size_t>(i * cfg.dims + k)] =
          static_cast<float>(centers[label * cfg.dims + k] + point_rng.normal());
  }
  ds.labels = ds.clean_labels;

  const auto flips = static_cast<int64_t>(std::ceil(cfg.noise_rate * double(cfg.n)));
  if (flips > 0) {
    RngStream flip_rng(derive_seed(seed, "blob_flips", 0));
    std::vector<int64_t> idx(static_cast<size_t>(cfg.n));
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(idx, flip_rng);
    for (int64_t f = 0; f < flips; ++f) {
      const int64_t i = idx[static_cast<size_t>(f)];
      const int32_t old = ds.labels[static_cast<size_t>(i)];
      const auto shift =
          static_cast<int32_t>(1 + flip_rng.uniform_below(uint64_t(cfg.classes - 1)));
      ds.labels[static_cast<size_t>(i)] = static_cast<int32_t>((old + shift) % cfg.classes);
    }
  }
  ds.content_hash = fnv1a64(ds.points.data.data(), ds.points.data.size() * sizeof(float),
                            fnv1a64(ds.labels.data(), ds.labels.size() * sizeof(int32_t)));
  return ds;
}

// -------------------------------------------------------- batch ordering

std::vector<std::vector<int64_t>> batch_order(int64_t n_examples, int64_t batch_size,
                                              int64_t epochs, uint64_t data_seed) {
  if (batch_size < 1 || batch_size > n_examples)
    throw std::invalid_argument("batch_order: batch size must be in [1, n]");
  std::vector<std::vector<int64_t>> batches;
  std::vector<int64_t> perm(static_cast<size_t>(n_examples));
  for (int64_t e = 0; e < epochs; ++e) {
    std::iota(perm.begin(), perm.end(), 0);
    RngStream rng(derive_seed(data_seed, "epoch_order", static_cast<uint64_t>(e)));
    shuffle(perm, rng);
    for (int64_t start = 0; start < n_examples; start += batch_size) {
      const int64_t end = std::min(start + batch_size, n_examples);
      batches.emplace_back(perm.begin() + start, perm.begin() + end);
    }
  }
  return batches;
}

}  // namespace kdaudit
