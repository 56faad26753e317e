#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kdaudit/rng.hpp"
#include "kdaudit/tensor.hpp"

namespace kdaudit {

// Character-level corpus: sorted unique codepoints as the vocabulary,
// train/test split at floor(0.9 * token count).
struct CharCorpus {
  std::string text;                  // raw UTF-8
  std::vector<char32_t> vocab;       // ascending, stable
  std::vector<int32_t> tokens;       // encoded text, ids < vocab.size()
  int64_t train_boundary = 0;        // tokens[0:boundary] train, rest test
  uint64_t content_hash = 0;         // FNV-1a of the raw bytes
  std::filesystem::path source_path;

  int64_t vocab_size() const { return static_cast<int64_t>(vocab.size()); }
  std::string decode(std::span<const int32_t> ids) const;
};

CharCorpus corpus_from_text(std::string text);
CharCorpus load_char_corpus(const std::filesystem::path& path);

// Replaces every occurrence of "the" with "tha", byte-level, case-sensitive,
// single left-to-right pass. word_boundary restricts matches to whole words.
std::string adversarial_transform(std::string_view text, bool word_boundary = false);

// Frequency of each character in the corpus text (over raw bytes decoded as
// codepoints), for the sanity checks against known corpus statistics.
std::map<char32_t, double> char_frequencies(const CharCorpus& corpus);

// -------------------------------------------------------------- blobs

struct BlobConfig {
  int64_t n = 2048;
  int64_t dims = 16;
  int64_t classes = 10;
  double noise_rate = 0.0;      // fraction of labels flipped, ceil(noise*n) exactly
  double separation = 6.0;      // min pairwise center distance in point-noise units
  uint64_t center_seed = 1;     // centers are fixed by this seed alone

  void validate() const;
};

struct BlobDataset {
  Tensor<float> points;          // [n, dims]
  std::vector<int32_t> labels;   // with flips applied
  std::vector<int32_t> clean_labels;
  int64_t classes = 0;
  double noise_rate = 0.0;
  uint64_t seed = 0;
  uint64_t content_hash = 0;
};

// Gaussian clusters around seeded centers; exactly ceil(noise_rate*n) labels
// flipped uniformly to a different class. `seed` drives points and flips;
// centers depend only on config.center_seed.
BlobDataset make_blobs(const BlobConfig& cfg, uint64_t seed);

// -------------------------------------------------------- batch ordering

// Per-epoch seeded permutations chunked into batches (the final short batch
// is kept, so each epoch covers every index exactly once).
std::vector<std::vector<int64_t>> batch_order(int64_t n_examples, int64_t batch_size,
                                              int64_t epochs, uint64_t data_seed);

}  // namespace kdaudit
