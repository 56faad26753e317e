#include "kdaudit/rng.hpp"

#include "kdaudit/util.hpp"

namespace kdaudit {

uint64_t derive_seed(uint64_t experiment_seed, uint64_t label_hash, uint64_t job_seed) {
  SplitMix64 a(experiment_seed);
  SplitMix64 b(a.next() ^ label_hash);
  SplitMix64 c(b.next() ^ job_seed);
  return c.next();
}

uint64_t derive_seed(uint64_t experiment_seed, std::string_view label, uint64_t job_seed) {
  return derive_seed(experiment_seed, fnv1a64(label), job_seed);
}

}  // namespace kdaudit
