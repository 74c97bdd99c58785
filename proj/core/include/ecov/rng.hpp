#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Core>

namespace ecov {

// Deterministic random source. Normal and Poisson draws are hand-rolled on top of the
// raw mt19937_64 bit stream because the std:: distributions are implementation-defined
// and outputs here must be reproducible byte-for-byte across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // counter-based substream: same (seed, words) always yields the same stream,
  // independent of how many draws other substreams consumed
  static Rng substream(std::uint64_t seed, std::initializer_list<std::uint64_t> words);

  std::uint64_t bits();
  double uniform();  // [0, 1), 53-bit resolution
  double normal();   // standard normal (Box-Muller, second value cached)
  std::int64_t poisson(double rate);

  // column-major fill order (pinned; part of the determinism contract)
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);
  Eigen::VectorXd normal_vector(Eigen::Index size);

 private:
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

// splitmix64-based mixing of a seed with context words (replicate index, purpose tag, ...)
std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> words);

}  // namespace ecov
