#include "ecov/rng.hpp"

#include <cmath>
#include <numbers>

#include "ecov/errors.hpp"

namespace ecov {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> words) {
  std::uint64_t state = seed;
  std::uint64_t h = splitmix64(state);
  for (std::uint64_t w : words) {
    state ^= w + 0x9e3779b97f4a7c15ULL;
    h = splitmix64(state) ^ (h * 0x2545f4914f6cdd1dULL);
  }
  return h;
}

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

Rng Rng::substream(std::uint64_t seed, std::initializer_list<std::uint64_t> words) {
  return Rng(mix_seed(seed, words));
}

std::uint64_t Rng::bits() { return engine_(); }

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_normal_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi_v<double> * u2;
  cached_normal_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

std::int64_t Rng::poisson(double rate) {
  if (!(rate >= 0.0) || !std::isfinite(rate)) {
    fail(ErrorCode::bad_argument, "poisson rate must be finite and non-negative");
  }
  // multiplication method on chunks of rate <= 30; Poisson rates add across chunks
  std::int64_t total = 0;
  double remaining = rate;
  while (remaining > 0.0) {
    const double chunk = remaining > 30.0 ? 30.0 : remaining;
    remaining -= chunk;
    const double limit = std::exp(-chunk);
    std::int64_t count = -1;
    double prod = 1.0;
    do {
      prod *= uniform();
      ++count;
    } while (prod > limit);
    total += count;
  }
  return total;
}

Eigen::MatrixXd Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      out(i, j) = normal();
    }
  }
  return out;
}

Eigen::VectorXd Rng::normal_vector(Eigen::Index size) {
  Eigen::VectorXd out(size);
  for (Eigen::Index i = 0; i < size; ++i) {
    out(i) = normal();
  }
  return out;
}

}  // namespace ecov
