#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace ngvi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/**
 * A seeded random stream. Two streams built from the same (seed, stream id)
 * produce identical draw sequences; different stream ids are decorrelated by
 * the seed sequence mixing.
 *
 * An antithetic stream returns the negation of every standard-normal draw of
 * its plain twin and 1 - u for every uniform u. Mirrored runs use it.
 */
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t stream_id = 0,
                     bool antithetic = false)
      : seed_(seed), stream_id_(stream_id), antithetic_(antithetic) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32),
                      0x9e3779b9u};
    engine_.seed(seq);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  bool antithetic() const noexcept { return antithetic_; }

  double normal() {
    const double e = normal_(engine_);
    return antithetic_ ? -e : e;
  }

  Vec normal_vector(Eigen::Index d) {
    Vec out(d);
    for (Eigen::Index j = 0; j < d; ++j) out[j] = normal();
    return out;
  }

  // Uniform on [0, 1); (0, 1] when antithetic.
  double uniform() {
    const double u = uniform_(engine_);
    return antithetic_ ? 1.0 - u : u;
  }

  std::uint64_t bits() { return engine_(); }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  bool antithetic_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace ngvi
