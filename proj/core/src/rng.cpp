#include "egd/rng.hpp"

namespace egd {

GaussianSample GaussianSample::draw(std::uint64_t seed, std::uint64_t stream,
                                    std::vector<std::size_t> shape) {
  GaussianSample s{Tensor(std::move(shape)), seed, stream};
  Rng rng = make_rng(seed, stream);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& x : s.epsilon.storage()) x = normal(rng);
  return s;
}

GaussianSample GaussianSample::zeros(std::vector<std::size_t> shape) {
  return GaussianSample{Tensor(std::move(shape)), 0, 0};
}

}  // namespace egd
