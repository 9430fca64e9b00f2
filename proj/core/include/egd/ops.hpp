#pragma once

#include <cstdint>
#include <vector>

#include "egd/rng.hpp"
#include "egd/tensor.hpp"

namespace egd {

// Additive logit applied to disallowed attention positions.
inline constexpr double kMaskedLogit = -1e9;
// Variance floor used by layer_norm.
inline constexpr double kLayerNormEps = 1e-8;
// Default norm threshold below which l2_normalize returns its input.
inline constexpr double kL2Eps = 1e-12;

// Row-major boolean matrix; allowed(q, k) != 0 means query q may attend key k.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask all(std::size_t q, std::size_t k);
  static AttentionMask causal(std::size_t n);
  bool operator()(std::size_t q, std::size_t k) const { return allowed[q * keys + k] != 0; }
};

// C = A * B (rank-2).
Tensor matmul(const Tensor& a, const Tensor& b);
// C = A * B^T.
Tensor matmul_bt(const Tensor& a, const Tensor& b);
// C = A^T * B.
Tensor matmul_at(const Tensor& a, const Tensor& b);

// Max-shifted softmax along `axis` (0 = down columns, 1 = along rows) of a
// rank-2 tensor. A rank-1 tensor is normalized as a whole.
Tensor softmax(const Tensor& x, int axis = 1);

// Unit l2 norm along `axis`. Slices whose norm is below eps are returned
// unchanged.
Tensor l2_normalize(const Tensor& x, int axis = 1, double eps = kL2Eps);

// Per-row standardization followed by the affine map gain * x + bias. The
// variance is floored at kLayerNormEps, so a constant row maps to `bias`.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

struct AttentionResult {
  Tensor output;   // queries x d_v
  Tensor weights;  // queries x keys, zero at masked positions
};

// softmax(Q K^T / sqrt(d) + mask) V. Throws if a query has no allowed key.
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const AttentionMask& mask);

// z = mu + exp(0.5 * log_var) * epsilon.
Tensor reparameterize(const Tensor& mu, const Tensor& log_var, const GaussianSample& sample);
// z = mu + sigma * epsilon, with sigma given directly.
Tensor reparameterize_sigma(const Tensor& mu, const Tensor& sigma, const GaussianSample& sample);

}  // namespace egd
