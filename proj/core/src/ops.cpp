#include "egd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "egd/error.hpp"

namespace egd {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

ConstMap view(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

Map view(Tensor& t) {
  return Map(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require(bool ok, const char* what, const Tensor& a, const Tensor& b) {
  if (!ok) throw Error("numerics", std::string(what) + ": incompatible shapes " + a.shape_string() + " and " + b.shape_string());
}

}  // namespace

AttentionMask AttentionMask::all(std::size_t q, std::size_t k) {
  return AttentionMask{q, k, std::vector<std::uint8_t>(q * k, 1)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k <= q; ++k) m.allowed[q * n + k] = 1;
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.rows(), "matmul", a, b);
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  if (c.empty() || a.cols() == 0) return c;
  view(c).noalias() = view(a) * view(b);
  return c;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require(a.cols() == b.cols(), "matmul_bt", a, b);
  Tensor c = Tensor::matrix(a.rows(), b.rows());
  if (c.empty() || a.cols() == 0) return c;
  view(c).noalias() = view(a) * view(b).transpose();
  return c;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
  require(a.rows() == b.rows(), "matmul_at", a, b);
  Tensor c = Tensor::matrix(a.cols(), b.cols());
  if (c.empty() || a.rows() == 0) return c;
  view(c).noalias() = view(a).transpose() * view(b);
  return c;
}

Tensor softmax(const Tensor& x, int axis) {
  Tensor y = x;
  const std::size_t rows = x.rank() == 1 ? 1 : x.rows();
  const std::size_t cols = x.rank() == 1 ? x.size() : x.cols();
  const bool along_rows = x.rank() == 1 || axis == 1 || axis == -1;
  const std::size_t outer = along_rows ? rows : cols;
  const std::size_t inner = along_rows ? cols : rows;
  auto at = [&](std::size_t o, std::size_t i) -> std::size_t {
    return along_rows ? o * cols + i : i * cols + o;
  };
  for (std::size_t o = 0; o < outer; ++o) {
    double m = -INFINITY;
    for (std::size_t i = 0; i < inner; ++i) m = std::max(m, x[at(o, i)]);
    double sum = 0.0;
    for (std::size_t i = 0; i < inner; ++i) {
      const double e = std::exp(x[at(o, i)] - m);
      y[at(o, i)] = e;
      sum += e;
    }
    for (std::size_t i = 0; i < inner; ++i) y[at(o, i)] /= sum;
  }
  return y;
}

Tensor l2_normalize(const Tensor& x, int axis, double eps) {
  Tensor y = x;
  const std::size_t rows = x.rank() == 1 ? 1 : x.rows();
  const std::size_t cols = x.rank() == 1 ? x.size() : x.cols();
  const bool along_rows = x.rank() == 1 || axis == 1 || axis == -1;
  const std::size_t outer = along_rows ? rows : cols;
  const std::size_t inner = along_rows ? cols : rows;
  auto at = [&](std::size_t o, std::size_t i) -> std::size_t {
    return along_rows ? o * cols + i : i * cols + o;
  };
  for (std::size_t o = 0; o < outer; ++o) {
    double sq = 0.0;
    for (std::size_t i = 0; i < inner; ++i) sq += x[at(o, i)] * x[at(o, i)];
    const double norm = std::sqrt(sq);
    if (norm < eps) continue;
    for (std::size_t i = 0; i < inner; ++i) y[at(o, i)] = x[at(o, i)] / norm;
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw Error("numerics", "layer_norm: gain/bias length must equal " + std::to_string(n));
  }
  Tensor y = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row_span(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv_sd = 1.0 / std::sqrt(std::max(var, kLayerNormEps));
    auto out = y.row_span(r);
    for (std::size_t c = 0; c < n; ++c) out[c] = (row[c] - mean) * inv_sd * gain[c] + bias[c];
  }
  return y;
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const AttentionMask& mask) {
  require(q.cols() == k.cols(), "scaled_dot_attention(Q,K)", q, k);
  require(k.rows() == v.rows(), "scaled_dot_attention(K,V)", k, v);
  if (mask.queries != q.rows() || mask.keys != k.rows()) {
    throw Error("numerics", "scaled_dot_attention: mask is " + std::to_string(mask.queries) + "x" +
                                std::to_string(mask.keys) + " for " + std::to_string(q.rows()) +
                                " queries and " + std::to_string(k.rows()) + " keys");
  }
  Tensor logits = matmul_bt(q, k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (std::size_t i = 0; i < q.rows(); ++i) {
    bool any = false;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      logits(i, j) *= scale;
      if (mask(i, j)) {
        any = true;
      } else {
        logits(i, j) += kMaskedLogit;
      }
    }
    if (!any) {
      throw Error("numerics", "scaled_dot_attention: query " + std::to_string(i) + " has no valid key");
    }
  }
  AttentionResult r;
  r.weights = softmax(logits, 1);
  r.output = matmul(r.weights, v);
  return r;
}

Tensor reparameterize_sigma(const Tensor& mu, const Tensor& sigma, const GaussianSample& sample) {
  if (!mu.same_shape(sigma) || mu.size() != sample.epsilon.size()) {
    throw Error("numerics", "reparameterize: shape mismatch " + mu.shape_string() + ", " +
                                sigma.shape_string() + ", " + sample.epsilon.shape_string());
  }
  Tensor z = mu;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + sigma[i] * sample.epsilon[i];
  return z;
}

Tensor reparameterize(const Tensor& mu, const Tensor& log_var, const GaussianSample& sample) {
  Tensor sigma = log_var;
  for (double& x : sigma.storage()) x = std::exp(0.5 * x);
  return reparameterize_sigma(mu, sigma, sample);
}

}  // namespace egd
