#include "egd/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "egd/error.hpp"

namespace egd {

const Tensor& Var::value() const { return tape_->nodes_[id_].val(); }

const Tensor& Var::grad() const {
  auto& n = tape_->nodes_[id_];
  return n.sink ? *n.sink : n.grad;
}

bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr, false, "constant", {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr, true, "variable", {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Tensor& value, Tensor& sink) {
  if (!sink.same_shape(value)) {
    throw Error("numerics", "parameter gradient sink " + sink.shape_string() + " does not match value " +
                                value.shape_string());
  }
  nodes_.push_back(Node{{}, &value, {}, &sink, true, "parameter", {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::reference(const Tensor& value) {
  nodes_.push_back(Node{{}, &value, {}, nullptr, false, "reference", {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) {
    throw Error("numerics", std::string("non-finite output from ") + std::string(op));
  }
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr, needs, op, needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_storage(Node& n) {
  if (n.sink) return *n.sink;
  if (n.grad.empty() && !n.val().empty()) n.grad = Tensor(n.val().shape());
  return n.grad;
}

void Tape::apply_hook(Tensor& contribution) {
  if (hook_) hook_(current_op_, contribution);
}

void Tape::accumulate(Var target, Tensor contribution) {
  Node& n = nodes_[target.id_];
  if (!n.requires_grad) return;
  apply_hook(contribution);
  Tensor& g = grad_storage(n);
  if (g.size() != contribution.size()) {
    throw Error("numerics", "gradient shape " + contribution.shape_string() + " does not match " + g.shape_string());
  }
  auto gs = g.data();
  auto cs = contribution.data();
  for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += cs[i];
}

void Tape::accumulate_rows(Var target, std::span<const std::size_t> indices, Tensor rows) {
  Node& n = nodes_[target.id_];
  if (!n.requires_grad) return;
  apply_hook(rows);
  Tensor& g = grad_storage(n);
  const std::size_t c = g.cols();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto dst = g.row_span(indices[r]);
    auto src = rows.row_span(r);
    for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
  }
}

void Tape::backward(Var out) {
  if (out.tape_ != this) throw Error("numerics", "backward called with a variable from another tape");
  if (out.value().size() != 1) {
    throw Error("numerics", "backward requires a scalar output, got " + out.value().shape_string());
  }
  Node& root = nodes_[out.id_];
  if (!root.requires_grad) return;
  grad_storage(root)[0] += 1.0;
  for (std::size_t i = out.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    current_op_ = n.op;
    n.backward(*this, n.grad, n.val());
  }
  current_op_ = {};
}

namespace ad {

namespace {

void check(bool ok, std::string_view op, const Tensor& a, const Tensor& b) {
  if (!ok) {
    throw Error("numerics", std::string(op) + ": incompatible shapes " + a.shape_string() + " and " + b.shape_string());
  }
}

Tensor map(const Tensor& a, double (*f)(double)) {
  Tensor y = a;
  for (double& x : y.storage()) x = f(x);
  return y;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tensor y = egd::matmul(a.value(), b.value());
  return a.tape()->record("matmul", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (a.requires_grad()) t.accumulate(a, egd::matmul_bt(g, b.value()));
    if (b.requires_grad()) t.accumulate(b, egd::matmul_at(a.value(), g));
  });
}

Var matmul_bt(Var a, Var b) {
  Tensor y = egd::matmul_bt(a.value(), b.value());
  return a.tape()->record("matmul_bt", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (a.requires_grad()) t.accumulate(a, egd::matmul(g, b.value()));
    if (b.requires_grad()) t.accumulate(b, egd::matmul_at(g, a.value()));
  });
}

Var add(Var a, Var b) {
  check(a.value().size() == b.value().size() && a.rows() == b.rows(), "add", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.tape()->record("add", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_row(Var a, Var bias) {
  check(bias.value().size() == a.cols(), "add_row", a.value(), bias.value());
  Tensor y = a.value();
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bias.value()[c];
  return a.tape()->record("add_row", std::move(y), {a, bias}, [a, bias](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g);
    if (bias.requires_grad()) {
      Tensor gb(bias.value().shape());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
      t.accumulate(bias, std::move(gb));
    }
  });
}

Var scale(Var a, double s) {
  Tensor y = a.value();
  for (double& x : y.storage()) x *= s;
  return a.tape()->record("scale", std::move(y), {a}, [a, s](Tape& t, const Tensor& g, const Tensor&) {
    Tensor ga = g;
    for (double& x : ga.storage()) x *= s;
    t.accumulate(a, std::move(ga));
  });
}

Var mul(Var a, Var b) {
  check(a.value().size() == b.value().size() && a.rows() == b.rows(), "mul", a.value(), b.value());
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape()->record("mul", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (a.requires_grad()) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= b.value()[i];
      t.accumulate(a, std::move(ga));
    }
    if (b.requires_grad()) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= a.value()[i];
      t.accumulate(b, std::move(gb));
    }
  });
}

Var tanh(Var a) {
  Tensor y = map(a.value(), [](double x) { return std::tanh(x); });
  return a.tape()->record("tanh", std::move(y), {a}, [a](Tape& t, const Tensor& g, const Tensor& out) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - out[i] * out[i];
    t.accumulate(a, std::move(ga));
  });
}

Var sigmoid(Var a) {
  Tensor y = map(a.value(), [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return a.tape()->record("sigmoid", std::move(y), {a}, [a](Tape& t, const Tensor& g, const Tensor& out) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= out[i] * (1.0 - out[i]);
    t.accumulate(a, std::move(ga));
  });
}

Var exp(Var a) {
  Tensor y = map(a.value(), [](double x) { return std::exp(x); });
  return a.tape()->record("exp", std::move(y), {a}, [a](Tape& t, const Tensor& g, const Tensor& out) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= out[i];
    t.accumulate(a, std::move(ga));
  });
}

namespace {

// dL/dx = y * (g - <g, y>) per row.
Tensor softmax_rows_backward(const Tensor& g, const Tensor& y) {
  Tensor gx = g;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row_span(r);
    auto gr = g.row_span(r);
    double dot = 0.0;
    for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
    auto out = gx.row_span(r);
    for (std::size_t c = 0; c < yr.size(); ++c) out[c] = yr[c] * (gr[c] - dot);
  }
  return gx;
}

}  // namespace

Var softmax_rows(Var a) {
  Tensor y = egd::softmax(a.value(), 1);
  return a.tape()->record("softmax_rows", std::move(y), {a}, [a](Tape& t, const Tensor& g, const Tensor& out) {
    t.accumulate(a, softmax_rows_backward(g, out));
  });
}

Var masked_softmax_rows(Var a, const AttentionMask& mask) {
  if (mask.queries != a.rows() || mask.keys != a.cols()) {
    throw Error("numerics", "masked_softmax_rows: mask shape does not match " + a.value().shape_string());
  }
  Tensor logits = a.value();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    bool any = false;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      if (mask(r, c)) {
        any = true;
      } else {
        logits(r, c) += kMaskedLogit;
      }
    }
    if (!any) throw Error("numerics", "attention query " + std::to_string(r) + " has no valid key");
  }
  Tensor y = egd::softmax(logits, 1);
  return a.tape()->record("masked_softmax_rows", std::move(y), {a}, [a](Tape& t, const Tensor& g, const Tensor& out) {
    t.accumulate(a, softmax_rows_backward(g, out));
  });
}

Var layer_norm_rows(Var x, Var gain, Var bias) {
  const std::size_t n = x.cols();
  check(gain.value().size() == n && bias.value().size() == n, "layer_norm_rows", x.value(), gain.value());
  Tensor y = egd::layer_norm(x.value(), gain.value(), bias.value());
  return x.tape()->record(
      "layer_norm_rows", std::move(y), {x, gain, bias}, [x, gain, bias, n](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& xv = x.value();
        const Tensor& gv = gain.value();
        Tensor gx = Tensor(xv.shape());
        Tensor ggain = Tensor(gv.shape());
        Tensor gbias = Tensor(gv.shape());
        std::vector<double> xhat(n), gy(n);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          auto row = xv.row_span(r);
          double mean = 0.0;
          for (double v : row) mean += v;
          mean *= inv_n;
          double var = 0.0;
          for (double v : row) var += (v - mean) * (v - mean);
          var *= inv_n;
          const bool floored = var < kLayerNormEps;
          const double inv_sd = 1.0 / std::sqrt(std::max(var, kLayerNormEps));
          double mean_gy = 0.0, mean_gy_xhat = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            xhat[c] = (row[c] - mean) * inv_sd;
            gy[c] = g(r, c) * gv[c];
            ggain[c] += g(r, c) * xhat[c];
            gbias[c] += g(r, c);
            mean_gy += gy[c];
            mean_gy_xhat += gy[c] * xhat[c];
          }
          mean_gy *= inv_n;
          mean_gy_xhat *= inv_n;
          if (floored) mean_gy_xhat = 0.0;
          for (std::size_t c = 0; c < n; ++c) gx(r, c) = inv_sd * (gy[c] - mean_gy - xhat[c] * mean_gy_xhat);
        }
        t.accumulate(x, std::move(gx));
        t.accumulate(gain, std::move(ggain));
        t.accumulate(bias, std::move(gbias));
      });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw Error("numerics", "slice_rows out of range");
  const std::size_t c = a.cols();
  Tensor y = Tensor::matrix(end - begin, c);
  std::copy(a.value().data().begin() + static_cast<std::ptrdiff_t>(begin * c),
            a.value().data().begin() + static_cast<std::ptrdiff_t>(end * c), y.storage().begin());
  return a.tape()->record("slice_rows", std::move(y), {a}, [a, begin](Tape& t, const Tensor& g, const Tensor&) {
    std::vector<std::size_t> idx(g.rows());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    t.accumulate_rows(a, idx, g);
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw Error("numerics", "slice_cols out of range");
  const std::size_t w = end - begin;
  Tensor y = Tensor::matrix(a.rows(), w);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < w; ++c) y(r, c) = a.value()(r, begin + c);
  return a.tape()->record("slice_cols", std::move(y), {a}, [a, begin, w](Tape& t, const Tensor& g, const Tensor&) {
    Tensor ga = Tensor(a.value().shape());
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < w; ++c) ga(r, begin + c) = g(r, c);
    t.accumulate(a, std::move(ga));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("numerics", "concat_cols of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw Error("numerics", "concat_cols: row counts differ");
    total += p.cols();
  }
  Tensor y = Tensor::matrix(rows, total);
  std::size_t off = 0;
  for (const Var& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) y(r, off + c) = p.value()(r, c);
    off += p.cols();
  }
  return parts.front().tape()->record("concat_cols", std::move(y), parts, [parts](Tape& t, const Tensor& g, const Tensor&) {
    std::size_t o = 0;
    for (const Var& p : parts) {
      if (p.requires_grad()) {
        Tensor gp = Tensor(p.value().shape());
        for (std::size_t r = 0; r < gp.rows(); ++r)
          for (std::size_t c = 0; c < gp.cols(); ++c) gp(r, c) = g(r, o + c);
        t.accumulate(p, std::move(gp));
      }
      o += p.cols();
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("numerics", "concat_rows of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw Error("numerics", "concat_rows: column counts differ");
    total += p.rows();
  }
  Tensor y = Tensor::matrix(total, cols);
  auto dst = y.storage().begin();
  for (const Var& p : parts) dst = std::copy(p.value().data().begin(), p.value().data().end(), dst);
  return parts.front().tape()->record("concat_rows", std::move(y), parts, [parts](Tape& t, const Tensor& g, const Tensor&) {
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t n = p.value().size();
      if (p.requires_grad()) {
        Tensor gp(p.value().shape());
        std::copy(g.data().begin() + static_cast<std::ptrdiff_t>(offset),
                  g.data().begin() + static_cast<std::ptrdiff_t>(offset + n), gp.storage().begin());
        t.accumulate(p, std::move(gp));
      }
      offset += n;
    }
  });
}

Var gather_rows(Var table, std::vector<std::size_t> indices) {
  const std::size_t c = table.cols();
  Tensor y = Tensor::matrix(indices.size(), c);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= table.rows()) {
      throw Error("numerics", "gather_rows: index " + std::to_string(indices[r]) + " out of range " +
                                  std::to_string(table.rows()));
    }
    auto src = table.value().row_span(indices[r]);
    std::copy(src.begin(), src.end(), y.row_span(r).begin());
  }
  return table.tape()->record("gather_rows", std::move(y), {table},
                              [table, idx = std::move(indices)](Tape& t, const Tensor& g, const Tensor&) {
                                t.accumulate_rows(table, idx, g);
                              });
}

Var scatter_add_rows(Var base, Var src, std::vector<std::size_t> indices) {
  if (indices.size() != src.rows() || base.cols() != src.cols()) {
    throw Error("numerics", "scatter_add_rows: shape mismatch");
  }
  Tensor y = base.value();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= y.rows()) throw Error("numerics", "scatter_add_rows: index out of range");
    auto dst = y.row_span(indices[r]);
    auto s = src.value().row_span(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += s[c];
  }
  return base.tape()->record("scatter_add_rows", std::move(y), {base, src},
                             [base, src, idx = std::move(indices)](Tape& t, const Tensor& g, const Tensor&) {
                               t.accumulate(base, g);
                               if (src.requires_grad()) {
                                 Tensor gs = Tensor(src.value().shape());
                                 for (std::size_t r = 0; r < idx.size(); ++r) {
                                   auto from = g.row_span(idx[r]);
                                   std::copy(from.begin(), from.end(), gs.row_span(r).begin());
                                 }
                                 t.accumulate(src, std::move(gs));
                               }
                             });
}

Var rowwise_dot(Var a, Var b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "rowwise_dot", a.value(), b.value());
  Tensor y = Tensor::matrix(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto ar = a.value().row_span(r);
    auto br = b.value().row_span(r);
    double s = 0.0;
    for (std::size_t c = 0; c < ar.size(); ++c) s += ar[c] * br[c];
    y[r] = s;
  }
  return a.tape()->record("rowwise_dot", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (a.requires_grad()) {
      Tensor ga = b.value();
      for (std::size_t r = 0; r < ga.rows(); ++r)
        for (double& x : ga.row_span(r)) x *= g[r];
      t.accumulate(a, std::move(ga));
    }
    if (b.requires_grad()) {
      Tensor gb = a.value();
      for (std::size_t r = 0; r < gb.rows(); ++r)
        for (double& x : gb.row_span(r)) x *= g[r];
      t.accumulate(b, std::move(gb));
    }
  });
}

Var scale_rows(Var a, Var s) {
  check(s.rows() == a.rows() && s.cols() == 1, "scale_rows", a.value(), s.value());
  Tensor y = a.value();
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (double& x : y.row_span(r)) x *= s.value()[r];
  return a.tape()->record("scale_rows", std::move(y), {a, s}, [a, s](Tape& t, const Tensor& g, const Tensor&) {
    if (a.requires_grad()) {
      Tensor ga = g;
      for (std::size_t r = 0; r < ga.rows(); ++r)
        for (double& x : ga.row_span(r)) x *= s.value()[r];
      t.accumulate(a, std::move(ga));
    }
    if (s.requires_grad()) {
      Tensor gs = Tensor(s.value().shape());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gr = g.row_span(r);
        auto ar = a.value().row_span(r);
        double d = 0.0;
        for (std::size_t c = 0; c < gr.size(); ++c) d += gr[c] * ar[c];
        gs[r] = d;
      }
      t.accumulate(s, std::move(gs));
    }
  });
}

Var l2_normalize_rows(Var a, double eps) {
  Tensor y = egd::l2_normalize(a.value(), 1, eps);
  return a.tape()->record("l2_normalize_rows", std::move(y), {a},
                          [a, eps](Tape& t, const Tensor& g, const Tensor& out) {
                            Tensor ga = g;
                            for (std::size_t r = 0; r < out.rows(); ++r) {
                              auto xr = a.value().row_span(r);
                              double sq = 0.0;
                              for (double v : xr) sq += v * v;
                              const double norm = std::sqrt(sq);
                              if (norm < eps) continue;  // identity branch
                              auto yr = out.row_span(r);
                              auto gr = g.row_span(r);
                              double dot = 0.0;
                              for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
                              auto o = ga.row_span(r);
                              for (std::size_t c = 0; c < yr.size(); ++c) o[c] = (gr[c] - yr[c] * dot) / norm;
                            }
                            t.accumulate(a, std::move(ga));
                          });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape()->record("sum", Tensor({1, 1}, s), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, Tensor(a.value().shape(), g[0]));
  });
}

Var reparameterize(Var mu, Var log_var, const Tensor& eps) {
  check(mu.value().same_shape(log_var.value()) && mu.value().size() == eps.size(), "reparameterize", mu.value(),
        log_var.value());
  Tensor y = mu.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += std::exp(0.5 * log_var.value()[i]) * eps[i];
  return mu.tape()->record("reparameterize", std::move(y), {mu, log_var},
                           [mu, log_var, eps](Tape& t, const Tensor& g, const Tensor&) {
                             t.accumulate(mu, g);
                             if (log_var.requires_grad()) {
                               Tensor gl = g;
                               for (std::size_t i = 0; i < gl.size(); ++i)
                                 gl[i] *= 0.5 * std::exp(0.5 * log_var.value()[i]) * eps[i];
                               t.accumulate(log_var, std::move(gl));
                             }
                           });
}

Var gaussian_kl(Var mu, Var log_var) {
  check(mu.value().same_shape(log_var.value()), "gaussian_kl", mu.value(), log_var.value());
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.value().size(); ++i) {
    const double m = mu.value()[i];
    const double lv = log_var.value()[i];
    kl += m * m + std::exp(lv) - lv - 1.0;
  }
  return mu.tape()->record("gaussian_kl", Tensor({1, 1}, 0.5 * kl), {mu, log_var},
                           [mu, log_var](Tape& t, const Tensor& g, const Tensor&) {
                             if (mu.requires_grad()) {
                               Tensor gm = mu.value();
                               for (double& x : gm.storage()) x *= g[0];
                               t.accumulate(mu, std::move(gm));
                             }
                             if (log_var.requires_grad()) {
                               Tensor gl = log_var.value();
                               for (double& x : gl.storage()) x = g[0] * 0.5 * (std::exp(x) - 1.0);
                               t.accumulate(log_var, std::move(gl));
                             }
                           });
}

Var catalog_bce(Var probs, std::vector<std::size_t> targets) {
  const Tensor& p = probs.value();
  if (targets.size() != p.rows()) throw Error("numerics", "catalog_bce: one target per row required");
  double loss = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    if (targets[r] >= p.cols()) throw Error("numerics", "catalog_bce: target out of range");
    for (std::size_t c = 0; c < p.cols(); ++c) {
      const double v = p(r, c);
      loss -= c == targets[r] ? std::log(std::max(v, kLogFloor)) : std::log(std::max(1.0 - v, kLogFloor));
    }
  }
  return probs.tape()->record("catalog_bce", Tensor({1, 1}, loss), {probs},
                              [probs, tg = std::move(targets)](Tape& t, const Tensor& g, const Tensor&) {
                                const Tensor& pv = probs.value();
                                Tensor gp = Tensor(pv.shape());
                                for (std::size_t r = 0; r < pv.rows(); ++r) {
                                  for (std::size_t c = 0; c < pv.cols(); ++c) {
                                    const double v = pv(r, c);
                                    if (c == tg[r]) {
                                      gp(r, c) = v > kLogFloor ? -g[0] / v : 0.0;
                                    } else {
                                      gp(r, c) = 1.0 - v > kLogFloor ? g[0] / (1.0 - v) : 0.0;
                                    }
                                  }
                                }
                                t.accumulate(probs, std::move(gp));
                              });
}

namespace {

constexpr std::size_t kScoreBlockRows = 256;

// Row block [r0, r1) of softmax(z * items^T).
Tensor score_block_probs(const Tensor& z, const Tensor& items, std::size_t r0, std::size_t r1) {
  Tensor zb = Tensor::matrix(r1 - r0, z.cols());
  std::copy(z.data().begin() + static_cast<std::ptrdiff_t>(r0 * z.cols()),
            z.data().begin() + static_cast<std::ptrdiff_t>(r1 * z.cols()), zb.storage().begin());
  return egd::softmax(egd::matmul_bt(zb, items), 1);
}

}  // namespace

Var softmax_catalog_bce(Var z, Var items, std::vector<std::size_t> targets) {
  const Tensor& zv = z.value();
  const Tensor& iv = items.value();
  if (zv.cols() != iv.cols()) throw Error("numerics", "softmax_catalog_bce: z and items disagree on width");
  if (targets.size() != zv.rows()) throw Error("numerics", "softmax_catalog_bce: one target per row required");
  for (std::size_t t : targets)
    if (t >= iv.rows()) throw Error("numerics", "softmax_catalog_bce: target out of range");
  double loss = 0.0;
  for (std::size_t r0 = 0; r0 < zv.rows(); r0 += kScoreBlockRows) {
    const std::size_t r1 = std::min(zv.rows(), r0 + kScoreBlockRows);
    const Tensor p = score_block_probs(zv, iv, r0, r1);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const std::size_t tgt = targets[r0 + r];
      for (std::size_t c = 0; c < p.cols(); ++c) {
        const double v = p(r, c);
        loss -= c == tgt ? std::log(std::max(v, kLogFloor)) : std::log(std::max(1.0 - v, kLogFloor));
      }
    }
  }
  return z.tape()->record(
      "softmax_catalog_bce", Tensor({1, 1}, loss), {z, items},
      [z, items, tg = std::move(targets)](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& zv = z.value();
        const Tensor& iv = items.value();
        Tensor gz = Tensor(zv.shape());
        Tensor gi = Tensor(iv.shape());
        for (std::size_t r0 = 0; r0 < zv.rows(); r0 += kScoreBlockRows) {
          const std::size_t r1 = std::min(zv.rows(), r0 + kScoreBlockRows);
          const Tensor p = score_block_probs(zv, iv, r0, r1);
          Tensor gp = Tensor(p.shape());
          for (std::size_t r = 0; r < p.rows(); ++r) {
            for (std::size_t c = 0; c < p.cols(); ++c) {
              const double v = p(r, c);
              if (c == tg[r0 + r]) {
                gp(r, c) = v > kLogFloor ? -g[0] / v : 0.0;
              } else {
                gp(r, c) = 1.0 - v > kLogFloor ? g[0] / (1.0 - v) : 0.0;
              }
            }
          }
          const Tensor gl = softmax_rows_backward(gp, p);
          const Tensor gzb = egd::matmul(gl, iv);
          std::copy(gzb.data().begin(), gzb.data().end(),
                    gz.storage().begin() + static_cast<std::ptrdiff_t>(r0 * zv.cols()));
          Tensor zb = Tensor::matrix(r1 - r0, zv.cols());
          std::copy(zv.data().begin() + static_cast<std::ptrdiff_t>(r0 * zv.cols()),
                    zv.data().begin() + static_cast<std::ptrdiff_t>(r1 * zv.cols()), zb.storage().begin());
          const Tensor gib = egd::matmul_at(gl, zb);
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gib[i];
        }
        t.accumulate(z, std::move(gz));
        t.accumulate(items, std::move(gi));
      });
}

}  // namespace ad
}  // namespace egd
