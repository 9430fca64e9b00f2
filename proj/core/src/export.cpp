#include "egd/export.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "egd/error.hpp"

namespace egd {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error("cli", msg); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) fail("cannot write " + file.string());
  return out;
}

}  // namespace

std::vector<std::size_t> channel_assignment(const std::vector<Tensor>& raw) {
  if (raw.empty()) fail("channel assignment needs at least one channel");
  const std::size_t rows = raw.front().rows();
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    double best = -1.0;
    for (std::size_t k = 0; k < raw.size(); ++k) {
      double s = 0.0;
      for (double x : raw[k].row_span(r)) s += x * x;
      if (s > best) {
        best = s;
        out[r] = k;
      }
    }
  }
  return out;
}

Projection pca_2d(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n == 0 || d < 2) fail("PCA needs at least one row and two columns");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat m = Eigen::Map<const Mat>(x.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  m.rowwise() -= m.colwise().mean();
  const Mat cov = (m.transpose() * m) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Mat> solver(cov);
  if (solver.info() != Eigen::Success) fail("eigendecomposition failed");

  Projection p;
  p.components = Tensor::matrix(2, d);
  for (std::size_t c = 0; c < 2; ++c) {
    // Eigen sorts eigenvalues ascending.
    const Eigen::Index col = static_cast<Eigen::Index>(d - 1 - c);
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t j = 0; j < d; ++j) p.components(c, j) = v(static_cast<Eigen::Index>(j));
    p.variances.push_back(solver.eigenvalues()(col));
  }
  p.coords = Tensor::matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        s += m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * p.components(c, j);
      p.coords(i, c) = s;
    }
  return p;
}

ItemExport export_items(const ModelParams& params, const HyperParams& hp, const GlobalGraph& graph) {
  const GlobalRepresentation g = global_aggregate(graph, params.item_embed, params.channel_W, hp.activation);
  const std::size_t n = params.n_items();
  ItemExport ex;
  ex.embeddings = Tensor::matrix(n, g.z.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = g.z.row_span(i + 1);
    std::copy(src.begin(), src.end(), ex.embeddings.row_span(i).begin());
  }
  ex.channel = channel_assignment(g.raw);
  ex.channel.erase(ex.channel.begin());  // padding row
  ex.projection = pca_2d(ex.embeddings);
  return ex;
}

void write_item_export(const std::filesystem::path& dir, const ItemExport& ex, const std::vector<std::string>& item_ids) {
  std::filesystem::create_directories(dir);
  const std::size_t n = ex.embeddings.rows();
  if (item_ids.size() != n + 1 || ex.channel.size() != n) fail("export tables disagree on the item count");
  auto emb = open_out(dir / "embeddings.tsv");
  auto ch = open_out(dir / "channels.tsv");
  auto pca = open_out(dir / "pca2d.tsv");
  emb << "item\tindex";
  for (std::size_t j = 0; j < ex.embeddings.cols(); ++j) emb << "\tz" << j;
  emb << '\n';
  ch << "item\tindex\tchannel\n";
  pca << "item\tindex\tx\ty\tchannel\n";
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& id = item_ids[i + 1];
    emb << id << '\t' << i + 1;
    for (double v : ex.embeddings.row_span(i)) emb << '\t' << fmt(v);
    emb << '\n';
    ch << id << '\t' << i + 1 << '\t' << ex.channel[i] << '\n';
    pca << id << '\t' << i + 1 << '\t' << fmt(ex.projection.coords(i, 0)) << '\t' << fmt(ex.projection.coords(i, 1))
        << '\t' << ex.channel[i] << '\n';
  }
}

}  // namespace egd
