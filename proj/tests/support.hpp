#pragma once

// Independent reference implementations and random generators shared by the
// test suites. Nothing here calls into the library's math.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "fedmatch/nn.hpp"

namespace fmtest {

using fedmatch::Matrix;
using fedmatch::ModelArch;
using fedmatch::ParamVector;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = n(rng);
  return m;
}

inline ParamVector random_params(const ModelArch& arch, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(arch.param_count());
  for (double& x : v) x = n(rng);
  return ParamVector(arch, std::move(v));
}

inline Matrix random_one_hot(std::size_t rows, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  Matrix m(rows, classes);
  for (std::size_t r = 0; r < rows; ++r) m(r, pick(rng)) = 1.0;
  return m;
}

// Straightforward loops over the documented parameter layout.
inline std::vector<std::vector<double>> naive_forward(const ParamVector& p, const Matrix& x) {
  const auto& dims = p.arch().layer_dims;
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::vector<double> a(x.row(r).begin(), x.row(r).end());
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::size_t in = dims[l], o = dims[l + 1];
      std::vector<double> z(o);
      for (std::size_t j = 0; j < o; ++j) {
        double s = p[off + o * in + j];
        for (std::size_t i = 0; i < in; ++i) s += p[off + j * in + i] * a[i];
        z[j] = s;
      }
      off += o * in + o;
      if (l + 2 < dims.size()) {
        for (double& v : z) v = p.arch().activation == fedmatch::Activation::kRelu ? std::max(0.0, v) : std::tanh(v);
      }
      a = std::move(z);
    }
    const double mx = *std::max_element(a.begin(), a.end());
    double sum = 0.0;
    for (double& v : a) sum += (v = std::exp(v - mx));
    for (double& v : a) v /= sum;
    out.push_back(std::move(a));
  }
  return out;
}

/// Central finite differences of f at x.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// |a - n| / max(|a|, |n|), or the absolute gap when both are tiny.
inline double rel_error(double analytic, double numeric, double floor = 1e-8) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < floor) return std::abs(analytic - numeric);
  return std::abs(analytic - numeric) / scale;
}

inline double max_rel_error(std::span<const double> analytic, const std::vector<double>& numeric,
                            double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) worst = std::max(worst, rel_error(analytic[i], numeric[i], floor));
  return worst;
}

/// Majority vote over argmax indices; ties go to the lowest class.
inline std::size_t vote_oracle(std::size_t classes, const std::vector<std::size_t>& argmaxes) {
  std::vector<int> count(classes, 0);
  for (auto a : argmaxes) ++count[a];
  std::size_t best = 0;
  for (std::size_t c = 1; c < classes; ++c) {
    if (count[c] > count[best]) best = c;
  }
  return best;
}

/// Brute-force k nearest ids by (squared distance, id), skipping `exclude`.
inline std::vector<int> brute_knn(const std::vector<std::vector<double>>& points, const std::vector<int>& ids,
                                  const std::vector<double>& q, std::size_t k, std::optional<int> exclude) {
  std::vector<std::pair<double, int>> all;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (exclude && ids[i] == *exclude) continue;
    double d = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) d += (points[i][j] - q[j]) * (points[i][j] - q[j]);
    all.emplace_back(d, ids[i]);
  }
  std::sort(all.begin(), all.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i) out.push_back(all[i].second);
  return out;
}

}  // namespace fmtest
