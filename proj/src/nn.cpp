#include "fedmatch/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "fedmatch/error.hpp"

namespace fedmatch {

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw InvalidInput("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation act) {
  return act == Activation::kRelu ? "relu" : "tanh";
}

ModelArch::ModelArch(std::vector<std::size_t> dims, Activation act)
    : layer_dims(std::move(dims)), activation(act) {
  if (layer_dims.size() < 2) throw InvalidInput("model needs at least an input and an output layer");
  for (auto d : layer_dims) {
    if (d == 0) throw InvalidInput("layer widths must be positive");
  }
  if (layer_dims.back() < 2) throw InvalidInput("class count must be at least 2");
}

std::size_t ModelArch::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    n += layer_dims[l] * layer_dims[l + 1] + layer_dims[l + 1];
  }
  return n;
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) throw InvalidInput("matrix data does not match its shape");
}

Matrix Matrix::select_rows(std::span<const std::size_t> idx) const {
  Matrix out(idx.size(), cols_);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows_) throw InvalidInput("row index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(idx[i] * cols_), cols_,
                out.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
  }
  return out;
}

ParamVector::ParamVector(ModelArch arch) : arch_(std::move(arch)), values_(arch_.param_count(), 0.0) {}

ParamVector::ParamVector(ModelArch arch, std::vector<double> values)
    : arch_(std::move(arch)), values_(std::move(values)) {
  if (values_.size() != arch_.param_count()) {
    throw InvalidInput("parameter count " + std::to_string(values_.size()) + " does not match architecture (" +
                       std::to_string(arch_.param_count()) + ")");
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw InvalidInput("parameters must be finite");
  }
}

ProbDist ProbDist::from_matrix(Matrix m) {
  if (m.cols() < 2) throw InvalidInput("distribution needs at least two classes");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double sum = 0.0;
    for (double v : m.row(r)) {
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("probabilities must lie in [0, 1]");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw InvalidInput("distribution row does not sum to 1");
  }
  return ProbDist(std::move(m));
}

ProbDist softmax_rows(Matrix logits) {
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return ProbDist(std::move(logits));
}

namespace {

struct LayerView {
  std::size_t in;
  std::size_t out;
  std::size_t w_offset;  // W then b
};

std::vector<LayerView> layer_views(const ModelArch& arch) {
  std::vector<LayerView> views;
  std::size_t off = 0;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const std::size_t in = arch.layer_dims[l], out = arch.layer_dims[l + 1];
    views.push_back({in, out, off});
    off += in * out + out;
  }
  return views;
}

// y = x W^T + b
Matrix affine(const Matrix& x, std::span<const double> p, const LayerView& lv) {
  Matrix y(x.rows(), lv.out);
  const double* w = p.data() + lv.w_offset;
  const double* b = w + lv.in * lv.out;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    for (std::size_t o = 0; o < lv.out; ++o) {
      const double* wo = w + o * lv.in;
      double acc = b[o];
      for (std::size_t i = 0; i < lv.in; ++i) acc += wo[i] * xr[i];
      y(r, o) = acc;
    }
  }
  return y;
}

double activate(Activation a, double z) { return a == Activation::kRelu ? (z > 0.0 ? z : 0.0) : std::tanh(z); }

double activate_grad(Activation a, double z, double out) {
  if (a == Activation::kRelu) return z > 0.0 ? 1.0 : 0.0;
  return 1.0 - out * out;
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidInput(std::string(what) + ": shape mismatch");
  }
}

}  // namespace

ForwardTrace forward_trace(const ParamVector& params, const Matrix& batch) {
  const ModelArch& arch = params.arch();
  if (batch.cols() != arch.input_dim()) {
    throw InvalidInput("batch has " + std::to_string(batch.cols()) + " features, model expects " +
                       std::to_string(arch.input_dim()));
  }
  const auto views = layer_views(arch);
  ForwardTrace trace;
  trace.layer_inputs.reserve(views.size());
  Matrix x = batch;
  for (std::size_t l = 0; l < views.size(); ++l) {
    Matrix z = affine(x, params.values(), views[l]);
    trace.layer_inputs.push_back(std::move(x));
    if (l + 1 == views.size()) {
      trace.probs = softmax_rows(std::move(z));
      break;
    }
    Matrix h(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.data().size(); ++i) h.data()[i] = activate(arch.activation, z.data()[i]);
    trace.pre_activations.push_back(std::move(z));
    x = std::move(h);
  }
  return trace;
}

ProbDist forward(const ParamVector& params, const Matrix& batch) { return forward_trace(params, batch).probs; }

ParamVector backward(const ParamVector& params, const ForwardTrace& trace, const Matrix& dlogits) {
  const ModelArch& arch = params.arch();
  const auto views = layer_views(arch);
  if (dlogits.rows() != trace.probs.rows() || dlogits.cols() != arch.num_classes()) {
    throw InvalidInput("backward: logit gradient shape mismatch");
  }
  std::vector<double> grad(params.size(), 0.0);
  Matrix delta = dlogits;
  for (std::size_t l = views.size(); l-- > 0;) {
    const LayerView& lv = views[l];
    const Matrix& x = trace.layer_inputs[l];
    double* gw = grad.data() + lv.w_offset;
    double* gb = gw + lv.in * lv.out;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto xr = x.row(r);
      auto dr = delta.row(r);
      for (std::size_t o = 0; o < lv.out; ++o) {
        const double d = dr[o];
        if (d == 0.0) continue;
        gb[o] += d;
        double* gwo = gw + o * lv.in;
        for (std::size_t i = 0; i < lv.in; ++i) gwo[i] += d * xr[i];
      }
    }
    if (l == 0) break;
    // propagate into the previous hidden layer
    const double* w = params.values().data() + lv.w_offset;
    const Matrix& z = trace.pre_activations[l - 1];
    Matrix prev(x.rows(), lv.in);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto dr = delta.row(r);
      auto pr = prev.row(r);
      for (std::size_t o = 0; o < lv.out; ++o) {
        const double d = dr[o];
        if (d == 0.0) continue;
        const double* wo = w + o * lv.in;
        for (std::size_t i = 0; i < lv.in; ++i) pr[i] += d * wo[i];
      }
      for (std::size_t i = 0; i < lv.in; ++i) pr[i] *= activate_grad(arch.activation, z(r, i), x(r, i));
    }
    delta = std::move(prev);
  }
  return ParamVector(arch, std::move(grad));
}

double cross_entropy(const Matrix& targets, const ProbDist& preds) {
  check_same_shape(targets, preds.matrix(), "cross_entropy");
  if (targets.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < targets.rows(); ++r) {
    for (std::size_t c = 0; c < targets.cols(); ++c) {
      const double t = targets(r, c);
      if (t != 0.0) total -= t * std::log(std::max(preds(r, c), kProbFloor));
    }
  }
  return total / static_cast<double>(targets.rows());
}

double kl_divergence(const ProbDist& p, const ProbDist& q) {
  check_same_shape(p.matrix(), q.matrix(), "kl_divergence");
  if (p.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    for (std::size_t c = 0; c < p.classes(); ++c) {
      const double pc = p(r, c);
      if (pc > 0.0) total += pc * std::log(pc / std::max(q(r, c), kProbFloor));
    }
  }
  return total / static_cast<double>(p.rows());
}

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Matrix one_hot(const ProbDist& dist) {
  Matrix out(dist.rows(), dist.classes());
  for (std::size_t r = 0; r < dist.rows(); ++r) out(r, argmax(dist.row(r))) = 1.0;
  return out;
}

Matrix one_hot_labels(std::span<const int> labels, std::size_t num_classes) {
  Matrix out(labels.size(), num_classes);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= num_classes) {
      throw InvalidInput("label out of range");
    }
    out(r, static_cast<std::size_t>(labels[r])) = 1.0;
  }
  return out;
}

double accuracy(const ParamVector& params, const Matrix& features, std::span<const int> labels) {
  if (features.rows() != labels.size()) throw InvalidInput("accuracy: label count mismatch");
  if (labels.empty()) return 0.0;
  const ProbDist p = forward(params, features);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    if (static_cast<int>(argmax(p.row(r))) == labels[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "cross_entropy") return LossKind::kCrossEntropy;
  if (name == "kl") return LossKind::kKlToReference;
  if (name == "l1") return LossKind::kL1;
  if (name == "squared_l2") return LossKind::kSquaredL2;
  throw InvalidInput("unknown loss '" + std::string(name) + "'");
}

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

double loss_value(const LossSpec& spec, const ParamVector& params) {
  return std::visit(
      Overloaded{
          [&](const CrossEntropyLoss& s) { return cross_entropy(s.targets.get(), forward(params, s.features.get())); },
          [&](const KlToReferenceLoss& s) {
            return kl_divergence(s.reference.get(), forward(params, s.features.get()));
          },
          [&](const L1Loss&) {
            double acc = 0.0;
            for (double v : params.values()) acc += std::abs(v);
            return acc;
          },
          [&](const SquaredL2Loss& s) {
            if (s.anchor.size() != params.size()) throw InvalidInput("squared_l2: length mismatch");
            double acc = 0.0;
            for (std::size_t i = 0; i < params.size(); ++i) {
              const double d = s.anchor[i] - params[i];
              acc += d * d;
            }
            return acc;
          },
      },
      spec);
}

ParamVector gradient(const LossSpec& spec, const ParamVector& params) {
  return std::visit(
      Overloaded{
          [&](const CrossEntropyLoss& s) {
            const Matrix& t = s.targets.get();
            const ForwardTrace tr = forward_trace(params, s.features.get());
            check_same_shape(t, tr.probs.matrix(), "cross_entropy");
            // d/dz of mean CE through softmax is (q * sum(t) - t) / n
            Matrix d(t.rows(), t.cols());
            const double inv_n = t.rows() ? 1.0 / static_cast<double>(t.rows()) : 0.0;
            for (std::size_t r = 0; r < t.rows(); ++r) {
              double tsum = 0.0;
              for (double v : t.row(r)) tsum += v;
              for (std::size_t c = 0; c < t.cols(); ++c) d(r, c) = (tr.probs(r, c) * tsum - t(r, c)) * inv_n;
            }
            return backward(params, tr, d);
          },
          [&](const KlToReferenceLoss& s) {
            const ProbDist& ref = s.reference.get();
            const ForwardTrace tr = forward_trace(params, s.features.get());
            check_same_shape(ref.matrix(), tr.probs.matrix(), "kl_divergence");
            Matrix d(ref.rows(), ref.classes());
            const double inv_n = ref.rows() ? 1.0 / static_cast<double>(ref.rows()) : 0.0;
            for (std::size_t r = 0; r < ref.rows(); ++r) {
              for (std::size_t c = 0; c < ref.classes(); ++c) d(r, c) = (tr.probs(r, c) - ref(r, c)) * inv_n;
            }
            return backward(params, tr, d);
          },
          [&](const L1Loss&) {
            std::vector<double> g(params.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = params[i] > 0.0 ? 1.0 : (params[i] < 0.0 ? -1.0 : 0.0);
            return ParamVector(params.arch(), std::move(g));
          },
          [&](const SquaredL2Loss& s) {
            if (s.anchor.size() != params.size()) throw InvalidInput("squared_l2: length mismatch");
            std::vector<double> g(params.size());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = -2.0 * (s.anchor[i] - params[i]);
            return ParamVector(params.arch(), std::move(g));
          },
      },
      spec);
}

OptimState lr_step(OptimState state, double val_loss, const LrSchedule& schedule) {
  if (!state.best_val_loss || val_loss < *state.best_val_loss) {
    state.best_val_loss = val_loss;
    state.patience_counter = 0;
    return state;
  }
  if (++state.patience_counter >= schedule.patience) {
    state.lr /= schedule.factor;
    state.patience_counter = 0;
  }
  return state;
}

ParamVector init_params(const ModelArch& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> values(arch.param_count(), 0.0);
  const double scale = arch.activation == Activation::kRelu ? 2.0 : 1.0;
  std::size_t off = 0;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const std::size_t in = arch.layer_dims[l], out = arch.layer_dims[l + 1];
    std::normal_distribution<double> dist(0.0, std::sqrt(scale / static_cast<double>(in)));
    for (std::size_t i = 0; i < in * out; ++i) values[off + i] = dist(rng);
    off += in * out + out;
  }
  return ParamVector(arch, std::move(values));
}

}  // namespace fedmatch
