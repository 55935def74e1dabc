#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/rng.hpp"
#include "stereoprobe/model/ops.hpp"

namespace stereoprobe {

// Fully connected classifier: GELU hidden layers with inverted dropout, a
// linear output layer and softmax cross-entropy loss.
template <typename Scalar>
struct Mlp {
  using Matrix =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  std::vector<Matrix> weights;  // [in x out] per layer
  std::vector<Row> biases;
  std::vector<double> dropout;  // one rate per hidden layer

  std::size_t layer_count() const { return weights.size(); }
  std::size_t input_size() const {
    return weights.empty() ? 0 : static_cast<std::size_t>(weights.front().rows());
  }
  std::size_t output_size() const {
    return weights.empty() ? 0 : static_cast<std::size_t>(weights.back().cols());
  }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s{input_size()};
    for (const auto& w : weights) s.push_back(static_cast<std::size_t>(w.cols()));
    return s;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    }
    return n;
  }

  template <typename T>
  Mlp<T> cast() const {
    Mlp<T> out;
    for (const auto& w : weights) out.weights.push_back(w.template cast<T>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<T>());
    out.dropout = dropout;
    return out;
  }

  void check_finite() const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (!weights[l].allFinite() || !biases[l].allFinite()) {
        throw TrainingError("probe parameters became non-finite in layer " +
                            std::to_string(l));
      }
    }
  }
};

// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation,
// drawn row-major layer by layer from one seeded stream.
template <typename Scalar>
Mlp<Scalar> make_mlp(const std::vector<std::size_t>& sizes,
                     const std::vector<double>& dropout, std::uint64_t seed) {
  if (sizes.size() < 2) throw ConfigError("probe needs at least two layer sizes");
  if (dropout.size() != sizes.size() - 2) {
    throw ConfigError("probe needs one dropout rate per hidden layer");
  }
  for (double p : dropout) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  }
  Mlp<Scalar> net;
  net.dropout = dropout;
  Rng rng = make_rng(seed, "probe-init");
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    if (sizes[l] == 0 || sizes[l + 1] == 0) throw ConfigError("empty probe layer");
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
    typename Mlp<Scalar>::Matrix w(sizes[l], sizes[l + 1]);
    typename Mlp<Scalar>::Row b(sizes[l + 1]);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      w.data()[i] = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
    }
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      b[i] = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
    }
    net.weights.push_back(std::move(w));
    net.biases.push_back(std::move(b));
  }
  return net;
}

template <typename Scalar>
struct MlpTape {
  using Matrix = typename Mlp<Scalar>::Matrix;
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // hidden pre-activations
  std::vector<Matrix> keep;    // dropout scales (empty when inactive)
};

// Logits for a batch. Dropout is applied only when `rng` is given.
template <typename Scalar>
typename Mlp<Scalar>::Matrix mlp_forward(const Mlp<Scalar>& net,
                                         const typename Mlp<Scalar>::Matrix& x,
                                         Rng* rng = nullptr,
                                         MlpTape<Scalar>* tape = nullptr) {
  using Matrix = typename Mlp<Scalar>::Matrix;
  if (static_cast<std::size_t>(x.cols()) != net.input_size()) {
    throw InputError("probe input has " + std::to_string(x.cols()) +
                     " features, expected " + std::to_string(net.input_size()));
  }
  if (tape != nullptr) *tape = {};
  Matrix a = x;
  const std::size_t L = net.layer_count();
  for (std::size_t l = 0; l < L; ++l) {
    Matrix z = a * net.weights[l];
    z.rowwise() += net.biases[l];
    if (tape != nullptr) tape->inputs.push_back(a);
    if (l + 1 == L) return z;
    Matrix h = z.unaryExpr([](Scalar v) { return gelu(v); });
    Matrix keep;
    const double p = net.dropout[l];
    if (rng != nullptr && p > 0.0) {
      keep.resize(h.rows(), h.cols());
      const auto scale = static_cast<Scalar>(1.0 / (1.0 - p));
      for (Eigen::Index i = 0; i < keep.size(); ++i) {
        keep.data()[i] = uniform01(*rng) < p ? Scalar(0) : scale;
      }
      h = h.cwiseProduct(keep);
    }
    if (tape != nullptr) {
      tape->pre.push_back(std::move(z));
      tape->keep.push_back(std::move(keep));
    }
    a = std::move(h);
  }
  return a;
}

template <typename Scalar>
struct MlpGradients {
  std::vector<typename Mlp<Scalar>::Matrix> weights;
  std::vector<typename Mlp<Scalar>::Row> biases;
};

// Mean cross-entropy of the batch; fills `grads` when given.
template <typename Scalar>
double mlp_loss(const Mlp<Scalar>& net, const typename Mlp<Scalar>::Matrix& x,
                const std::vector<int>& labels, Rng* rng = nullptr,
                MlpGradients<Scalar>* grads = nullptr) {
  using Matrix = typename Mlp<Scalar>::Matrix;
  const auto B = x.rows();
  if (static_cast<std::size_t>(B) != labels.size() || B == 0) {
    throw InputError("probe batch and label counts differ");
  }
  MlpTape<Scalar> tape;
  const Matrix logits = mlp_forward(net, x, rng, grads ? &tape : nullptr);
  const auto K = logits.cols();
  Matrix probs(B, K);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < B; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= K) throw InputError("probe label out of range");
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < K; ++c) m = std::max(m, double(logits(r, c)));
    double sum = 0.0;
    for (Eigen::Index c = 0; c < K; ++c) sum += std::exp(double(logits(r, c)) - m);
    const double lse = m + std::log(sum);
    loss += lse - double(logits(r, y));
    for (Eigen::Index c = 0; c < K; ++c) {
      probs(r, c) = static_cast<Scalar>(std::exp(double(logits(r, c)) - lse));
    }
  }
  loss /= static_cast<double>(B);
  if (grads == nullptr) return loss;

  Matrix dz = probs;
  for (Eigen::Index r = 0; r < B; ++r) dz(r, labels[static_cast<std::size_t>(r)]) -= Scalar(1);
  dz /= static_cast<Scalar>(B);
  const std::size_t L = net.layer_count();
  grads->weights.assign(L, {});
  grads->biases.assign(L, {});
  for (std::size_t l = L; l-- > 0;) {
    grads->weights[l] = tape.inputs[l].transpose() * dz;
    grads->biases[l] = dz.colwise().sum();
    if (l == 0) break;
    Matrix da = dz * net.weights[l].transpose();
    if (tape.keep[l - 1].size() != 0) da = da.cwiseProduct(tape.keep[l - 1]);
    dz = da.cwiseProduct(
        tape.pre[l - 1].unaryExpr([](Scalar v) { return gelu_derivative(v); }));
  }
  return loss;
}

// Largest relative error between analytic and central-difference gradients
// over every parameter, with relative error |a - n| / max(|a| + |n|, 1e-6).
// Runs in double precision with dropout off.
template <typename Scalar>
double gradient_check(const Mlp<Scalar>& model,
                      const typename Mlp<Scalar>::Matrix& x,
                      const std::vector<int>& labels, double step = 1e-4) {
  Mlp<double> net = model.template cast<double>();
  const Mlp<double>::Matrix xd = x.template cast<double>();
  MlpGradients<double> g;
  mlp_loss(net, xd, labels, nullptr, &g);
  double worst = 0.0;
  auto probe = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + step;
    const double up = mlp_loss(net, xd, labels);
    param = saved - step;
    const double down = mlp_loss(net, xd, labels);
    param = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double rel = std::abs(analytic - numeric) /
                       std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
    worst = std::max(worst, rel);
  };
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    for (Eigen::Index i = 0; i < net.weights[l].size(); ++i) {
      probe(net.weights[l].data()[i], g.weights[l].data()[i]);
    }
    for (Eigen::Index i = 0; i < net.biases[l].size(); ++i) {
      probe(net.biases[l].data()[i], g.biases[l].data()[i]);
    }
  }
  return worst;
}

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
class Adam {
 public:
  Adam(const Mlp<Scalar>& net, AdamOptions options) : options_(options) {
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
      m_w_.push_back(Mlp<Scalar>::Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
      v_w_.push_back(m_w_.back());
      m_b_.push_back(Mlp<Scalar>::Row::Zero(net.biases[l].size()));
      v_b_.push_back(m_b_.back());
    }
  }

  void step(Mlp<Scalar>& net, const MlpGradients<Scalar>& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
      update(net.weights[l].data(), g.weights[l].data(), m_w_[l].data(),
             v_w_[l].data(), static_cast<std::size_t>(net.weights[l].size()), c1, c2);
      update(net.biases[l].data(), g.biases[l].data(), m_b_[l].data(),
             v_b_[l].data(), static_cast<std::size_t>(net.biases[l].size()), c1, c2);
    }
  }

 private:
  void update(Scalar* p, const Scalar* g, Scalar* m, Scalar* v, std::size_t n,
              double c1, double c2) const {
    const auto b1 = static_cast<Scalar>(options_.beta1);
    const auto b2 = static_cast<Scalar>(options_.beta2);
    const auto lr = static_cast<Scalar>(options_.learning_rate);
    const auto eps = static_cast<Scalar>(options_.epsilon);
    const auto s1 = static_cast<Scalar>(1.0 / c1);
    const auto s2 = static_cast<Scalar>(1.0 / c2);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (Scalar(1) - b1) * g[i];
      v[i] = b2 * v[i] + (Scalar(1) - b2) * g[i] * g[i];
      p[i] -= lr * (m[i] * s1) / (std::sqrt(v[i] * s2) + eps);
    }
  }

  AdamOptions options_;
  std::uint64_t t_ = 0;
  std::vector<typename Mlp<Scalar>::Matrix> m_w_, v_w_;
  std::vector<typename Mlp<Scalar>::Row> m_b_, v_b_;
};

// Eval-mode logits from first-layer pre-activations `pre1` ([rows x h1],
// consumed), through the row-stable kernel.
inline std::vector<float> mlp_logits_from_first(const Mlp<float>& net,
                                                std::vector<float> pre1,
                                                std::size_t rows) {
  std::vector<float> a = std::move(pre1);
  std::vector<float> z;
  for (std::size_t l = 1; l < net.layer_count(); ++l) {
    for (float& v : a) v = gelu(v);
    const auto& w = net.weights[l];
    const auto in = static_cast<std::size_t>(w.rows());
    const auto out = static_cast<std::size_t>(w.cols());
    z.assign(rows * out, 0.0f);
    linear(a.data(), rows, w.data(), in, out, net.biases[l].data(), z.data());
    a.swap(z);
  }
  return a;
}

// Eval-mode logits through the row-stable kernel, so a row's prediction does
// not depend on the rest of the batch. `x` is row-major [rows x input].
inline std::vector<float> mlp_logits_stable(const Mlp<float>& net,
                                            const float* x, std::size_t rows) {
  const auto& w = net.weights.front();
  const auto in = static_cast<std::size_t>(w.rows());
  const auto out = static_cast<std::size_t>(w.cols());
  std::vector<float> pre1(rows * out, 0.0f);
  linear(x, rows, w.data(), in, out, net.biases.front().data(), pre1.data());
  return mlp_logits_from_first(net, std::move(pre1), rows);
}

// Index of the largest logit; ties go to the lower class.
inline int argmax_row(const float* logits, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < k; ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return static_cast<int>(best);
}

}  // namespace stereoprobe
