#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "octa/errors.hpp"
#include "octa/model_container.hpp"
#include "octa/rng.hpp"

namespace octa::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

enum class Activation { Elu, Linear };

/// Exponential linear unit: x for x > 0, alpha*(exp(x)-1) otherwise.
inline double elu(double x, double alpha = 1.0) {
  return x > 0.0 ? x : alpha * (std::exp(x) - 1.0);
}

template <typename S>
Mat<S> activate(const Mat<S>& z, Activation act, S alpha) {
  if (act == Activation::Linear) return z;
  return z.unaryExpr([alpha](S v) {
    return v > S(0) ? v : alpha * (std::exp(v) - S(1));
  });
}

/// Derivative with respect to the pre-activation.
template <typename S>
Mat<S> activate_deriv(const Mat<S>& z, Activation act, S alpha) {
  if (act == Activation::Linear) return Mat<S>::Ones(z.rows(), z.cols());
  return z.unaryExpr([alpha](S v) { return v > S(0) ? S(1) : alpha * std::exp(v); });
}

/// Tied-weight dense autoencoder: the decoder applies the transposed encoder
/// matrices in reverse order. Biases are separate per direction; only the
/// weight matrices are shared.
template <typename S>
struct DenseStack {
  std::vector<Mat<S>> weights;   // layer l: (n_l x n_{l-1})
  std::vector<Vec<S>> bias_enc;  // size n_l
  std::vector<Vec<S>> bias_dec;  // size n_{l-1}
  S elu_alpha = S(1);
  Activation activation = Activation::Elu;
  double corruption = 0.5;  // training-time masking fraction

  int n_layers() const { return static_cast<int>(weights.size()); }
  int input_dim() const {
    return weights.empty() ? 0 : static_cast<int>(weights.front().cols());
  }
  int code_dim() const {
    return weights.empty() ? 0 : static_cast<int>(weights.back().rows());
  }

  /// Inference-mode encoding; rows of X are samples. No corruption.
  Mat<S> encode(const Mat<S>& X) const {
    if (X.cols() != input_dim())
      throw ShapeError("encode: input has " + std::to_string(X.cols()) +
                       " dims, expected " + std::to_string(input_dim()));
    Mat<S> h = X;
    for (int l = 0; l < n_layers(); ++l) {
      Mat<S> z = h * weights[l].transpose();
      z.rowwise() += bias_enc[l].transpose();
      h = activate(z, activation, elu_alpha);
    }
    return h;
  }

  Mat<S> decode(const Mat<S>& code) const {
    if (code.cols() != code_dim())
      throw ShapeError("decode: code has " + std::to_string(code.cols()) +
                       " dims, expected " + std::to_string(code_dim()));
    Mat<S> v = code;
    for (int l = n_layers() - 1; l >= 0; --l) {
      Mat<S> p = v * weights[l];
      p.rowwise() += bias_dec[l].transpose();
      v = activate(p, activation, elu_alpha);
    }
    return v;
  }

  /// decoder(encoder(x)); deterministic.
  Mat<S> reconstruct(const Mat<S>& X) const { return decode(encode(X)); }

  Vec<S> encode_one(const Vec<S>& x) const {
    return encode(Mat<S>(x.transpose())).row(0);
  }
  Vec<S> reconstruct_one(const Vec<S>& x) const {
    return reconstruct(Mat<S>(x.transpose())).row(0);
  }

  void validate() const {
    if (weights.empty()) throw ValueError("stack has no layers");
    for (int l = 0; l < n_layers(); ++l) {
      if (bias_enc[l].size() != weights[l].rows() ||
          bias_dec[l].size() != weights[l].cols())
        throw ShapeError("bias dimensions do not chain at layer " + std::to_string(l));
      if (l > 0 && weights[l].cols() != weights[l - 1].rows())
        throw ShapeError("layer dimensions do not chain at layer " + std::to_string(l));
    }
  }
};

/// Scaled uniform initialization: U(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
template <typename S>
DenseStack<S> make_stack(int input_dim, const std::vector<int>& hidden_dims,
                         double corruption, std::uint64_t seed,
                         Activation act = Activation::Elu) {
  if (input_dim < 1 || hidden_dims.empty())
    throw ValueError("stack needs an input dim and at least one layer");
  if (corruption < 0.0 || corruption >= 1.0)
    throw ValueError("corruption must lie in [0, 1)");
  DenseStack<S> m;
  m.activation = act;
  m.corruption = corruption;
  Rng rng(seed);
  int in_dim = input_dim;
  for (const int out_dim : hidden_dims) {
    if (out_dim < 1) throw ValueError("layer widths must be positive");
    const double s = std::sqrt(6.0 / (in_dim + out_dim));
    Mat<S> w(out_dim, in_dim);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        w(r, c) = static_cast<S>(rng.uniform(-s, s));
    m.weights.push_back(std::move(w));
    m.bias_enc.push_back(Vec<S>::Zero(out_dim));
    m.bias_dec.push_back(Vec<S>::Zero(in_dim));
    in_dim = out_dim;
  }
  return m;
}

/// 0/1 masks with exactly round(fraction*cols) zeros per row, positions
/// uniform without replacement.
template <typename S>
Mat<S> corruption_mask(int rows, int cols, double fraction, Rng& rng) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw ValueError("corruption fraction must lie in [0, 1)");
  Mat<S> mask = Mat<S>::Ones(rows, cols);
  const int k = static_cast<int>(std::llround(fraction * cols));
  if (k == 0) return mask;
  for (int r = 0; r < rows; ++r)
    for (const int c : rng.sample_indices(cols, k)) mask(r, c) = S(0);
  return mask;
}

/// Masking-noise corruption of a sample batch (rows = samples).
template <typename S>
Mat<S> corrupt(const Mat<S>& batch, double fraction, Rng& rng) {
  return batch.cwiseProduct(corruption_mask<S>(
      static_cast<int>(batch.rows()), static_cast<int>(batch.cols()), fraction, rng));
}

template <typename S>
struct Gradients {
  std::vector<Mat<S>> weights;
  std::vector<Vec<S>> bias_enc;
  std::vector<Vec<S>> bias_dec;

  static Gradients zeros_like(const DenseStack<S>& m) {
    Gradients g;
    for (int l = 0; l < m.n_layers(); ++l) {
      g.weights.push_back(Mat<S>::Zero(m.weights[l].rows(), m.weights[l].cols()));
      g.bias_enc.push_back(Vec<S>::Zero(m.bias_enc[l].size()));
      g.bias_dec.push_back(Vec<S>::Zero(m.bias_dec[l].size()));
    }
    return g;
  }
};

/// MSE forward pass (and, when grads != nullptr, backward pass) with the
/// given per-encoder-layer input masks. masks[l] multiplies the input of
/// encoder layer l. The tied weight gradient accumulates both the encoder
/// and the decoder contribution of each matrix.
template <typename S>
S forward_backward(const DenseStack<S>& m, const Mat<S>& X,
                   const std::vector<Mat<S>>& masks, Gradients<S>* grads) {
  m.validate();
  const int L = m.n_layers();
  if (X.cols() != m.input_dim()) throw ShapeError("batch width mismatch");
  if (static_cast<int>(masks.size()) != L)
    throw ShapeError("expected one mask per encoder layer");

  const S alpha = m.elu_alpha;
  const auto B = X.rows();
  const S inv_bd = S(1) / static_cast<S>(B * X.cols());

  // Encoder. corrupted[l] feeds layer l; pre[l] is its pre-activation.
  std::vector<Mat<S>> corrupted(L), enc_pre(L);
  Mat<S> h = X;
  for (int l = 0; l < L; ++l) {
    corrupted[l] = h.cwiseProduct(masks[l]);
    enc_pre[l] = corrupted[l] * m.weights[l].transpose();
    enc_pre[l].rowwise() += m.bias_enc[l].transpose();
    h = activate(enc_pre[l], m.activation, alpha);
  }

  // Decoder mirrors the encoder; dec_in[l] enters the step that applies
  // weights[l] transposed.
  std::vector<Mat<S>> dec_in(L), dec_pre(L);
  Mat<S> v = h;
  for (int l = L - 1; l >= 0; --l) {
    dec_in[l] = v;
    dec_pre[l] = v * m.weights[l];
    dec_pre[l].rowwise() += m.bias_dec[l].transpose();
    v = activate(dec_pre[l], m.activation, alpha);
  }

  const Mat<S> err = v - X;
  const S loss = err.squaredNorm() * inv_bd;
  if (grads == nullptr) return loss;

  Mat<S> g = err * (S(2) * inv_bd);  // dL/d(output)
  for (int l = 0; l < L; ++l) {
    const Mat<S> delta =
        g.cwiseProduct(activate_deriv(dec_pre[l], m.activation, alpha));
    grads->weights[l].noalias() += dec_in[l].transpose() * delta;
    grads->bias_dec[l].noalias() += delta.colwise().sum().transpose();
    g.noalias() = delta * m.weights[l].transpose();
  }
  // g is now dL/d(code).
  for (int l = L - 1; l >= 0; --l) {
    const Mat<S> delta =
        g.cwiseProduct(activate_deriv(enc_pre[l], m.activation, alpha));
    grads->weights[l].noalias() += delta.transpose() * corrupted[l];
    grads->bias_enc[l].noalias() += delta.colwise().sum().transpose();
    if (l > 0) {
      g.noalias() = delta * m.weights[l];
      g = g.cwiseProduct(masks[l]);
    }
  }
  return loss;
}

struct LrPhase {
  int epochs = 0;
  double rate = 0;
};

struct TrainConfig {
  std::vector<LrPhase> lr_schedule = {{150, 1e-4}, {150, 1e-5}};
  int minibatch = 50;
  double momentum = 0.9;
  double corruption = 0.5;
  std::uint64_t seed = 0;

  int total_epochs() const {
    int n = 0;
    for (const auto& p : lr_schedule) n += p.epochs;
    return n;
  }
  void validate() const {
    if (minibatch < 1) throw ValueError("minibatch must be at least 1");
    if (corruption < 0.0 || corruption >= 1.0)
      throw ValueError("corruption must lie in [0, 1)");
    if (lr_schedule.empty()) throw ValueError("empty learning-rate schedule");
    for (const auto& p : lr_schedule)
      if (p.rate <= 0.0 || p.epochs < 0) throw ValueError("invalid learning-rate phase");
  }
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0;
  double lr = 0;
};

template <typename S>
struct TrainResult {
  DenseStack<S> model;
  std::vector<EpochStats> trace;
};

/// Joint end-to-end training of a tied autoencoder with SGD + momentum on
/// MSE, corrupting the input of every encoder layer each minibatch.
template <typename S>
TrainResult<S> train_ddae(const Mat<S>& patches, const std::vector<int>& hidden_dims,
                          const TrainConfig& cfg,
                          Activation act = Activation::Elu) {
  cfg.validate();
  const auto n = static_cast<int>(patches.rows());
  if (n < cfg.minibatch)
    throw ValueError("need at least one full minibatch of samples");

  TrainResult<S> out;
  out.model = make_stack<S>(static_cast<int>(patches.cols()), hidden_dims,
                            cfg.corruption, Rng::derive(cfg.seed, "init"), act);
  DenseStack<S>& model = out.model;
  const int L = model.n_layers();

  Gradients<S> velocity = Gradients<S>::zeros_like(model);
  Rng rng_shuffle(Rng::derive(cfg.seed, "shuffle"));
  Rng rng_corrupt(Rng::derive(cfg.seed, "corrupt"));

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  std::vector<int> layer_in_dims(L);
  for (int l = 0; l < L; ++l)
    layer_in_dims[l] = static_cast<int>(model.weights[l].cols());

  int epoch = 0;
  for (const auto& phase : cfg.lr_schedule) {
    const S lr = static_cast<S>(phase.rate);
    for (int e = 0; e < phase.epochs; ++e, ++epoch) {
      rng_shuffle.shuffle(order.begin(), order.end());
      double loss_sum = 0;
      long long sample_count = 0;
      for (int start = 0; start < n; start += cfg.minibatch) {
        const int b = std::min(cfg.minibatch, n - start);
        Mat<S> batch(b, patches.cols());
        for (int i = 0; i < b; ++i) batch.row(i) = patches.row(order[start + i]);

        std::vector<Mat<S>> masks;
        masks.reserve(L);
        for (int l = 0; l < L; ++l)
          masks.push_back(
              corruption_mask<S>(b, layer_in_dims[l], cfg.corruption, rng_corrupt));

        Gradients<S> grads = Gradients<S>::zeros_like(model);
        const S loss = forward_backward(model, batch, masks, &grads);
        loss_sum += static_cast<double>(loss) * b;
        sample_count += b;

        for (int l = 0; l < L; ++l) {
          velocity.weights[l] = cfg.momentum * velocity.weights[l] - lr * grads.weights[l];
          velocity.bias_enc[l] = cfg.momentum * velocity.bias_enc[l] - lr * grads.bias_enc[l];
          velocity.bias_dec[l] = cfg.momentum * velocity.bias_dec[l] - lr * grads.bias_dec[l];
          model.weights[l] += velocity.weights[l];
          model.bias_enc[l] += velocity.bias_enc[l];
          model.bias_dec[l] += velocity.bias_dec[l];
        }
      }
      const double mean_loss = loss_sum / static_cast<double>(sample_count);
      if (!std::isfinite(mean_loss))
        throw ConvergenceError("training diverged at epoch " + std::to_string(epoch));
      out.trace.push_back({epoch, mean_loss, phase.rate});
    }
  }
  return out;
}

/// Compares the analytic gradient of the masked MSE objective with central
/// finite differences over every parameter; returns the maximum relative
/// error |a - n| / max(|a|, |n|, 1e-3). Meant for 64-bit stacks.
double gradient_check(const DenseStack<double>& model, const Mat<double>& X,
                      double eps, double corruption = 0.0,
                      std::uint64_t mask_seed = 0);

/// Composite multi-scale encoder: z = fuse([enc_small(xs) || enc_large(xl)]).
template <typename S>
struct CompositeEncoder {
  DenseStack<S> small;
  DenseStack<S> large;
  DenseStack<S> fuse;

  int dim() const { return fuse.code_dim(); }

  Mat<S> encode(const Mat<S>& Xs, const Mat<S>& Xl) const {
    if (Xs.rows() != Xl.rows()) throw ShapeError("scale batches differ in rows");
    const Mat<S> ys = small.encode(Xs);
    const Mat<S> yl = large.encode(Xl);
    Mat<S> cat(ys.rows(), ys.cols() + yl.cols());
    cat << ys, yl;
    return fuse.encode(cat);
  }

  Vec<S> encode_one(const Vec<S>& xs, const Vec<S>& xl) const {
    return encode(Mat<S>(xs.transpose()), Mat<S>(xl.transpose())).row(0);
  }
};

/// Wires three trained stacks into the composite encoder, checking that the
/// two scale codes concatenate to the fusion stack's input width.
template <typename S>
CompositeEncoder<S> compose_ddae_ent(DenseStack<S> small, DenseStack<S> large,
                                     DenseStack<S> fuse) {
  small.validate();
  large.validate();
  fuse.validate();
  if (small.code_dim() + large.code_dim() != fuse.input_dim())
    throw ShapeError("scale code dims (" + std::to_string(small.code_dim()) + "+" +
                     std::to_string(large.code_dim()) +
                     ") do not match the fusion input dim " +
                     std::to_string(fuse.input_dim()));
  CompositeEncoder<S> out;
  out.small = std::move(small);
  out.large = std::move(large);
  out.fuse = std::move(fuse);
  return out;
}

io::ModelContainer to_container(const DenseStack<float>& m);
DenseStack<float> stack_from_container(const io::ModelContainer& c);
io::ModelContainer to_container(const CompositeEncoder<float>& m);
CompositeEncoder<float> composite_from_container(const io::ModelContainer& c);

}  // namespace octa::nn
