#include <doctest.h>

#include <cmath>

#include "octa/model_io.hpp"
#include "octa/neuralnet.hpp"
#include "test_util.hpp"

using namespace octa;
using nn::Mat;
using nn::Vec;

TEST_CASE("elu values") {
  CHECK(nn::elu(0.0, 1.0) == 0.0);
  CHECK(nn::elu(2.0, 1.0) == 2.0);
  CHECK(nn::elu(-1.0, 1.0) == doctest::Approx(std::expm1(-1.0)).epsilon(1e-12));
  // Continuity and monotonicity around the knee.
  CHECK(nn::elu(-1e-9, 1.0) == doctest::Approx(0.0).epsilon(1e-8));
  double prev = nn::elu(-5.0, 1.0);
  for (double x = -4.5; x < 3.0; x += 0.5) {
    const double v = nn::elu(x, 1.0);
    CHECK(v > prev);
    prev = v;
  }
}

TEST_CASE("corruption zeroes the exact count per row") {
  Rng rng(1);
  const Mat<float> batch = Mat<float>::Ones(8, 1024);
  const Mat<float> kept = nn::corrupt(batch, 0.5, rng);
  for (int r = 0; r < 8; ++r) {
    int zeros = 0;
    for (int c = 0; c < 1024; ++c) zeros += kept(r, c) == 0.0f;
    CHECK(zeros == 512);
  }
  Rng rng2(2);
  const Mat<float> untouched = nn::corrupt(batch, 0.0, rng2);
  CHECK(untouched == batch);
}

TEST_CASE("corruption positions are uniform (chi-squared)") {
  // 1e5 draws over 8 coordinates, half zeroed each: expected 50000 hits per
  // coordinate. Chi-squared with 7 dof; the 1% critical value is 18.475.
  Rng rng(33);
  const int dim = 8, draws = 100000;
  std::vector<long> zero_count(dim, 0);
  const Mat<double> row = Mat<double>::Ones(1, dim);
  for (int t = 0; t < draws; ++t) {
    const Mat<double> kept = nn::corrupt(row, 0.5, rng);
    for (int c = 0; c < dim; ++c) zero_count[c] += kept(0, c) == 0.0;
  }
  const double expected = draws * 0.5;
  double chi2 = 0;
  for (int c = 0; c < dim; ++c) {
    const double d = zero_count[c] - expected;
    chi2 += d * d / expected;
  }
  CHECK(chi2 < 18.475);
}

TEST_CASE("zero model reconstructs to zero and is deterministic") {
  nn::DenseStack<float> m = nn::make_stack<float>(16, {8, 4}, 0.5, 9);
  for (auto& w : m.weights) w.setZero();
  const Mat<float> x = Mat<float>::Random(3, 16);
  const Mat<float> out = m.reconstruct(x);
  CHECK(out.norm() == 0.0f);

  nn::DenseStack<float> r = nn::make_stack<float>(16, {8, 4}, 0.5, 10);
  CHECK(r.reconstruct(x) == r.reconstruct(x));
}

TEST_CASE("shape errors on dimension mismatch") {
  const nn::DenseStack<float> m = nn::make_stack<float>(16, {8}, 0.0, 3);
  CHECK_THROWS_AS(m.encode(Mat<float>::Zero(2, 17)), ShapeError);
  nn::DenseStack<float> a = nn::make_stack<float>(16, {8}, 0.0, 3);
  nn::DenseStack<float> b = nn::make_stack<float>(16, {8}, 0.0, 4);
  nn::DenseStack<float> fuse = nn::make_stack<float>(99, {4}, 0.0, 5);
  CHECK_THROWS_AS(nn::compose_ddae_ent(a, b, fuse), ShapeError);
}

namespace {

// Independent oracle: naive loop-based forward pass with *separate* decoder
// matrices, so the tied-weight gradient can be split into its two parts.
double naive_forward_loss(const nn::DenseStack<double>& m,
                          const std::vector<Mat<double>>& dec_weights,
                          const Mat<double>& X,
                          const std::vector<Mat<double>>& masks) {
  const int L = m.n_layers();
  const auto act = [&](double v) {
    return m.activation == nn::Activation::Linear ? v : nn::elu(v, m.elu_alpha);
  };
  double loss = 0;
  for (Eigen::Index row = 0; row < X.rows(); ++row) {
    std::vector<double> h(X.cols());
    for (Eigen::Index i = 0; i < X.cols(); ++i) h[i] = X(row, i);
    for (int l = 0; l < L; ++l) {
      std::vector<double> c(h.size());
      for (std::size_t i = 0; i < h.size(); ++i) c[i] = h[i] * masks[l](row, i);
      std::vector<double> next(m.weights[l].rows());
      for (Eigen::Index o = 0; o < m.weights[l].rows(); ++o) {
        double acc = m.bias_enc[l][o];
        for (Eigen::Index i = 0; i < m.weights[l].cols(); ++i)
          acc += m.weights[l](o, i) * c[i];
        next[o] = act(acc);
      }
      h = std::move(next);
    }
    for (int l = L - 1; l >= 0; --l) {
      std::vector<double> next(dec_weights[l].cols());
      for (Eigen::Index o = 0; o < dec_weights[l].cols(); ++o) {
        double acc = m.bias_dec[l][o];
        for (Eigen::Index i = 0; i < dec_weights[l].rows(); ++i)
          acc += dec_weights[l](i, o) * h[i];
        next[o] = act(acc);
      }
      h = std::move(next);
    }
    for (Eigen::Index i = 0; i < X.cols(); ++i) {
      const double e = h[i] - X(row, i);
      loss += e * e;
    }
  }
  return loss / static_cast<double>(X.rows() * X.cols());
}

}  // namespace

TEST_CASE("vectorized forward matches the naive oracle") {
  const nn::DenseStack<double> m = nn::make_stack<double>(10, {7, 4}, 0.0, 21);
  const Mat<double> X = Mat<double>::Random(5, 10);
  std::vector<Mat<double>> masks;
  for (int l = 0; l < m.n_layers(); ++l)
    masks.push_back(Mat<double>::Ones(5, m.weights[l].cols()));
  const double fast = nn::forward_backward<double>(m, X, masks, nullptr);
  const double naive = naive_forward_loss(m, m.weights, X, masks);
  CHECK(fast == doctest::Approx(naive).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences") {
  const nn::DenseStack<double> m = nn::make_stack<double>(8, {6, 4}, 0.0, 5);
  const Mat<double> X = 0.5 * (Mat<double>::Random(6, 8).array() + 1.0);
  CHECK(nn::gradient_check(m, X, 1e-5) < 1e-4);

  // With active corruption masks as well.
  CHECK(nn::gradient_check(m, X, 1e-5, 0.25, 42) < 1e-4);
}

TEST_CASE("tied gradient is the sum of encoder-side and decoder-side parts") {
  const nn::DenseStack<double> m = nn::make_stack<double>(6, {4}, 0.0, 13);
  const Mat<double> X = 0.5 * (Mat<double>::Random(4, 6).array() + 1.0);
  std::vector<Mat<double>> masks = {Mat<double>::Ones(4, 6)};

  nn::Gradients<double> grads = nn::Gradients<double>::zeros_like(m);
  nn::forward_backward(m, X, masks, &grads);

  const double eps = 1e-6;
  for (Eigen::Index o = 0; o < m.weights[0].rows(); ++o) {
    for (Eigen::Index i = 0; i < m.weights[0].cols(); ++i) {
      // Encoder-side partial: perturb only the encoder's copy.
      nn::DenseStack<double> enc = m;
      std::vector<Mat<double>> dec = m.weights;
      enc.weights[0](o, i) += eps;
      const double up_enc = naive_forward_loss(enc, dec, X, masks);
      enc.weights[0](o, i) -= 2 * eps;
      const double dn_enc = naive_forward_loss(enc, dec, X, masks);
      const double g_enc = (up_enc - dn_enc) / (2 * eps);

      // Decoder-side partial: perturb only the decoder's copy.
      dec[0](o, i) += eps;
      const double up_dec = naive_forward_loss(m, dec, X, masks);
      dec[0](o, i) -= 2 * eps;
      const double dn_dec = naive_forward_loss(m, dec, X, masks);
      const double g_dec = (up_dec - dn_dec) / (2 * eps);

      CHECK(grads.weights[0](o, i) ==
            doctest::Approx(g_enc + g_dec).epsilon(1e-4));
    }
  }
}

TEST_CASE("zero input and zero biases give zero gradients") {
  nn::DenseStack<double> m = nn::make_stack<double>(6, {4}, 0.0, 3);
  const Mat<double> X = Mat<double>::Zero(3, 6);
  std::vector<Mat<double>> masks = {Mat<double>::Ones(3, 6)};
  nn::Gradients<double> grads = nn::Gradients<double>::zeros_like(m);
  nn::forward_backward(m, X, masks, &grads);
  // With x = 0 and zero biases every activation is 0, the output equals the
  // target, and the error signal vanishes everywhere.
  CHECK(grads.weights[0].norm() == 0.0);
  CHECK(grads.bias_enc[0].norm() == 0.0);
  CHECK(grads.bias_dec[0].norm() == 0.0);
}

TEST_CASE("training on a low-rank manifold reduces the loss") {
  // Points near a 2-d linear manifold inside [0,1]^8.
  Rng rng(4);
  const int n = 400, d = 8;
  Mat<float> X(n, d);
  for (int i = 0; i < n; ++i) {
    const double a = rng.uniform(), b = rng.uniform();
    for (int j = 0; j < d; ++j) {
      const double v = 0.3 + 0.3 * a * std::sin(j) + 0.3 * b * std::cos(1.7 * j);
      X(i, j) = static_cast<float>(v + rng.uniform(-0.01, 0.01));
    }
  }
  nn::TrainConfig cfg;
  cfg.lr_schedule = {{10, 0.02}};
  cfg.minibatch = 50;
  cfg.corruption = 0.1;
  cfg.seed = 11;
  const auto result = nn::train_ddae(X, {4, 2}, cfg);
  CHECK(result.trace.back().mean_loss < 0.25 * result.trace.front().mean_loss);

  // Epoch losses mostly shrink while the schedule is still descending; the
  // masking noise allows the occasional uptick.
  int upticks = 0;
  for (std::size_t e = 1; e < result.trace.size(); ++e)
    upticks += result.trace[e].mean_loss > result.trace[e - 1].mean_loss;
  CHECK(upticks <= 1);
}

TEST_CASE("fixed seed reproduces training bit for bit") {
  Rng rng(8);
  Mat<float> X(60, 12);
  for (Eigen::Index i = 0; i < X.size(); ++i)
    X.data()[i] = static_cast<float>(rng.uniform());
  nn::TrainConfig cfg;
  cfg.lr_schedule = {{5, 1e-2}};
  cfg.minibatch = 20;
  cfg.corruption = 0.3;
  cfg.seed = 77;
  const auto a = nn::train_ddae(X, {6, 3}, cfg);
  const auto b = nn::train_ddae(X, {6, 3}, cfg);
  for (int l = 0; l < a.model.n_layers(); ++l) {
    CHECK(a.model.weights[l] == b.model.weights[l]);
    CHECK(a.model.bias_enc[l] == b.model.bias_enc[l]);
    CHECK(a.model.bias_dec[l] == b.model.bias_dec[l]);
  }
  for (std::size_t e = 0; e < a.trace.size(); ++e)
    CHECK(a.trace[e].mean_loss == b.trace[e].mean_loss);
}

TEST_CASE("diverging training names the epoch") {
  Rng rng(3);
  Mat<float> X(50, 6);
  for (Eigen::Index i = 0; i < X.size(); ++i)
    X.data()[i] = static_cast<float>(rng.uniform());
  nn::TrainConfig cfg;
  cfg.lr_schedule = {{50, 1e5}};  // absurd rate
  cfg.minibatch = 50;
  cfg.corruption = 0.0;
  cfg.seed = 1;
  CHECK_THROWS_AS(nn::train_ddae(X, std::vector<int>{6}, cfg), ConvergenceError);
}

TEST_CASE("composite encoder dims and equality with manual chaining") {
  const int patch_dim = 64;
  nn::DenseStack<float> d1 = nn::make_stack<float>(patch_dim, {32, 16}, 0.5, 1);
  nn::DenseStack<float> d2 = nn::make_stack<float>(patch_dim, {32, 16}, 0.5, 2);
  nn::DenseStack<float> d3 = nn::make_stack<float>(32, {8}, 0.5, 3);
  const auto ent = nn::compose_ddae_ent(d1, d2, d3);
  CHECK(ent.dim() == 8);

  Rng rng(5);
  Mat<float> Xs(3, patch_dim), Xl(3, patch_dim);
  for (Eigen::Index i = 0; i < Xs.size(); ++i) {
    Xs.data()[i] = static_cast<float>(rng.uniform());
    Xl.data()[i] = static_cast<float>(rng.uniform());
  }
  const Mat<float> z = ent.encode(Xs, Xl);
  CHECK(z.cols() == 8);

  // Identical inputs produce identical codes; manual chaining agrees.
  CHECK(ent.encode(Xs, Xl) == z);
  const Mat<float> ys = d1.encode(Xs);
  const Mat<float> yl = d2.encode(Xl);
  Mat<float> cat(3, 32);
  cat << ys, yl;
  CHECK(d3.encode(cat) == z);
}

TEST_CASE("published stack shapes chain correctly") {
  const nn::DenseStack<float> d1 =
      nn::make_stack<float>(32 * 32, {2048, 1024, 512}, 0.5, 1);
  CHECK(d1.code_dim() == 512);
  const nn::DenseStack<float> d3 = nn::make_stack<float>(1024, {256}, 0.5, 2);
  CHECK(d3.input_dim() == 512 + 512);
  CHECK(nn::compose_ddae_ent(d1, d1, d3).dim() == 256);
}

TEST_CASE("linear tied autoencoder approaches the PCA optimum") {
  // Rank-4 data in 8 dims, code width 2: the best possible MSE is the mean
  // residual variance outside the top-2 principal subspace.
  Rng rng(19);
  const int n = 300, d = 8, rank = 4;
  Mat<double> basis = Mat<double>::Zero(rank, d);
  for (int k = 0; k < rank; ++k)
    for (int j = 0; j < d; ++j) basis(k, j) = rng.normal();
  for (int k = 0; k < rank; ++k) {  // Gram-Schmidt
    for (int p = 0; p < k; ++p)
      basis.row(k) -= basis.row(k).dot(basis.row(p)) * basis.row(p);
    basis.row(k) /= basis.row(k).norm();
  }
  const std::vector<double> scales = {1.0, 0.6, 0.25, 0.15};
  Mat<float> X(n, d);
  Mat<double> Xd(n, d);
  for (int i = 0; i < n; ++i) {
    Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(d);
    for (int k = 0; k < rank; ++k) x += scales[k] * rng.normal() * basis.row(k);
    Xd.row(i) = x;
    X.row(i) = x.cast<float>();
  }

  const Eigen::RowVectorXd mean = Xd.colwise().mean();
  const Mat<double> centered = Xd.rowwise() - mean;
  const Mat<double> cov = centered.transpose() * centered / double(n);
  Eigen::SelfAdjointEigenSolver<Mat<double>> eig(cov);
  double residual = 0;  // all but the top-2 eigenvalues
  for (int i = 0; i < d - 2; ++i) residual += eig.eigenvalues()[i];
  const double pca_loss = residual / d;

  nn::TrainConfig cfg;
  cfg.lr_schedule = {{400, 0.1}, {200, 0.02}};
  cfg.minibatch = 50;
  cfg.momentum = 0.9;
  cfg.corruption = 0.0;
  cfg.seed = 5;
  const auto result = nn::train_ddae(X, std::vector<int>{2}, cfg,
                                     nn::Activation::Linear);
  CHECK(result.trace.back().mean_loss <= 1.05 * pca_loss);
}

TEST_CASE("stack and composite containers round trip bit for bit") {
  TempDir tmp;
  const nn::DenseStack<float> m = nn::make_stack<float>(12, {6, 3}, 0.5, 7);
  io::save_model(m, tmp.path / "stack.octm");
  const auto loaded = io::load_model_as<nn::DenseStack<float>>(tmp.path / "stack.octm");
  for (int l = 0; l < m.n_layers(); ++l) CHECK(loaded.weights[l] == m.weights[l]);

  const auto ent = nn::compose_ddae_ent(nn::make_stack<float>(9, {4}, 0.5, 1),
                                        nn::make_stack<float>(9, {4}, 0.5, 2),
                                        nn::make_stack<float>(8, {2}, 0.5, 3));
  io::save_model(ent, tmp.path / "ent.octm");
  const auto ent2 =
      io::load_model_as<nn::CompositeEncoder<float>>(tmp.path / "ent.octm");
  Rng rng(2);
  Mat<float> Xs(2, 9), Xl(2, 9);
  for (Eigen::Index i = 0; i < Xs.size(); ++i) {
    Xs.data()[i] = static_cast<float>(rng.uniform());
    Xl.data()[i] = static_cast<float>(rng.uniform());
  }
  CHECK(ent.encode(Xs, Xl) == ent2.encode(Xs, Xl));
}
