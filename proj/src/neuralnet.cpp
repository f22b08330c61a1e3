#include "octa/neuralnet.hpp"

#include "octa/csv.hpp"

namespace octa::nn {

double gradient_check(const DenseStack<double>& model, const Mat<double>& X,
                      double eps, double corruption, std::uint64_t mask_seed) {
  const int L = model.n_layers();
  std::vector<Mat<double>> masks;
  masks.reserve(L);
  {
    Rng rng(mask_seed);
    for (int l = 0; l < L; ++l) {
      const int in_dim = static_cast<int>(model.weights[l].cols());
      masks.push_back(corruption > 0.0
                          ? corruption_mask<double>(static_cast<int>(X.rows()),
                                                    in_dim, corruption, rng)
                          : Mat<double>::Ones(X.rows(), in_dim));
    }
  }

  Gradients<double> grads = Gradients<double>::zeros_like(model);
  forward_backward(model, X, masks, &grads);

  DenseStack<double> probe = model;
  const auto numeric = [&](double* param) {
    const double saved = *param;
    const double step = eps * std::max(1.0, std::abs(saved));
    *param = saved + step;
    const double up = forward_backward<double>(probe, X, masks, nullptr);
    *param = saved - step;
    const double down = forward_backward<double>(probe, X, masks, nullptr);
    *param = saved;
    return (up - down) / (2.0 * step);
  };

  double worst = 0;
  const auto compare = [&](double analytic, double* param) {
    const double fd = numeric(param);
    const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-3});
    worst = std::max(worst, std::abs(analytic - fd) / denom);
  };

  for (int l = 0; l < L; ++l) {
    for (Eigen::Index i = 0; i < probe.weights[l].size(); ++i)
      compare(grads.weights[l].data()[i], probe.weights[l].data() + i);
    for (Eigen::Index i = 0; i < probe.bias_enc[l].size(); ++i)
      compare(grads.bias_enc[l].data()[i], probe.bias_enc[l].data() + i);
    for (Eigen::Index i = 0; i < probe.bias_dec[l].size(); ++i)
      compare(grads.bias_dec[l].data()[i], probe.bias_dec[l].data() + i);
  }
  return worst;
}

namespace {

void pack_stack(io::ModelContainer& c, const std::string& prefix,
                const DenseStack<float>& m) {
  c.attrs[prefix + "layers"] = std::to_string(m.n_layers());
  c.attrs[prefix + "alpha"] = io::fmt_g(m.elu_alpha);
  c.attrs[prefix + "corruption"] = io::fmt_g(m.corruption);
  c.attrs[prefix + "activation"] =
      m.activation == Activation::Elu ? "elu" : "linear";
  for (int l = 0; l < m.n_layers(); ++l) {
    const std::string tag = prefix + "l" + std::to_string(l) + ".";
    c.matrices[tag + "W"] = m.weights[l];
    c.matrices[tag + "b_enc"] = m.bias_enc[l];
    c.matrices[tag + "b_dec"] = m.bias_dec[l];
  }
}

DenseStack<float> unpack_stack(const io::ModelContainer& c, const std::string& prefix) {
  DenseStack<float> m;
  const int layers = static_cast<int>(c.attr_int(prefix + "layers"));
  m.elu_alpha = static_cast<float>(c.attr_double(prefix + "alpha"));
  m.corruption = c.attr_double(prefix + "corruption");
  m.activation =
      c.attr(prefix + "activation") == "linear" ? Activation::Linear : Activation::Elu;
  for (int l = 0; l < layers; ++l) {
    const std::string tag = prefix + "l" + std::to_string(l) + ".";
    m.weights.push_back(c.matrix(tag + "W"));
    m.bias_enc.push_back(c.matrix(tag + "b_enc").col(0));
    m.bias_dec.push_back(c.matrix(tag + "b_dec").col(0));
  }
  m.validate();
  return m;
}

}  // namespace

io::ModelContainer to_container(const DenseStack<float>& m) {
  io::ModelContainer c;
  c.kind = "ddae_stack";
  pack_stack(c, "", m);
  return c;
}

DenseStack<float> stack_from_container(const io::ModelContainer& c) {
  if (c.kind != "ddae_stack")
    throw FormatError("expected a ddae_stack container, found '" + c.kind + "'");
  return unpack_stack(c, "");
}

io::ModelContainer to_container(const CompositeEncoder<float>& m) {
  io::ModelContainer c;
  c.kind = "ddae_ent";
  pack_stack(c, "small.", m.small);
  pack_stack(c, "large.", m.large);
  pack_stack(c, "fuse.", m.fuse);
  return c;
}

CompositeEncoder<float> composite_from_container(const io::ModelContainer& c) {
  if (c.kind != "ddae_ent")
    throw FormatError("expected a ddae_ent container, found '" + c.kind + "'");
  return compose_ddae_ent(unpack_stack(c, "small."), unpack_stack(c, "large."),
                          unpack_stack(c, "fuse."));
}

}  // namespace octa::nn
