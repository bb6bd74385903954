#include "qcnn/checks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace qcnn::checks {

namespace {

// Conjugates every quaternion of a [*,4] buffer by the unit rotation r.
std::vector<double> rotate_quats(std::span<const double> buf, const Quaternion& r) {
  std::vector<double> out(buf.size());
  const Quaternion rinv = conjugate(r);  // unit rotation
  for (std::size_t i = 0; i + 3 < buf.size(); i += 4) {
    const Quaternion q{buf[i], buf[i + 1], buf[i + 2], buf[i + 3]};
    const Quaternion w = hamilton_product(hamilton_product(r, q), rinv);
    out[i] = w.w;
    out[i + 1] = w.x;
    out[i + 2] = w.y;
    out[i + 3] = w.z;
  }
  return out;
}

}  // namespace

EquivarianceReport layer_equivariance_trials(int trials, std::uint64_t seed) {
  const int tap_choices[] = {1, 3, 5, 7};
  const int ch_choices[] = {1, 2, 4};
  const int pad_choices[] = {0, 2};
  RandomStream root(seed);
  EquivarianceReport rep;
  rep.trials = trials;
  for (int trial = 0; trial < trials; ++trial) {
    RandomStream rng = root.fork("equivariance-trial", static_cast<std::uint64_t>(trial));
    const int L = tap_choices[rng.index(4)];
    const int cin = ch_choices[rng.index(3)];
    const int cout = ch_choices[rng.index(3)];
    const int padding = pad_choices[rng.index(2)];
    const int stride = 1 + static_cast<int>(rng.index(2));
    const nn::QConvForm form =
        rng.index(2) == 0 ? nn::QConvForm::PivotInverse : nn::QConvForm::TapInverse;
    const int n = L + 2 + static_cast<int>(rng.index(8));

    std::vector<double> x(static_cast<std::size_t>(cin) * n * 4);
    for (double& v : x) v = rng.normal();
    std::vector<double> params(static_cast<std::size_t>(nn::qconv_param_count(L, cin, cout)));
    for (double& v : params) v = rng.normal();
    const Quaternion r = rng.unit_quaternion();

    ad::Tape t1;
    ad::Var y1 = nn::qconv_op(t1, t1.constant({1, cin, n, 4}, x),
                              t1.constant({static_cast<int>(params.size())}, params), L, stride,
                              padding, cout, form);
    const std::vector<double> fx(y1.value().begin(), y1.value().end());
    const std::vector<double> r_fx = rotate_quats(fx, r);

    const std::vector<double> rx = rotate_quats(x, r);
    ad::Tape t2;
    ad::Var y2 = nn::qconv_op(t2, t2.constant({1, cin, n, 4}, rx),
                              t2.constant({static_cast<int>(params.size())}, params), L, stride,
                              padding, cout, form);
    auto f_rx = y2.value();

    for (std::size_t i = 0; i < f_rx.size(); ++i)
      rep.max_deviation = std::max(rep.max_deviation, std::fabs(r_fx[i] - f_rx[i]));
  }
  return rep;
}

double model_invariance_max_rel(nn::Model& model, std::span<const double> batch, int batch_size,
                                int rotations, std::uint64_t seed) {
  const int T = model.input_length();
  const int K = model.num_classes();
  const std::vector<double> base = model.eval_logits(batch, batch_size);
  RandomStream rng(seed);
  double worst = 0.0;
  std::vector<double> rotated(batch.size());
  for (int it = 0; it < rotations; ++it) {
    const Quaternion r = rng.unit_quaternion();
    for (int b = 0; b < batch_size; ++b)
      for (int t = 0; t < T; ++t) {
        const double* s = batch.data() + (static_cast<std::size_t>(b) * T + t) * 3;
        const Vector3 w = vector_part(conjugation_rotate(r, embed_pure({s[0], s[1], s[2]})));
        double* d = rotated.data() + (static_cast<std::size_t>(b) * T + t) * 3;
        d[0] = w.x;
        d[1] = w.y;
        d[2] = w.z;
      }
    const std::vector<double> got = model.eval_logits(rotated, batch_size);
    for (int b = 0; b < batch_size; ++b) {
      double row_scale = 1e-12;
      for (int k = 0; k < K; ++k)
        row_scale = std::max(row_scale, std::fabs(base[static_cast<std::size_t>(b) * K + k]));
      for (int k = 0; k < K; ++k) {
        const std::size_t i = static_cast<std::size_t>(b) * K + k;
        worst = std::max(worst, std::fabs(got[i] - base[i]) / row_scale);
      }
    }
  }
  return worst;
}

double model_gradient_check(nn::Model& model, std::span<const double> batch, int batch_size,
                            std::span<const int> labels, double h) {
  const auto bn_snapshot = model.bn_states();
  auto restore = [&] { model.bn_states() = bn_snapshot; };

  std::vector<double> analytic(model.params().size());
  {
    restore();
    ad::Tape tape;
    nn::Model::Forward fw = model.forward(tape, batch, batch_size, nn::Mode::Train);
    ad::Var loss = ad::nll_mean(ad::log_softmax(fw.logits), labels);
    tape.backward(loss);
    model.collect_param_grads(fw, analytic);
  }

  auto eval_loss = [&]() {
    restore();
    ad::Tape tape;
    nn::Model::Forward fw = model.forward(tape, batch, batch_size, nn::Mode::Train);
    return ad::nll_mean(ad::log_softmax(fw.logits), labels).scalar();
  };

  double max_rel = 0.0;
  auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double fp = eval_loss();
    params[i] = saved - h;
    const double fm = eval_loss();
    params[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
  }
  restore();
  return max_rel;
}

nn::ModelSpec small_qcnn_spec() {
  nn::ModelSpec spec;
  spec.input_length = 12;
  spec.layers = {
      nn::LayerSpec::qconv(1, 2, 3, 1, 1),
      nn::LayerSpec::qbatchnorm(2),
      nn::LayerSpec::qconv(2, 2, 3, 1, 1),
      nn::LayerSpec::readout_magnitude(),
      nn::LayerSpec::dense(3),
  };
  return spec;
}

double small_qcnn_gradient_check(std::uint64_t seed, double h) {
  nn::Model model = nn::Model::build(small_qcnn_spec());
  RandomStream rng(seed);
  model.init_params(rng);
  const int B = 3, T = model.input_length();
  std::vector<double> batch(static_cast<std::size_t>(B) * T * 3);
  RandomStream data = rng.fork("grad-check-batch");
  for (double& v : batch) v = data.normal(0.0, 0.7);
  const std::vector<int> labels = {0, 1, 2};
  return model_gradient_check(model, batch, B, labels, h);
}

}  // namespace qcnn::checks
