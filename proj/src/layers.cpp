#include "qcnn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace qcnn::nn {

namespace {

using nlohmann::json;

[[noreturn]] void config_error(const std::string& msg) {
  throw std::invalid_argument("model config: " + msg);
}

inline double dotq(const Quaternion& a, const Quaternion& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

inline Quaternion load_quat(const double* p) { return {p[0], p[1], p[2], p[3]}; }

inline void store_quat(double* p, const Quaternion& q) {
  p[0] = q.w;
  p[1] = q.x;
  p[2] = q.y;
  p[3] = q.z;
}

inline void accum_quat(double* p, const Quaternion& q) {
  p[0] += q.w;
  p[1] += q.x;
  p[2] += q.y;
  p[3] += q.z;
}

constexpr double kGuard2 = kRotationGuard * kRotationGuard;

/// Gradient of one filter term w.r.t. (a, b, c, tap, pivot). Mirrors
/// qconv_term exactly, including the identity branches. When the tap IS the
/// pivot the rotation factors commute with it, so the term is exactly
/// a*(q+b)*q: everything flows through q and the c gradient is exactly zero.
inline void qconv_term_backward(const Quaternion& qi, const Quaternion& pivot, double a,
                                double b, double c, QConvForm form, bool is_pivot,
                                const Quaternion& g, double& ga, double& gb, double& gc,
                                Quaternion& gqi, Quaternion& gpivot) {
  const Quaternion u{qi.w + b, qi.x, qi.y, qi.z};
  const Quaternion s{pivot.w + c, pivot.x, pivot.y, pivot.z};
  const double n2s = norm_squared(s);

  if (is_pivot) {
    ga += dotq(g, hamilton_product(u, qi));
    const Quaternion gu = a * hamilton_product(g, conjugate(qi));
    gb += gu.w;
    gqi = gqi + gu + a * hamilton_product(conjugate(u), g);
    return;
  }

  if (form == QConvForm::PivotInverse) {
    if (n2s < kGuard2) {
      ga += dotq(g, hamilton_product(u, qi));
      const Quaternion gu = a * hamilton_product(g, conjugate(qi));
      gb += gu.w;
      gqi = gqi + gu + a * hamilton_product(conjugate(u), g);
      return;
    }
    const Quaternion si = (1.0 / n2s) * conjugate(s);
    const Quaternion v = hamilton_product(hamilton_product(s, qi), si);
    ga += dotq(g, hamilton_product(u, v));
    const Quaternion gu = a * hamilton_product(g, conjugate(v));
    gb += gu.w;
    const Quaternion gv = a * hamilton_product(conjugate(u), g);
    const Quaternion t1 = hamilton_product(gv, conjugate(si));
    const Quaternion gs = hamilton_product(t1, conjugate(qi)) -
                          hamilton_product(conjugate(v), t1);
    gc += gs.w;
    gpivot = gpivot + gs;
    gqi = gqi + gu + hamilton_product(hamilton_product(conjugate(s), gv), conjugate(si));
    return;
  }

  // TapInverse: trailing factor is (q_i + c)^-1.
  const Quaternion tf{qi.w + c, qi.x, qi.y, qi.z};
  const double n2t = norm_squared(tf);
  if (n2s < kGuard2 || n2t < kGuard2) {
    ga += dotq(g, hamilton_product(u, qi));
    const Quaternion gu = a * hamilton_product(g, conjugate(qi));
    gb += gu.w;
    gqi = gqi + gu + a * hamilton_product(conjugate(u), g);
    return;
  }
  const Quaternion w_ = (1.0 / n2t) * conjugate(tf);
  const Quaternion v = hamilton_product(hamilton_product(s, qi), w_);
  ga += dotq(g, hamilton_product(u, v));
  const Quaternion gu = a * hamilton_product(g, conjugate(v));
  gb += gu.w;
  const Quaternion gv = a * hamilton_product(conjugate(u), g);
  const Quaternion t1 = hamilton_product(gv, conjugate(w_));
  const Quaternion gs = hamilton_product(t1, conjugate(qi));
  gpivot = gpivot + gs;
  const Quaternion gt = -1.0 * hamilton_product(conjugate(v), t1);
  gc += gs.w + gt.w;
  gqi = gqi + gu + gt + hamilton_product(conjugate(s), t1);
}

struct QConvDims {
  int B, Cin, n, Cout, np, L, stride, padding;
  QConvForm form;
};

void qconv_fwd(const QConvDims& d, const double* x, const double* p, double* out, long* guard) {
  const std::int64_t lcc = static_cast<std::int64_t>(d.L) * d.Cin * d.Cout;
  const double* pa = p;
  const double* pb = p + lcc;
  const double* pc = p + 2 * lcc;
  const int pivot_tap = (d.L - 1) / 2;
  for (int b = 0; b < d.B; ++b) {
    for (int o = 0; o < d.Cout; ++o) {
      for (int t = 0; t < d.np; ++t) {
        const int base = t * d.stride - d.padding;
        Quaternion acc{};
        for (int ci = 0; ci < d.Cin; ++ci) {
          const double* xc = x + (static_cast<std::int64_t>(b) * d.Cin + ci) * d.n * 4;
          const int ppos = base + pivot_tap;
          const Quaternion pivot =
              (ppos >= 0 && ppos < d.n) ? load_quat(xc + 4 * ppos) : Quaternion{};
          const std::int64_t pidx = (static_cast<std::int64_t>(o) * d.Cin + ci) * d.L;
          for (int i = 0; i < d.L; ++i) {
            const int pos = base + i;
            if (pos < 0 || pos >= d.n) continue;  // zero-padding taps contribute zero terms
            const Quaternion qi = load_quat(xc + 4 * pos);
            acc = acc + qconv_term(qi, pivot, pa[pidx + i], pb[pidx + i], pc[pidx + i],
                                   d.form, i == pivot_tap, guard);
          }
        }
        store_quat(out + (static_cast<std::int64_t>(b) * d.Cout + o) * d.np * 4 + 4 * t, acc);
      }
    }
  }
}

void qconv_bwd(const QConvDims& d, const double* x, const double* p, const double* gout,
               double* gx, double* gp) {
  const std::int64_t lcc = static_cast<std::int64_t>(d.L) * d.Cin * d.Cout;
  const double* pa = p;
  const double* pb = p + lcc;
  const double* pc = p + 2 * lcc;
  double* gpa = gp;
  double* gpb = gp ? gp + lcc : nullptr;
  double* gpc = gp ? gp + 2 * lcc : nullptr;
  const int pivot_tap = (d.L - 1) / 2;
  double dead = 0.0;
  for (int b = 0; b < d.B; ++b) {
    for (int o = 0; o < d.Cout; ++o) {
      for (int t = 0; t < d.np; ++t) {
        const Quaternion g =
            load_quat(gout + (static_cast<std::int64_t>(b) * d.Cout + o) * d.np * 4 + 4 * t);
        if (g.w == 0.0 && g.x == 0.0 && g.y == 0.0 && g.z == 0.0) continue;
        const int base = t * d.stride - d.padding;
        for (int ci = 0; ci < d.Cin; ++ci) {
          const double* xc = x + (static_cast<std::int64_t>(b) * d.Cin + ci) * d.n * 4;
          double* gxc =
              gx ? gx + (static_cast<std::int64_t>(b) * d.Cin + ci) * d.n * 4 : nullptr;
          const int ppos = base + pivot_tap;
          const bool pivot_in = ppos >= 0 && ppos < d.n;
          const Quaternion pivot = pivot_in ? load_quat(xc + 4 * ppos) : Quaternion{};
          const std::int64_t pidx = (static_cast<std::int64_t>(o) * d.Cin + ci) * d.L;
          Quaternion gpivot{};
          for (int i = 0; i < d.L; ++i) {
            const int pos = base + i;
            if (pos < 0 || pos >= d.n) continue;
            const Quaternion qi = load_quat(xc + 4 * pos);
            Quaternion gqi{};
            double& ga = gpa ? gpa[pidx + i] : dead;
            double& gb = gpb ? gpb[pidx + i] : dead;
            double& gc = gpc ? gpc[pidx + i] : dead;
            qconv_term_backward(qi, pivot, pa[pidx + i], pb[pidx + i], pc[pidx + i], d.form,
                                i == pivot_tap, g, ga, gb, gc, gqi, gpivot);
            if (gxc) accum_quat(gxc + 4 * pos, gqi);
          }
          if (gxc && pivot_in) accum_quat(gxc + 4 * ppos, gpivot);
        }
      }
    }
  }
}

struct Conv1dDims {
  int B, Cin, n, Cout, np, L, stride, padding;
};

void conv1d_fwd(const Conv1dDims& d, const double* x, const double* p, double* out) {
  const double* w = p;  // [Cout][Cin][L]
  const double* bias = p + static_cast<std::int64_t>(d.Cout) * d.Cin * d.L;
  for (int b = 0; b < d.B; ++b) {
    for (int o = 0; o < d.Cout; ++o) {
      for (int t = 0; t < d.np; ++t) {
        const int base = t * d.stride - d.padding;
        double acc = bias[o];
        for (int ci = 0; ci < d.Cin; ++ci) {
          const double* xc = x + (static_cast<std::int64_t>(b) * d.Cin + ci) * d.n;
          const double* wi = w + (static_cast<std::int64_t>(o) * d.Cin + ci) * d.L;
          for (int i = 0; i < d.L; ++i) {
            const int pos = base + i;
            if (pos < 0 || pos >= d.n) continue;
            acc += wi[i] * xc[pos];
          }
        }
        out[(static_cast<std::int64_t>(b) * d.Cout + o) * d.np + t] = acc;
      }
    }
  }
}

void conv1d_bwd(const Conv1dDims& d, const double* x, const double* p, const double* gout,
                double* gx, double* gp) {
  const double* w = p;
  double* gw = gp;
  double* gbias = gp ? gp + static_cast<std::int64_t>(d.Cout) * d.Cin * d.L : nullptr;
  for (int b = 0; b < d.B; ++b) {
    for (int o = 0; o < d.Cout; ++o) {
      for (int t = 0; t < d.np; ++t) {
        const double g = gout[(static_cast<std::int64_t>(b) * d.Cout + o) * d.np + t];
        if (g == 0.0) continue;
        const int base = t * d.stride - d.padding;
        if (gbias) gbias[o] += g;
        for (int ci = 0; ci < d.Cin; ++ci) {
          const double* xc = x + (static_cast<std::int64_t>(b) * d.Cin + ci) * d.n;
          double* gxc = gx ? gx + (static_cast<std::int64_t>(b) * d.Cin + ci) * d.n : nullptr;
          const double* wi = w + (static_cast<std::int64_t>(o) * d.Cin + ci) * d.L;
          double* gwi = gw ? gw + (static_cast<std::int64_t>(o) * d.Cin + ci) * d.L : nullptr;
          for (int i = 0; i < d.L; ++i) {
            const int pos = base + i;
            if (pos < 0 || pos >= d.n) continue;
            if (gwi) gwi[i] += g * xc[pos];
            if (gxc) gxc[pos] += g * wi[i];
          }
        }
      }
    }
  }
}

}  // namespace

Quaternion qconv_term(const Quaternion& tap, const Quaternion& pivot, double a, double b,
                      double c, QConvForm form, bool is_pivot, long* guard_count) {
  const Quaternion u{tap.w + b, tap.x, tap.y, tap.z};
  if (is_pivot) {
    // The shifted pivot commutes with itself: (q+c) q (q+c)^-1 == q exactly.
    return a * hamilton_product(u, tap);
  }
  const Quaternion s{pivot.w + c, pivot.x, pivot.y, pivot.z};
  Quaternion v;
  bool degenerate;
  if (form == QConvForm::PivotInverse) {
    const double n2s = norm_squared(s);
    degenerate = n2s < kGuard2;
    if (!degenerate)
      v = (1.0 / n2s) * hamilton_product(hamilton_product(s, tap), conjugate(s));
  } else {
    const Quaternion tf{tap.w + c, tap.x, tap.y, tap.z};
    const double n2t = norm_squared(tf);
    degenerate = norm_squared(s) < kGuard2 || n2t < kGuard2;
    if (!degenerate)
      v = (1.0 / n2t) * hamilton_product(hamilton_product(s, tap), conjugate(tf));
  }
  if (degenerate) {
    if (guard_count) ++*guard_count;
    v = tap;
  }
  return a * hamilton_product(u, v);
}

Quaternion qconv_window(std::span<const Quaternion> window, std::span<const double> a,
                        std::span<const double> b, std::span<const double> c, QConvForm form,
                        long* guard_count) {
  const int L = static_cast<int>(window.size());
  if (L < 1 || L % 2 == 0) config_error("window length must be odd");
  if (a.size() != window.size() || b.size() != window.size() || c.size() != window.size())
    config_error("window parameter spans must have length L");
  const int l = (L - 1) / 2;
  const Quaternion pivot = window[l];
  Quaternion acc{};
  for (int i = 0; i < L; ++i)
    acc = acc + qconv_term(window[i], pivot, a[i], b[i], c[i], form, i == l, guard_count);
  return acc;
}

int conv_output_length(int n, int taps, int stride, int padding) {
  const int span = n + 2 * padding - taps;
  if (span < 0) config_error("input length plus padding shorter than the filter");
  return span / stride + 1;
}

ad::Var qconv_op(ad::Tape& tape, ad::Var x, ad::Var params, int taps, int stride, int padding,
                 int out_channels, QConvForm form, long* guard_count) {
  if (x.shape().size() != 4 || x.shape()[3] != 4)
    config_error("qconv_op input must be [B,Cin,n,4]");
  if (taps < 1 || taps % 2 == 0) config_error("qconv taps must be odd (a pivot must exist)");
  if (stride < 1 || padding < 0 || out_channels < 1) config_error("qconv geometry out of range");
  const int B = x.shape()[0], Cin = x.shape()[1], n = x.shape()[2];
  if (params.size() != qconv_param_count(taps, Cin, out_channels))
    config_error("qconv parameter block has the wrong size");
  const int np = conv_output_length(n, taps, stride, padding);
  const QConvDims dims{B, Cin, n, out_channels, np, taps, stride, padding, form};
  std::vector<double> out(static_cast<std::size_t>(B) * out_channels * np * 4);
  long scratch = 0;
  qconv_fwd(dims, x.value().data(), params.value().data(), out.data(),
            guard_count ? guard_count : &scratch);
  const int ix = x.id(), ip = params.id();
  return tape.record({B, out_channels, np, 4}, std::move(out), {ix, ip},
                     [dims, ix, ip](ad::Tape& tp, int self) {
                       auto g = tp.grad_of(self);
                       auto gX = tp.grad_of(ix);
                       auto gP = tp.grad_of(ip);
                       qconv_bwd(dims, tp.value_of(ix).data(), tp.value_of(ip).data(),
                                 g.data(), gX.empty() ? nullptr : gX.data(),
                                 gP.empty() ? nullptr : gP.data());
                     });
}

std::int64_t qconv_param_count(int taps, int in_channels, int out_channels) {
  return 3ll * taps * in_channels * out_channels;
}

// -- LayerSpec factories ------------------------------------------------------

LayerSpec LayerSpec::qconv(int in_ch, int out_ch, int taps, int stride, int padding,
                           QConvForm form) {
  LayerSpec s;
  s.kind = LayerKind::QConv;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.taps = taps;
  s.stride = stride;
  s.padding = padding;
  s.form = form;
  return s;
}

LayerSpec LayerSpec::qbatchnorm(int channels, double momentum) {
  LayerSpec s;
  s.kind = LayerKind::QBatchNorm;
  s.channels = channels;
  s.momentum = momentum;
  return s;
}

LayerSpec LayerSpec::readout_magnitude() {
  LayerSpec s;
  s.kind = LayerKind::Readout;
  s.readout = ReadoutMode::Magnitude;
  return s;
}

LayerSpec LayerSpec::readout_real() {
  LayerSpec s;
  s.kind = LayerKind::Readout;
  s.readout = ReadoutMode::RealPart;
  return s;
}

LayerSpec LayerSpec::conv1d(int in_ch, int out_ch, int taps, int stride, int padding) {
  LayerSpec s;
  s.kind = LayerKind::Conv1d;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.taps = taps;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::dense(int units) {
  LayerSpec s;
  s.kind = LayerKind::Dense;
  s.units = units;
  return s;
}

LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = LayerKind::Relu;
  return s;
}

ModelSpec qcnn_default_spec(int num_classes, int input_length, QConvForm form) {
  ModelSpec m;
  m.input_length = input_length;
  m.layers = {
      LayerSpec::qconv(1, 8, 7, 1, 3, form),
      LayerSpec::qbatchnorm(8),
      LayerSpec::qconv(8, 16, 7, 1, 3, form),
      LayerSpec::qbatchnorm(16),
      LayerSpec::qconv(16, 16, 5, 2, 2, form),
      LayerSpec::qconv(16, 16, 5, 2, 2, form),
      LayerSpec::readout_magnitude(),
      LayerSpec::dense(64),
      LayerSpec::relu(),
      LayerSpec::dense(num_classes),
  };
  return m;
}

ModelSpec cnn_baseline_spec(int num_classes, int input_length) {
  ModelSpec m;
  m.input_length = input_length;
  m.layers = {
      LayerSpec::conv1d(3, 10, 7, 1, 3),  LayerSpec::relu(),
      LayerSpec::conv1d(10, 20, 7, 1, 3), LayerSpec::relu(),
      LayerSpec::conv1d(20, 20, 5, 2, 2), LayerSpec::relu(),
      LayerSpec::conv1d(20, 20, 5, 2, 2), LayerSpec::relu(),
      LayerSpec::dense(64),               LayerSpec::relu(),
      LayerSpec::dense(num_classes),
  };
  return m;
}

// -- Model build ---------------------------------------------------------------

Model Model::build(const ModelSpec& spec) {
  if (spec.input_length < 1) config_error("input_length must be positive");
  if (spec.layers.empty()) config_error("model needs at least one layer");

  enum class Domain { Quat, RealSeq, Flat };
  Model m;
  m.spec_ = spec;
  m.params_ = std::make_shared<std::vector<double>>();
  m.bn_states_ = std::make_shared<std::vector<QBatchNormState>>();
  m.guard_events_ = std::make_shared<long>(0);

  Domain dom;
  int C = 0, n = spec.input_length, F = 0;
  switch (spec.layers.front().kind) {
    case LayerKind::QConv:
      dom = Domain::Quat;
      C = 1;
      m.quaternion_input_ = true;
      break;
    case LayerKind::Conv1d:
      dom = Domain::RealSeq;
      C = 3;
      break;
    case LayerKind::Dense:
      dom = Domain::Flat;
      F = 3 * spec.input_length;
      m.dense_first_ = true;
      break;
    default:
      config_error("first layer must be qconv, conv1d, or dense");
  }

  int quat_layers = 0, readouts = 0;
  std::int64_t offset = 0;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    LayerLayout lay;
    lay.param_offset = offset;
    switch (l.kind) {
      case LayerKind::QConv: {
        if (dom != Domain::Quat) config_error("qconv requires a quaternion input stage");
        if (readouts > 0) config_error("qconv cannot follow the readout");
        if (l.taps < 1 || l.taps % 2 == 0) config_error("qconv taps must be odd (a pivot must exist)");
        if (l.stride < 1 || l.padding < 0) config_error("qconv stride/padding out of range");
        if (l.in_channels != C) config_error("qconv in_channels does not match incoming channels");
        if (l.out_channels < 1) config_error("qconv out_channels must be positive");
        const int np = conv_output_length(n, l.taps, l.stride, l.padding);
        if (np < 1) config_error("qconv output length is empty");
        lay.quaternion = true;
        lay.in_channels = C;
        lay.in_length = n;
        lay.out_channels = l.out_channels;
        lay.out_length = np;
        lay.param_count = qconv_param_count(l.taps, l.in_channels, l.out_channels);
        C = l.out_channels;
        n = np;
        ++quat_layers;
        break;
      }
      case LayerKind::QBatchNorm: {
        if (dom != Domain::Quat) config_error("qbatchnorm requires the quaternion stage");
        if (readouts > 0) config_error("qbatchnorm cannot follow the readout");
        if (l.channels != C) config_error("qbatchnorm channels mismatch");
        if (!(l.momentum > 0.0 && l.momentum <= 1.0)) config_error("qbatchnorm momentum must be in (0,1]");
        lay.quaternion = true;
        lay.in_channels = lay.out_channels = C;
        lay.in_length = lay.out_length = n;
        lay.bn_index = static_cast<int>(m.bn_states_->size());
        QBatchNormState st;
        st.mu.assign(C, 1.0);
        st.momentum = l.momentum;
        m.bn_states_->push_back(std::move(st));
        ++quat_layers;
        break;
      }
      case LayerKind::Readout: {
        if (dom != Domain::Quat) config_error("readout requires quaternion inputs");
        ++readouts;
        lay.quaternion = true;
        lay.in_channels = lay.out_channels = C;
        lay.in_length = lay.out_length = n;
        dom = Domain::RealSeq;
        break;
      }
      case LayerKind::Conv1d: {
        if (dom == Domain::Quat)
          config_error("conv1d between quaternion layers (insert the readout first)");
        if (dom == Domain::Flat) config_error("conv1d after flatten/dense");
        if (l.taps < 1 || l.stride < 1 || l.padding < 0) config_error("conv1d geometry out of range");
        if (l.in_channels != C) config_error("conv1d in_channels mismatch");
        const int np = conv_output_length(n, l.taps, l.stride, l.padding);
        lay.in_channels = C;
        lay.in_length = n;
        lay.out_channels = l.out_channels;
        lay.out_length = np;
        lay.param_count =
            static_cast<std::int64_t>(l.out_channels) * l.in_channels * l.taps + l.out_channels;
        C = l.out_channels;
        n = np;
        break;
      }
      case LayerKind::Relu: {
        if (dom == Domain::Quat)
          config_error("elementwise nonlinearity between quaternion layers would break equivariance");
        lay.in_channels = lay.out_channels = C;
        lay.in_length = lay.out_length = n;
        lay.in_features = lay.out_features = F;
        break;
      }
      case LayerKind::Dense: {
        if (dom == Domain::Quat)
          config_error("dense between quaternion layers (insert the readout first)");
        if (l.units < 1) config_error("dense units must be positive");
        const int in_features = dom == Domain::Flat ? F : C * n;
        lay.in_features = in_features;
        lay.out_features = l.units;
        lay.param_count = static_cast<std::int64_t>(l.units) * in_features + l.units;
        dom = Domain::Flat;
        F = l.units;
        C = 0;
        n = 0;
        break;
      }
    }
    offset += lay.param_count;
    m.layouts_.push_back(lay);
  }

  if (quat_layers > 0 && readouts != 1)
    config_error("quaternion layers must be followed by exactly one readout");
  if (quat_layers == 0 && readouts != 0) config_error("readout without quaternion layers");
  if (spec.layers.back().kind != LayerKind::Dense)
    config_error("last layer must be dense (class logits)");
  m.num_classes_ = spec.layers.back().units;
  m.params_->assign(static_cast<std::size_t>(offset), 0.0);
  return m;
}

std::span<const double> Model::layer_params(int i) const {
  const LayerLayout& lay = layouts_[i];
  return {params_->data() + lay.param_offset, static_cast<std::size_t>(lay.param_count)};
}

void Model::reset_bn() {
  for (auto& st : *bn_states_) std::fill(st.mu.begin(), st.mu.end(), 1.0);
}

void Model::init_params(RandomStream& rng) {
  for (int li = 0; li < layer_count(); ++li) {
    const LayerSpec& l = spec_.layers[li];
    const LayerLayout& lay = layouts_[li];
    if (lay.param_count == 0) continue;
    RandomStream stream = rng.fork("init-layer", static_cast<std::uint64_t>(li));
    double* p = params_->data() + lay.param_offset;
    if (l.kind == LayerKind::QConv) {
      const std::int64_t lcc = static_cast<std::int64_t>(l.taps) * l.in_channels * l.out_channels;
      const double sigma_a = std::sqrt(2.0 / (static_cast<double>(l.taps) * l.in_channels));
      for (std::int64_t i = 0; i < lcc; ++i) p[i] = stream.normal(0.0, sigma_a);
      for (std::int64_t i = 0; i < lcc; ++i) p[lcc + i] = stream.normal(0.0, std::sqrt(kRealPartVar));
      for (std::int64_t i = 0; i < lcc; ++i) p[2 * lcc + i] = stream.normal(0.0, std::sqrt(kRotationCVar));
    } else if (l.kind == LayerKind::Conv1d) {
      const std::int64_t wn = static_cast<std::int64_t>(l.out_channels) * l.in_channels * l.taps;
      const double sigma = std::sqrt(2.0 / (static_cast<double>(l.taps) * l.in_channels));
      for (std::int64_t i = 0; i < wn; ++i) p[i] = stream.normal(0.0, sigma);
      for (int i = 0; i < l.out_channels; ++i) p[wn + i] = 0.0;
    } else if (l.kind == LayerKind::Dense) {
      const std::int64_t wn = static_cast<std::int64_t>(lay.out_features) * lay.in_features;
      const double sigma = std::sqrt(2.0 / static_cast<double>(lay.in_features));
      for (std::int64_t i = 0; i < wn; ++i) p[i] = stream.normal(0.0, sigma);
      for (int i = 0; i < lay.out_features; ++i) p[wn + i] = 0.0;
    }
  }
  reset_bn();
  *guard_events_ = 0;
}

namespace {

// Dense block node: params = [W (units x in), bias (units)].
ad::Var dense_block(ad::Tape& tape, ad::Var x, ad::Var block, int in_features, int units) {
  const int B = x.shape()[0];
  auto vx = x.value();
  auto vp = block.value();
  const double* w = vp.data();
  const double* bias = vp.data() + static_cast<std::int64_t>(units) * in_features;
  std::vector<double> out(static_cast<std::size_t>(B) * units);
  for (int b = 0; b < B; ++b) {
    const double* xb = vx.data() + static_cast<std::size_t>(b) * in_features;
    for (int u = 0; u < units; ++u) {
      const double* wu = w + static_cast<std::int64_t>(u) * in_features;
      double s = bias[u];
      for (int j = 0; j < in_features; ++j) s += wu[j] * xb[j];
      out[static_cast<std::size_t>(b) * units + u] = s;
    }
  }
  const int ix = x.id(), ip = block.id();
  return tape.record({B, units}, std::move(out), {ix, ip}, [=](ad::Tape& tp, int self) {
    auto g = tp.grad_of(self);
    auto vX = tp.value_of(ix);
    auto vP = tp.value_of(ip);
    auto gX = tp.grad_of(ix);
    auto gP = tp.grad_of(ip);
    const double* W = vP.data();
    double* gW = gP.empty() ? nullptr : gP.data();
    double* gBias = gP.empty() ? nullptr : gP.data() + static_cast<std::int64_t>(units) * in_features;
    for (int b = 0; b < B; ++b) {
      const double* xb = vX.data() + static_cast<std::size_t>(b) * in_features;
      const double* gb = g.data() + static_cast<std::size_t>(b) * units;
      double* gxb = gX.empty() ? nullptr : gX.data() + static_cast<std::size_t>(b) * in_features;
      for (int u = 0; u < units; ++u) {
        const double gu = gb[u];
        if (gu == 0.0) continue;
        if (gBias) gBias[u] += gu;
        const double* wu = W + static_cast<std::int64_t>(u) * in_features;
        if (gW) {
          double* gwu = gW + static_cast<std::int64_t>(u) * in_features;
          for (int j = 0; j < in_features; ++j) gwu[j] += gu * xb[j];
        }
        if (gxb)
          for (int j = 0; j < in_features; ++j) gxb[j] += gu * wu[j];
      }
    }
  });
}

}  // namespace

Model::Forward Model::forward(ad::Tape& tape, std::span<const double> batch, int batch_size,
                              Mode mode, bool input_requires_grad) {
  const int T = spec_.input_length;
  if (batch.size() != static_cast<std::size_t>(batch_size) * T * 3)
    throw std::invalid_argument("Model::forward: batch must be [B][T][3]");
  const bool param_grad = mode == Mode::Train;

  ad::Var x;
  if (quaternion_input_) {
    std::vector<double> buf(static_cast<std::size_t>(batch_size) * T * 4, 0.0);
    for (int b = 0; b < batch_size; ++b)
      for (int t = 0; t < T; ++t) {
        const double* v = batch.data() + (static_cast<std::size_t>(b) * T + t) * 3;
        double* q = buf.data() + (static_cast<std::size_t>(b) * T + t) * 4;
        q[1] = v[0];
        q[2] = v[1];
        q[3] = v[2];
      }
    x = tape.leaf({batch_size, 1, T, 4}, buf, input_requires_grad);
  } else if (dense_first_) {
    x = tape.leaf({batch_size, 3 * T}, batch, input_requires_grad);
  } else {
    std::vector<double> buf(static_cast<std::size_t>(batch_size) * 3 * T);
    for (int b = 0; b < batch_size; ++b)
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < 3; ++c)
          buf[(static_cast<std::size_t>(b) * 3 + c) * T + t] =
              batch[(static_cast<std::size_t>(b) * T + t) * 3 + c];
    x = tape.leaf({batch_size, 3, T}, buf, input_requires_grad);
  }

  Forward fw;
  fw.input = x;
  fw.param_leaves.resize(spec_.layers.size());
  for (int li = 0; li < layer_count(); ++li) {
    const LayerSpec& l = spec_.layers[li];
    const LayerLayout& lay = layouts_[li];
    ad::Var pblock;
    if (lay.param_count > 0) {
      pblock = tape.leaf({static_cast<int>(lay.param_count)},
                         {params_->data() + lay.param_offset,
                          static_cast<std::size_t>(lay.param_count)},
                         param_grad);
      fw.param_leaves[li] = pblock;
    }
    switch (l.kind) {
      case LayerKind::QConv:
        x = qconv_op(tape, x, pblock, l.taps, l.stride, l.padding, l.out_channels, l.form,
                     guard_events_.get());
        break;
      case LayerKind::QBatchNorm: {
        auto& st = (*bn_states_)[lay.bn_index];
        const int C = lay.in_channels, nn = lay.in_length;
        const std::int64_t per_ch = static_cast<std::int64_t>(batch_size) * nn;
        auto vx = x.value();
        std::vector<double> rms(C, 0.0), mu_used(C);
        std::vector<char> skip(C, 0);
        for (int c = 0; c < C; ++c) {
          double ss = 0.0;
          for (int b = 0; b < batch_size; ++b) {
            const double* xc = vx.data() + (static_cast<std::size_t>(b) * C + c) * nn * 4;
            for (int i = 0; i < nn * 4; ++i) ss += xc[i] * xc[i];
          }
          rms[c] = std::sqrt(ss / static_cast<double>(per_ch));
          if (mode == Mode::Train) {
            if (rms[c] > 0.0)
              st.mu[c] = (1.0 - st.momentum) * st.mu[c] + st.momentum * rms[c];
            else
              skip[c] = 1;  // all-zero channel: update skipped
          }
          mu_used[c] = st.mu[c];
        }
        std::vector<double> out(vx.size());
        for (int b = 0; b < batch_size; ++b)
          for (int c = 0; c < C; ++c) {
            const double inv = 1.0 / mu_used[c];
            const std::size_t off = (static_cast<std::size_t>(b) * C + c) * nn * 4;
            for (int i = 0; i < nn * 4; ++i) out[off + i] = vx[off + i] * inv;
          }
        const int ix = x.id();
        const double eps = st.momentum;
        const bool train = mode == Mode::Train;
        const int Bc = batch_size;
        x = tape.record(
            x.shape(), std::move(out), {ix},
            [=, rms = std::move(rms), mu = std::move(mu_used),
             skip = std::move(skip)](ad::Tape& tp, int self) {
              auto g = tp.grad_of(self);
              auto vX = tp.value_of(ix);
              auto gX = tp.grad_of(ix);
              if (gX.empty()) return;
              for (int c = 0; c < C; ++c) {
                const double inv = 1.0 / mu[c];
                const bool through_stats = train && !skip[c] && rms[c] > 0.0;
                double S = 0.0;
                if (through_stats) {
                  for (int b = 0; b < Bc; ++b) {
                    const std::size_t off = (static_cast<std::size_t>(b) * C + c) * nn * 4;
                    for (int i = 0; i < nn * 4; ++i) S += g[off + i] * vX[off + i];
                  }
                }
                const double coef =
                    through_stats
                        ? S * eps / (static_cast<double>(per_ch) * rms[c]) * inv * inv
                        : 0.0;
                for (int b = 0; b < Bc; ++b) {
                  const std::size_t off = (static_cast<std::size_t>(b) * C + c) * nn * 4;
                  for (int i = 0; i < nn * 4; ++i)
                    gX[off + i] += g[off + i] * inv - coef * vX[off + i];
                }
              }
            });
        break;
      }
      case LayerKind::Readout:
        x = l.readout == ReadoutMode::Magnitude ? ad::magnitude(x) : ad::real_part(x);
        break;
      case LayerKind::Conv1d: {
        const Conv1dDims dims{batch_size, lay.in_channels, lay.in_length, lay.out_channels,
                              lay.out_length, l.taps, l.stride, l.padding};
        std::vector<double> out(static_cast<std::size_t>(batch_size) * dims.Cout * dims.np);
        conv1d_fwd(dims, x.value().data(), pblock.value().data(), out.data());
        const int ix = x.id(), ip = pblock.id();
        x = tape.record({batch_size, dims.Cout, dims.np}, std::move(out), {ix, ip},
                        [dims, ix, ip](ad::Tape& tp, int self) {
                          auto g = tp.grad_of(self);
                          auto gX = tp.grad_of(ix);
                          auto gP = tp.grad_of(ip);
                          conv1d_bwd(dims, tp.value_of(ix).data(), tp.value_of(ip).data(),
                                     g.data(), gX.empty() ? nullptr : gX.data(),
                                     gP.empty() ? nullptr : gP.data());
                        });
        break;
      }
      case LayerKind::Relu:
        x = ad::relu(x);
        break;
      case LayerKind::Dense: {
        if (x.shape().size() != 2)
          x = ad::reshape(x, {batch_size, static_cast<int>(x.size() / batch_size)});
        x = dense_block(tape, x, pblock, lay.in_features, lay.out_features);
        break;
      }
    }
  }
  fw.logits = x;
  return fw;
}

std::vector<double> Model::eval_logits(std::span<const double> batch, int batch_size) {
  ad::Tape tape;
  Forward fw = forward(tape, batch, batch_size, Mode::Eval, false);
  auto v = fw.logits.value();
  return {v.begin(), v.end()};
}

void Model::collect_param_grads(const Forward& fw, std::span<double> out) const {
  if (out.size() != params_->size())
    throw std::invalid_argument("collect_param_grads: wrong output size");
  for (int li = 0; li < layer_count(); ++li) {
    const LayerLayout& lay = layouts_[li];
    if (lay.param_count == 0) continue;
    const ad::Var& leaf = fw.param_leaves[li];
    auto g = leaf.grad();
    double* dst = out.data() + lay.param_offset;
    if (g.empty())
      std::fill(dst, dst + lay.param_count, 0.0);
    else
      std::copy(g.begin(), g.end(), dst);
  }
}

std::vector<double> Model::quaternion_activations_before(int layer_index,
                                                         std::span<const double> cycle) const {
  if (!quaternion_input_)
    throw std::invalid_argument("quaternion activations require a quaternion-input model");
  if (layer_index < 0 || layer_index >= layer_count() ||
      spec_.layers[layer_index].kind != LayerKind::QConv)
    throw std::invalid_argument("target layer must be a qconv layer");
  const int T = spec_.input_length;
  if (cycle.size() != static_cast<std::size_t>(T) * 3)
    throw std::invalid_argument("cycle must be [T][3]");

  // Replay the quaternion prefix in eval mode on plain buffers.
  std::vector<double> x(static_cast<std::size_t>(T) * 4, 0.0);
  for (int t = 0; t < T; ++t) {
    x[4 * t + 1] = cycle[3 * t];
    x[4 * t + 2] = cycle[3 * t + 1];
    x[4 * t + 3] = cycle[3 * t + 2];
  }
  for (int li = 0; li < layer_index; ++li) {
    const LayerSpec& l = spec_.layers[li];
    const LayerLayout& lay = layouts_[li];
    if (l.kind == LayerKind::QConv) {
      const QConvDims dims{1, lay.in_channels, lay.in_length, lay.out_channels,
                           lay.out_length, l.taps, l.stride, l.padding, l.form};
      std::vector<double> out(static_cast<std::size_t>(dims.Cout) * dims.np * 4);
      long scratch_guard = 0;
      qconv_fwd(dims, x.data(), layer_params(li).data(), out.data(), &scratch_guard);
      x = std::move(out);
    } else if (l.kind == LayerKind::QBatchNorm) {
      const auto& st = (*bn_states_)[lay.bn_index];
      const int C = lay.in_channels, nn = lay.in_length;
      for (int c = 0; c < C; ++c) {
        const double inv = 1.0 / st.mu[c];
        const std::size_t off = static_cast<std::size_t>(c) * nn * 4;
        for (int i = 0; i < nn * 4; ++i) x[off + i] *= inv;
      }
    } else {
      throw std::invalid_argument("prefix before a qconv layer may contain only quaternion layers");
    }
  }
  return x;
}

// -- JSON ----------------------------------------------------------------------

namespace {

std::string kind_name(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::QConv: return "qconv";
    case LayerKind::QBatchNorm: return "qbatchnorm";
    case LayerKind::Readout:
      return l.readout == ReadoutMode::Magnitude ? "readout-magnitude" : "readout-real";
    case LayerKind::Conv1d: return "conv1d";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
  }
  return "?";
}

}  // namespace

std::string model_spec_to_json(const ModelSpec& spec) {
  json j;
  j["input_length"] = spec.input_length;
  j["layers"] = json::array();
  for (const LayerSpec& l : spec.layers) {
    json e;
    e["kind"] = kind_name(l);
    switch (l.kind) {
      case LayerKind::QConv:
        e["in_channels"] = l.in_channels;
        e["out_channels"] = l.out_channels;
        e["taps"] = l.taps;
        e["stride"] = l.stride;
        e["padding"] = l.padding;
        e["form"] = l.form == QConvForm::PivotInverse ? "pivot-inverse" : "tap-inverse";
        break;
      case LayerKind::Conv1d:
        e["in_channels"] = l.in_channels;
        e["out_channels"] = l.out_channels;
        e["taps"] = l.taps;
        e["stride"] = l.stride;
        e["padding"] = l.padding;
        break;
      case LayerKind::QBatchNorm:
        e["channels"] = l.channels;
        e["momentum"] = l.momentum;
        break;
      case LayerKind::Dense:
        e["units"] = l.units;
        break;
      default:
        break;
    }
    j["layers"].push_back(e);
  }
  return j.dump();
}

ModelSpec model_spec_from_json_text(const std::string& text) {
  json j = json::parse(text);
  ModelSpec spec;
  spec.input_length = j.at("input_length").get<int>();
  for (const json& e : j.at("layers")) {
    const std::string kind = e.at("kind").get<std::string>();
    if (kind == "qconv") {
      QConvForm form = QConvForm::PivotInverse;
      if (e.contains("form")) {
        const std::string f = e.at("form").get<std::string>();
        if (f == "tap-inverse")
          form = QConvForm::TapInverse;
        else if (f != "pivot-inverse")
          config_error("unknown qconv form: " + f);
      }
      spec.layers.push_back(LayerSpec::qconv(e.at("in_channels").get<int>(),
                                             e.at("out_channels").get<int>(),
                                             e.at("taps").get<int>(), e.at("stride").get<int>(),
                                             e.at("padding").get<int>(), form));
    } else if (kind == "qbatchnorm") {
      spec.layers.push_back(LayerSpec::qbatchnorm(
          e.at("channels").get<int>(),
          e.contains("momentum") ? e.at("momentum").get<double>() : 0.1));
    } else if (kind == "readout-magnitude") {
      spec.layers.push_back(LayerSpec::readout_magnitude());
    } else if (kind == "readout-real") {
      spec.layers.push_back(LayerSpec::readout_real());
    } else if (kind == "conv1d") {
      spec.layers.push_back(LayerSpec::conv1d(e.at("in_channels").get<int>(),
                                              e.at("out_channels").get<int>(),
                                              e.at("taps").get<int>(), e.at("stride").get<int>(),
                                              e.at("padding").get<int>()));
    } else if (kind == "dense") {
      spec.layers.push_back(LayerSpec::dense(e.at("units").get<int>()));
    } else if (kind == "relu") {
      spec.layers.push_back(LayerSpec::relu());
    } else {
      config_error("unknown layer kind: " + kind);
    }
  }
  return spec;
}

}  // namespace qcnn::nn
