#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qcnn/autodiff.hpp"
#include "qcnn/quaternion.hpp"
#include "qcnn/random.hpp"

namespace qcnn::nn {

// Initialization constants. The rotation real-part spread makes the induced
// rotation angles of freshly initialized filters roughly uniform on [0, 2pi]
// when inputs are near N(0, I4/4) per quaternion.
inline constexpr double kRotationRealStd = 1.3780;
inline constexpr double kRealPartVar = 0.25;
inline constexpr double kRotationCVar = kRotationRealStd * kRotationRealStd - kRealPartVar;

/// |pivot + c| below this makes the rotation factor fall back to the identity
/// rotation (the term degenerates to a*(q_i+b)*q_i) and bumps a counter.
inline constexpr double kRotationGuard = 1e-6;

/// Which shifted input the trailing inverse uses. PivotInverse is the
/// pivot-symmetric conjugation (q_l+c) q_i (q_l+c)^-1; TapInverse keeps the
/// trailing factor on the tap itself, (q_l+c) q_i (q_i+c)^-1. Both are
/// rotation-equivariant; PivotInverse is the default.
enum class QConvForm { PivotInverse, TapInverse };

enum class ReadoutMode { Magnitude, RealPart };
enum class Mode { Train, Eval };

enum class LayerKind { QConv, QBatchNorm, Readout, Conv1d, Dense, Relu };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int in_channels = 0;
  int out_channels = 0;
  int taps = 0;
  int stride = 1;
  int padding = 0;
  QConvForm form = QConvForm::PivotInverse;
  int channels = 0;        // qbatchnorm
  double momentum = 0.1;   // qbatchnorm
  ReadoutMode readout = ReadoutMode::Magnitude;
  int units = 0;           // dense

  static LayerSpec qconv(int in_ch, int out_ch, int taps, int stride = 1, int padding = 0,
                         QConvForm form = QConvForm::PivotInverse);
  static LayerSpec qbatchnorm(int channels, double momentum = 0.1);
  static LayerSpec readout_magnitude();
  static LayerSpec readout_real();
  static LayerSpec conv1d(int in_ch, int out_ch, int taps, int stride = 1, int padding = 0);
  static LayerSpec dense(int units);
  static LayerSpec relu();
};

struct ModelSpec {
  int input_length = 100;  // samples per cycle (T)
  std::vector<LayerSpec> layers;
};

/// 4 quaternion conv layers + 2 dense layers on one quaternion channel of T
/// pure quaternions. Channel widths, strides, and same-length padding are
/// this artifact's defaults; taps/depth mirror the experiment architecture.
ModelSpec qcnn_default_spec(int num_classes, int input_length = 100,
                            QConvForm form = QConvForm::PivotInverse);

/// Real-valued mirror of the default QCNN, sized to a comparable total
/// parameter count (ReLU between conv layers, same taps and strides).
ModelSpec cnn_baseline_spec(int num_classes, int input_length = 100);

struct QBatchNormState {
  std::vector<double> mu;  // running RMS per channel, initialized to 1
  double momentum = 0.1;
};

// -- raw kernels (shared by tape nodes, single-window ops, and tests) --------

/// One filter term for a single (tap, out, in) slice. `is_pivot` marks the
/// middle tap, whose rotation factors commute with it and cancel exactly.
/// `guard_count` (optional) increments when the rotation factor degenerates
/// and the identity-rotation fallback is taken.
Quaternion qconv_term(const Quaternion& tap, const Quaternion& pivot, double a, double b,
                      double c, QConvForm form, bool is_pivot, long* guard_count);

/// Filter output for one window (odd length L = a.size()), summing the per-tap
/// terms around the middle pivot.
Quaternion qconv_window(std::span<const Quaternion> window, std::span<const double> a,
                        std::span<const double> b, std::span<const double> c,
                        QConvForm form = QConvForm::PivotInverse, long* guard_count = nullptr);

int conv_output_length(int n, int taps, int stride, int padding);

/// Records a quaternion convolution on the tape. x is [B,Cin,n,4]; params is
/// the flat (a,b,c) block of 3*taps*Cin*out_channels reals; output is
/// [B,out_channels,n',4] with zero-quaternion padding. `guard_count`
/// accumulates identity-rotation fallbacks taken during the forward pass.
ad::Var qconv_op(ad::Tape& tape, ad::Var x, ad::Var params, int taps, int stride, int padding,
                 int out_channels, QConvForm form, long* guard_count = nullptr);

/// Records quaternion batch normalization of x [B,C,n,4]. In train mode the
/// running RMS estimate is updated first (all-zero channels skip the update)
/// and the batch is divided by the fresh value; eval mode divides by the
/// stored estimate without touching it. Gradients flow through the update.
ad::Var qbatchnorm_op(ad::Tape& tape, ad::Var x, QBatchNormState& state, Mode mode);

// -- model -------------------------------------------------------------------

struct LayerLayout {
  std::int64_t param_offset = 0;
  std::int64_t param_count = 0;
  int bn_index = -1;
  int in_channels = 0, out_channels = 0;
  int in_length = 0, out_length = 0;   // sequence lengths (0 for flat/dense)
  int in_features = 0, out_features = 0;  // flat sizes for dense-side layers
  bool quaternion = false;             // layer operates in the quaternion domain
};

/// A built network: validated layer stack, flat parameter vector, and batch
/// norm running state. Construction validates shape composition and the
/// quaternion-stack rules (exactly one readout after the quaternion layers,
/// no elementwise real nonlinearity between them).
class Model {
 public:
  static Model build(const ModelSpec& spec);

  const ModelSpec& spec() const { return spec_; }
  int input_length() const { return spec_.input_length; }
  int num_classes() const { return num_classes_; }
  bool quaternion_input() const { return quaternion_input_; }
  std::int64_t param_count() const { return static_cast<std::int64_t>(params_->size()); }
  std::vector<double>& params() { return *params_; }
  const std::vector<double>& params() const { return *params_; }
  std::vector<QBatchNormState>& bn_states() { return *bn_states_; }
  const std::vector<QBatchNormState>& bn_states() const { return *bn_states_; }

  /// He-style fan-in init for a and the real layers; b ~ N(0, 1/4) and
  /// c ~ N(0, 1.3780^2 - 1/4) for quaternion filters. Deterministic in rng.
  void init_params(RandomStream& rng);
  void reset_bn();

  long guard_events() const { return *guard_events_; }

  int layer_count() const { return static_cast<int>(spec_.layers.size()); }
  const LayerSpec& layer(int i) const { return spec_.layers[i]; }
  const LayerLayout& layout(int i) const { return layouts_[i]; }
  std::span<const double> layer_params(int i) const;

  struct Forward {
    ad::Var logits;
    ad::Var input;
    std::vector<ad::Var> param_leaves;  // indexed by layer; undefined Var for param-free layers
  };

  /// Records the whole network on `tape`. `batch` is [B][T][3] time-major
  /// acceleration vectors, contiguous. Train mode updates batch-norm state.
  Forward forward(ad::Tape& tape, std::span<const double> batch, int batch_size, Mode mode,
                  bool input_requires_grad = false);

  /// Eval-mode logits, row-major [B][num_classes].
  std::vector<double> eval_logits(std::span<const double> batch, int batch_size);

  /// Copies d(loss)/d(params) from a backward()-completed forward record into
  /// `out` (size param_count), in flat parameter order.
  void collect_param_grads(const Forward& fw, std::span<double> out) const;

  /// Eval-mode quaternion activations entering layer `layer_index` for a
  /// single cycle; returns [C][n][4] values (C, n from layout). Requires a
  /// quaternion-input model and a qconv target layer.
  std::vector<double> quaternion_activations_before(int layer_index,
                                                    std::span<const double> cycle) const;

 private:
  Model() = default;
  ModelSpec spec_;
  std::vector<LayerLayout> layouts_;
  std::shared_ptr<std::vector<double>> params_;
  std::shared_ptr<std::vector<QBatchNormState>> bn_states_;
  std::shared_ptr<long> guard_events_;
  int num_classes_ = 0;
  bool quaternion_input_ = false;
  bool dense_first_ = false;
};

std::int64_t qconv_param_count(int taps, int in_channels, int out_channels);

// -- JSON (de)serialization of model specs ------------------------------------

std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json_text(const std::string& text);

}  // namespace qcnn::nn
