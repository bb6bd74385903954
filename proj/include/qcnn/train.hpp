#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qcnn/gait.hpp"
#include "qcnn/layers.hpp"

namespace qcnn::train {

enum class Augmentation { None, Rotate };

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 10.0;  // global-norm gradient clip; <= 0 disables
  std::uint64_t seed = 1;
  Augmentation augmentation = Augmentation::None;  // Rotate: fresh random rotation per cycle per epoch
  std::string model = "qcnn-default";              // preset name, or inline spec below
  std::optional<nn::ModelSpec> inline_spec;
  double val_fraction = 1.0 / 7.0;  // train:val 6:1
  std::string selection = "top1-val";
};

TrainConfig train_config_from_json_text(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_top1 = 0.0;
  double val_top5 = 0.0;
  long clip_events = 0;
};

struct Checkpoint {
  nn::ModelSpec spec;
  std::vector<double> params;
  std::vector<std::vector<double>> bn_mu;  // per qbatchnorm layer, in layer order
  std::uint64_t seed = 0;
  int best_epoch = -1;
  double val_top1 = 0.0;
  double val_top5 = 0.0;
  long clip_events = 0;
};

/// Loss went non-finite; names the failing epoch/step instead of continuing.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, long step)
      : std::runtime_error("training diverged (non-finite loss) at epoch " +
                           std::to_string(epoch) + ", step " + std::to_string(step)),
        epoch_(epoch),
        step_(step) {}
  int epoch() const { return epoch_; }
  long step() const { return step_; }

 private:
  int epoch_;
  long step_;
};

struct EvalReport {
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<int>> confusion;  // [true][predicted] top-1 counts
  int count = 0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochMetrics> history;
};

nn::Model build_model_from_config(const TrainConfig& cfg, int num_classes, int input_length);

/// Adam + softmax cross-entropy; keeps the checkpoint with the highest
/// validation top-1 (earliest epoch wins ties) and leaves the model at it.
/// Fully reproducible given cfg.seed.
TrainResult train(nn::Model& model, const gait::GaitDataset& data, const TrainConfig& cfg);

/// Eval-mode metrics. Top-k counts a hit when the true label is among the k
/// largest logits, ties broken by lower class index.
EvalReport evaluate(nn::Model& model, const gait::GaitDataset& data);

Checkpoint snapshot_checkpoint(const nn::Model& model);
void restore_checkpoint(nn::Model& model, const Checkpoint& ckpt);
nn::Model model_from_checkpoint(const Checkpoint& ckpt);

/// Checkpoint file: "QCK1", u32 header length, JSON header (model spec, array
/// shapes, blob offset + CRC32, metadata), then a little-endian float64 blob
/// of parameters followed by batch-norm state.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::filesystem::path& path);

// -- experiment runners --------------------------------------------------------

struct DatasetSource {
  std::optional<std::filesystem::path> path;  // load when set, generate otherwise
  gait::SyntheticConfig synthetic;
};

struct ExperimentConfig {
  DatasetSource dataset;
  int test_per_class = 20;
  std::uint64_t rotation_seed = 99;
  char flip_axis = 'x';
  TrainConfig train_qcnn;
  TrainConfig train_cnn;
};

ExperimentConfig experiment_config_from_json_text(const std::string& text);

struct RegimeResult {
  EvalReport qcnn;
  EvalReport cnn;
};

/// Original/Original, Original/Rotated, Rotated/Rotated grid for the QCNN and
/// the parameter-comparable baseline CNN. Rotated sets are fixed copies with
/// one Haar-random rotation per cycle.
struct MatrixResult {
  RegimeResult original_original;
  RegimeResult original_rotated;
  RegimeResult rotated_rotated;
  Checkpoint qcnn_original;  // trained-on-original checkpoints, reused by callers
  Checkpoint cnn_original;
};

MatrixResult run_experiment_matrix(const ExperimentConfig& cfg);

std::string matrix_csv(const MatrixResult& r);
std::string matrix_table(const MatrixResult& r);

/// Trains on canonical orientation and evaluates on a fixed 180-degree flip
/// of the train and test cycles.
struct FlipResult {
  RegimeResult test;           // unflipped held-out cycles
  RegimeResult test_flipped;   // same cycles, flipped
  RegimeResult train_flipped;  // training cycles, flipped
  RegimeResult all_flipped;    // union of the two flipped sets
};

FlipResult flip_experiment(const ExperimentConfig& cfg);

std::string flip_csv(const FlipResult& r);
std::string flip_table(const FlipResult& r);

}  // namespace qcnn::train
