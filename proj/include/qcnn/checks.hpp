#pragma once

#include <cstdint>
#include <span>

#include "qcnn/layers.hpp"

namespace qcnn::checks {

struct EquivarianceReport {
  double max_deviation = 0.0;  // max elementwise |r f(x) r^-1 - f(r x r^-1)|
  int trials = 0;
};

/// Random single-layer equivariance trials: taps in {1,3,5,7}, channels in
/// {1,2,4}, padding in {0,2}, strides 1-2, random parameters, inputs, and unit
/// rotations; both inverse-factor forms. Deviations are absolute, elementwise.
EquivarianceReport layer_equivariance_trials(int trials, std::uint64_t seed);

/// Max relative deviation of eval-mode logits under uniform input rotations,
/// measured against the largest-magnitude logit of each example's row.
double model_invariance_max_rel(nn::Model& model, std::span<const double> batch, int batch_size,
                                int rotations, std::uint64_t seed);

/// Full-model gradient check: central differences over every parameter with
/// step h, in train mode with the batch-norm state restored before each
/// evaluation. Returns the max relative error with denominator
/// max(|analytic|, |numeric|, 1e-8).
double model_gradient_check(nn::Model& model, std::span<const double> batch, int batch_size,
                            std::span<const int> labels, double h);

/// Builds a small QCNN (two qconv layers, a batch norm, magnitude readout,
/// one dense head; well under 500 parameters), initializes it from `seed`,
/// and runs the full-model gradient check on a small random batch.
double small_qcnn_gradient_check(std::uint64_t seed, double h = 1e-6);

nn::ModelSpec small_qcnn_spec();

}  // namespace qcnn::checks
