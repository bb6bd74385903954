#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qcnn/layers.hpp"

namespace qcnn::viz {

/// An L-point polyline in R^3 that strongly activates one kernel, plus the
/// kernel's output at that window split into real and vector parts.
/// Invariants: RMS of the points is 1 (the ascent constraint surface) and
/// activation^2 = output_real^2 + |output_vector|^2.
struct TrajectoryFragment {
  int kernel = 0;  // out-channel index
  int layer = 0;
  std::vector<double> points;  // [L][3], input order
  Vector3 output_vector;
  double output_real = 0.0;
  double activation = 0.0;
  bool flat_landscape = false;  // zero gradient and zero activation at the seed
};

struct AscentOptions {
  int steps = 2000;
  double step_size = 0.05;
};

/// Projected gradient ascent on an L-tap pure-quaternion window, maximizing
/// the output magnitude of filter `out_channel` in the given qconv layer.
/// Re-projects to RMS = 1 after each step and halves the step on decrease, so
/// the returned activation is >= the seed window's. The seed fixes the initial
/// window, shared across kernels so their orientations are comparable. For
/// multi-channel layers the window drives one input channel at a time and the
/// best channel wins.
TrajectoryFragment maximize_kernel_activation(const nn::Model& model, int layer,
                                              int out_channel, std::uint64_t seed,
                                              const AscentOptions& opts = {});

struct TracePoint {
  int position = 0;     // output index along the cycle
  int input_pivot = 0;  // pivot index in the layer's input sequence
  double real = 0.0;
  Vector3 vec;
  double magnitude = 0.0;
};

/// Slides the chosen filter over a cycle (through the preceding quaternion
/// stack in eval mode) and reports the output quaternion per position.
std::vector<TracePoint> apply_kernel_trace(const nn::Model& model, int layer, int out_channel,
                                           std::span<const double> cycle);

struct KernelTrace {
  int kernel = 0;
  std::vector<TracePoint> points;
};

struct VizDocument {
  std::string checkpoint_path;
  int layer = 0;
  std::uint64_t seed = 0;
  std::vector<TrajectoryFragment> fragments;
  std::vector<KernelTrace> traces;  // optional
};

std::string viz_to_json(const VizDocument& doc);

/// Small-multiples SVG of the fragments under a fixed isometric projection.
/// A pure function of the JSON document: no model evaluation happens here.
std::string render_svg(const std::string& json_text);

}  // namespace qcnn::viz
