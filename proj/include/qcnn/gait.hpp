#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qcnn/quaternion.hpp"
#include "qcnn/random.hpp"

namespace qcnn::gait {

enum class Split { Train, Val, Test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

/// One gait cycle: T acceleration vectors, time-major [T][3], plus a class id.
/// Samples live in double precision in memory; the file format stores float32
/// (loading widens, saving narrows).
struct GaitCycle {
  std::vector<double> samples;  // [T][3]
  int label = 0;
  int length() const { return static_cast<int>(samples.size() / 3); }
};

struct DatasetMeta {
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;
  Split split = Split::Train;
};

struct GaitDataset {
  std::vector<GaitCycle> cycles;
  int num_classes = 0;
  DatasetMeta meta;
};

/// Structured parse failure for the dataset file format; carries the byte
/// offset at which the problem was detected.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t offset, const std::string& what)
      : std::runtime_error("dataset parse error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Linear interpolation of a [T_raw][3] series onto `target` uniformly spaced
/// parameter values over [0, T_raw-1]; endpoints are preserved exactly.
std::vector<double> resample_cycle(std::span<const double> raw, int target);

/// Applies one rigid rotation (unit quaternion, |r|-1 within 1e-9) to every
/// sample of the cycle. Label unchanged.
GaitCycle rotate_cycle(const GaitCycle& cycle, const Quaternion& r);

GaitDataset rotate_dataset(const GaitDataset& data, RandomStream& rng);  // fresh rotation per cycle
GaitDataset rotate_dataset_fixed(const GaitDataset& data, const Quaternion& r);

struct SyntheticConfig {
  int num_classes = 10;
  int cycles_per_class = 120;
  int length = 100;  // T
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  Split split = Split::Train;
};

/// Each class gets a latent signature (a smooth closed 3-D curve from 3-6
/// random Fourier harmonics per axis plus a constant offset, normalized to
/// unit RMS magnitude and snapped to float32). A cycle is the signature
/// circularly shifted by a random phase plus i.i.d. Gaussian noise. Classes
/// share the canonical world orientation, so orientation is informative until
/// cycles are rotated.
GaitDataset generate_synthetic_dataset(const SyntheticConfig& cfg);

/// Minimum over circular shifts of the RMS pointwise distance between two
/// [T][3] curves; the generator uses it to reject colliding class signatures.
double min_phase_rms_distance(std::span<const double> a, std::span<const double> b);

/// File format (little-endian): magic "QGC1", u32 version=1, u32 num_classes,
/// u32 num_cycles, u32 T, then per cycle a u32 label and T*3 float32 samples
/// in time-major (x,y,z) order. A sidecar manifest "<basename>.json" records
/// the generation seed, noise_sigma, and split tag.
void save_dataset(const GaitDataset& data, const std::filesystem::path& path);
GaitDataset load_dataset(const std::filesystem::path& path);

}  // namespace qcnn::gait
