#include "qcnn/gait.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include "json.hpp"

namespace qcnn::gait {

namespace {

void append_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void append_f32(std::string& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  append_u32(out, v);
}

class Reader {
 public:
  Reader(const std::string& buf) : buf_(buf) {}
  std::size_t offset() const { return pos_; }
  std::uint32_t u32(const char* what) {
    need(4, what);
    const auto* p = reinterpret_cast<const unsigned char*>(buf_.data() + pos_);
    pos_ += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  float f32(const char* what) {
    const std::uint32_t v = u32(what);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  void done() const {
    if (pos_ != buf_.size())
      throw ParseError(pos_, "trailing bytes after the last record");
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > buf_.size())
      throw ParseError(buf_.size(), std::string("truncated file while reading ") + what);
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw std::invalid_argument("unknown split tag: " + name);
}

std::vector<double> resample_cycle(std::span<const double> raw, int target) {
  if (raw.size() % 3 != 0) throw std::invalid_argument("resample_cycle: raw must be [T][3]");
  const int t_raw = static_cast<int>(raw.size() / 3);
  if (t_raw < 2) throw std::invalid_argument("resample_cycle: need at least 2 samples");
  if (target < 1) throw std::invalid_argument("resample_cycle: target must be positive");
  std::vector<double> out(static_cast<std::size_t>(target) * 3);
  for (int i = 0; i < target; ++i) {
    const double pos = target == 1
                           ? 0.0
                           : static_cast<double>(i) * (t_raw - 1) / static_cast<double>(target - 1);
    int k = static_cast<int>(pos);
    if (k >= t_raw - 1) k = t_raw - 2;
    const double frac = pos - k;
    for (int c = 0; c < 3; ++c)
      out[3 * i + c] = raw[3 * k + c] + frac * (raw[3 * (k + 1) + c] - raw[3 * k + c]);
  }
  return out;
}

GaitCycle rotate_cycle(const GaitCycle& cycle, const Quaternion& r) {
  if (std::fabs(norm(r) - 1.0) > 1e-9)
    throw std::invalid_argument("rotate_cycle: rotation must be a unit quaternion");
  GaitCycle out;
  out.label = cycle.label;
  out.samples.resize(cycle.samples.size());
  const int T = cycle.length();
  for (int t = 0; t < T; ++t) {
    const Vector3 v{cycle.samples[3 * t], cycle.samples[3 * t + 1], cycle.samples[3 * t + 2]};
    const Vector3 w = vector_part(conjugation_rotate(r, embed_pure(v)));
    out.samples[3 * t] = w.x;
    out.samples[3 * t + 1] = w.y;
    out.samples[3 * t + 2] = w.z;
  }
  return out;
}

GaitDataset rotate_dataset(const GaitDataset& data, RandomStream& rng) {
  GaitDataset out;
  out.num_classes = data.num_classes;
  out.meta = data.meta;
  out.cycles.reserve(data.cycles.size());
  for (const GaitCycle& c : data.cycles) out.cycles.push_back(rotate_cycle(c, rng.unit_quaternion()));
  return out;
}

GaitDataset rotate_dataset_fixed(const GaitDataset& data, const Quaternion& r) {
  GaitDataset out;
  out.num_classes = data.num_classes;
  out.meta = data.meta;
  out.cycles.reserve(data.cycles.size());
  for (const GaitCycle& c : data.cycles) out.cycles.push_back(rotate_cycle(c, r));
  return out;
}

double min_phase_rms_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() % 3 != 0)
    throw std::invalid_argument("min_phase_rms_distance: curves must be [T][3] of equal length");
  const int T = static_cast<int>(a.size() / 3);
  double best = std::numeric_limits<double>::infinity();
  for (int s = 0; s < T; ++s) {
    double ss = 0.0;
    for (int t = 0; t < T; ++t) {
      const int u = (t + s) % T;
      for (int c = 0; c < 3; ++c) {
        const double d = a[3 * t + c] - b[3 * u + c];
        ss += d * d;
      }
    }
    best = std::min(best, std::sqrt(ss / T));
  }
  return best;
}

namespace {

// Smooth closed curve: per axis, 3-6 harmonics with 1/h amplitude decay plus
// a constant offset; normalized to unit RMS |v| and snapped to float32.
std::vector<double> class_signature(RandomStream stream, int T) {
  const int harmonics = 3 + static_cast<int>(stream.index(4));
  std::vector<double> cos_c(3 * harmonics), sin_c(3 * harmonics), off(3);
  for (int d = 0; d < 3; ++d) {
    off[d] = stream.normal(0.0, 0.6);
    for (int h = 0; h < harmonics; ++h) {
      cos_c[3 * h + d] = stream.normal(0.0, 1.0 / (h + 1));
      sin_c[3 * h + d] = stream.normal(0.0, 1.0 / (h + 1));
    }
  }
  std::vector<double> curve(static_cast<std::size_t>(T) * 3);
  for (int t = 0; t < T; ++t) {
    const double tau = 2.0 * std::numbers::pi * t / T;
    for (int d = 0; d < 3; ++d) {
      double v = off[d];
      for (int h = 0; h < harmonics; ++h)
        v += cos_c[3 * h + d] * std::cos((h + 1) * tau) + sin_c[3 * h + d] * std::sin((h + 1) * tau);
      curve[3 * t + d] = v;
    }
  }
  double ss = 0.0;
  for (double v : curve) ss += v * v;
  const double rms = std::sqrt(ss / T);  // RMS of |v(t)| over the cycle
  if (rms < 1e-9) throw std::runtime_error("degenerate synthetic signature");
  for (double& v : curve) v = static_cast<double>(static_cast<float>(v / rms));
  return curve;
}

}  // namespace

GaitDataset generate_synthetic_dataset(const SyntheticConfig& cfg) {
  if (cfg.num_classes < 2) throw std::invalid_argument("synthetic dataset needs at least 2 classes");
  if (cfg.cycles_per_class < 1 || cfg.length < 2)
    throw std::invalid_argument("synthetic dataset geometry out of range");
  RandomStream rng(cfg.seed);
  const int T = cfg.length;

  std::vector<std::vector<double>> signatures;
  signatures.reserve(cfg.num_classes);
  for (int k = 0; k < cfg.num_classes; ++k)
    signatures.push_back(class_signature(rng.fork("signature", k), T));
  for (int i = 0; i < cfg.num_classes; ++i)
    for (int j = i + 1; j < cfg.num_classes; ++j)
      if (min_phase_rms_distance(signatures[i], signatures[j]) <= 1e-6)
        throw std::runtime_error("synthetic class signatures collide; use another seed");

  GaitDataset data;
  data.num_classes = cfg.num_classes;
  data.meta = {cfg.seed, cfg.noise_sigma, cfg.split};
  data.cycles.reserve(static_cast<std::size_t>(cfg.num_classes) * cfg.cycles_per_class);
  for (int k = 0; k < cfg.num_classes; ++k) {
    RandomStream cyc = rng.fork("cycles", k);
    const std::vector<double>& base = signatures[k];
    for (int j = 0; j < cfg.cycles_per_class; ++j) {
      const int shift = static_cast<int>(cyc.index(T));
      GaitCycle c;
      c.label = k;
      c.samples.resize(static_cast<std::size_t>(T) * 3);
      for (int t = 0; t < T; ++t) {
        const int u = (t + shift) % T;
        for (int d = 0; d < 3; ++d) c.samples[3 * t + d] = base[3 * u + d];
      }
      if (cfg.noise_sigma > 0.0) {
        for (double& v : c.samples)
          v = static_cast<double>(static_cast<float>(v + cyc.normal(0.0, cfg.noise_sigma)));
      }
      data.cycles.push_back(std::move(c));
    }
  }
  return data;
}

void save_dataset(const GaitDataset& data, const std::filesystem::path& path) {
  int T = 0;
  for (std::size_t i = 0; i < data.cycles.size(); ++i) {
    const GaitCycle& c = data.cycles[i];
    if (i == 0) T = c.length();
    if (c.length() != T)
      throw std::invalid_argument("save_dataset: cycles must share one length");
    if (c.label < 0 || c.label >= data.num_classes)
      throw std::invalid_argument("save_dataset: label outside [0, num_classes)");
    for (double v : c.samples)
      if (!std::isfinite(v)) throw std::invalid_argument("save_dataset: non-finite sample");
  }

  std::string buf;
  buf.reserve(20 + data.cycles.size() * (4 + static_cast<std::size_t>(T) * 12));
  buf += "QGC1";
  append_u32(buf, 1);
  append_u32(buf, static_cast<std::uint32_t>(data.num_classes));
  append_u32(buf, static_cast<std::uint32_t>(data.cycles.size()));
  append_u32(buf, static_cast<std::uint32_t>(T));
  for (const GaitCycle& c : data.cycles) {
    append_u32(buf, static_cast<std::uint32_t>(c.label));
    for (double v : c.samples) append_f32(buf, static_cast<float>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_dataset: cannot open " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("save_dataset: write failed for " + path.string());
  f.close();

  nlohmann::json manifest;
  manifest["seed"] = data.meta.seed;
  manifest["noise_sigma"] = data.meta.noise_sigma;
  manifest["split"] = split_name(data.meta.split);
  std::filesystem::path mpath = path;
  mpath.replace_extension(".json");
  std::ofstream mf(mpath, std::ios::trunc);
  if (!mf) throw std::runtime_error("save_dataset: cannot open " + mpath.string());
  mf << manifest.dump(2) << "\n";
}

GaitDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_dataset: cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r(buf);
  if (buf.size() < 4 || buf.compare(0, 4, "QGC1") != 0)
    throw ParseError(0, "bad magic (expected \"QGC1\")");
  r.u32("magic");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != 1) throw ParseError(version_at, "unsupported version " + std::to_string(version));
  const std::uint32_t num_classes = r.u32("num_classes");
  const std::uint32_t num_cycles = r.u32("num_cycles");
  const std::uint32_t T = r.u32("T");

  GaitDataset data;
  data.num_classes = static_cast<int>(num_classes);
  data.cycles.reserve(num_cycles);
  for (std::uint32_t i = 0; i < num_cycles; ++i) {
    const std::size_t label_at = r.offset();
    const std::uint32_t label = r.u32("label");
    if (label >= num_classes)
      throw ParseError(label_at, "label " + std::to_string(label) + " >= num_classes");
    GaitCycle c;
    c.label = static_cast<int>(label);
    c.samples.resize(static_cast<std::size_t>(T) * 3);
    for (std::uint32_t j = 0; j < T * 3; ++j) {
      const std::size_t at = r.offset();
      const float v = r.f32("sample");
      if (!std::isfinite(v)) throw ParseError(at, "non-finite sample");
      c.samples[j] = static_cast<double>(v);
    }
    data.cycles.push_back(std::move(c));
  }
  r.done();

  // The manifest is advisory; missing or malformed manifests do not fail the load.
  std::filesystem::path mpath = path;
  mpath.replace_extension(".json");
  std::ifstream mf(mpath);
  if (mf) {
    try {
      nlohmann::json manifest = nlohmann::json::parse(mf);
      data.meta.seed = manifest.value("seed", std::uint64_t{0});
      data.meta.noise_sigma = manifest.value("noise_sigma", 0.0);
      data.meta.split = split_from_name(manifest.value("split", std::string("train")));
    } catch (const std::exception&) {
    }
  }
  return data;
}

}  // namespace qcnn::gait
