#include "qcnn/train.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace qcnn::train {

namespace {

using nlohmann::json;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void fill_batch(std::vector<double>& buf, const gait::GaitDataset& data,
                std::span<const int> idx, std::vector<int>& labels) {
  const int T = data.cycles.empty() ? 0 : data.cycles.front().length();
  buf.resize(idx.size() * static_cast<std::size_t>(T) * 3);
  labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const gait::GaitCycle& c = data.cycles[idx[i]];
    std::copy(c.samples.begin(), c.samples.end(),
              buf.begin() + i * static_cast<std::size_t>(T) * 3);
    labels[i] = c.label;
  }
}

// Hit when fewer than k classes rank strictly ahead (ties broken by index).
bool topk_hit(const double* logits, int num_classes, int label, int k) {
  int ahead = 0;
  const double ref = logits[label];
  for (int j = 0; j < num_classes; ++j) {
    if (logits[j] > ref || (logits[j] == ref && j < label)) ++ahead;
  }
  return ahead < k;
}

int argmax_tiebreak(const double* logits, int num_classes) {
  int best = 0;
  for (int j = 1; j < num_classes; ++j)
    if (logits[j] > logits[best]) best = j;
  return best;
}

EvalReport evaluate_indices(nn::Model& model, const gait::GaitDataset& data,
                            std::span<const int> indices) {
  const int K = model.num_classes();
  EvalReport rep;
  rep.confusion.assign(K, std::vector<int>(K, 0));
  std::vector<int> class_total(K, 0);
  std::vector<int> class_hits(K, 0);
  long top1 = 0, top5 = 0;
  const int chunk = 128;
  std::vector<double> buf;
  std::vector<int> labels;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const std::size_t bsz = std::min<std::size_t>(chunk, indices.size() - start);
    fill_batch(buf, data, indices.subspan(start, bsz), labels);
    const std::vector<double> logits = model.eval_logits(buf, static_cast<int>(bsz));
    for (std::size_t i = 0; i < bsz; ++i) {
      const double* row = logits.data() + i * K;
      const int y = labels[i];
      ++class_total[y];
      if (topk_hit(row, K, y, 1)) {
        ++top1;
        ++class_hits[y];
      }
      if (topk_hit(row, K, y, std::min(5, K))) ++top5;
      ++rep.confusion[y][argmax_tiebreak(row, K)];
    }
  }
  rep.count = static_cast<int>(indices.size());
  if (rep.count > 0) {
    rep.top1 = static_cast<double>(top1) / rep.count;
    rep.top5 = static_cast<double>(top5) / rep.count;
  }
  rep.per_class_accuracy.assign(K, 0.0);
  for (int k = 0; k < K; ++k)
    if (class_total[k] > 0)
      rep.per_class_accuracy[k] = static_cast<double>(class_hits[k]) / class_total[k];
  return rep;
}

}  // namespace

nn::Model build_model_from_config(const TrainConfig& cfg, int num_classes, int input_length) {
  if (cfg.inline_spec) return nn::Model::build(*cfg.inline_spec);
  if (cfg.model == "qcnn-default")
    return nn::Model::build(nn::qcnn_default_spec(num_classes, input_length));
  if (cfg.model == "qcnn-default-tap-inverse")
    return nn::Model::build(
        nn::qcnn_default_spec(num_classes, input_length, nn::QConvForm::TapInverse));
  if (cfg.model == "cnn-baseline")
    return nn::Model::build(nn::cnn_baseline_spec(num_classes, input_length));
  throw std::invalid_argument("unknown model preset: " + cfg.model);
}

EvalReport evaluate(nn::Model& model, const gait::GaitDataset& data) {
  std::vector<int> idx(data.cycles.size());
  std::iota(idx.begin(), idx.end(), 0);
  return evaluate_indices(model, data, idx);
}

Checkpoint snapshot_checkpoint(const nn::Model& model) {
  Checkpoint ck;
  ck.spec = model.spec();
  ck.params = model.params();
  for (const auto& st : model.bn_states()) ck.bn_mu.push_back(st.mu);
  return ck;
}

void restore_checkpoint(nn::Model& model, const Checkpoint& ckpt) {
  if (model.params().size() != ckpt.params.size())
    throw std::invalid_argument("checkpoint parameter count does not match the model");
  if (model.bn_states().size() != ckpt.bn_mu.size())
    throw std::invalid_argument("checkpoint batch-norm state does not match the model");
  model.params() = ckpt.params;
  for (std::size_t i = 0; i < ckpt.bn_mu.size(); ++i) {
    if (model.bn_states()[i].mu.size() != ckpt.bn_mu[i].size())
      throw std::invalid_argument("checkpoint batch-norm channel count mismatch");
    model.bn_states()[i].mu = ckpt.bn_mu[i];
  }
}

nn::Model model_from_checkpoint(const Checkpoint& ckpt) {
  nn::Model model = nn::Model::build(ckpt.spec);
  restore_checkpoint(model, ckpt);
  return model;
}

TrainResult train(nn::Model& model, const gait::GaitDataset& data, const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (cfg.learning_rate < 0.0) throw std::invalid_argument("train: learning_rate must be >= 0");
  if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (cfg.selection != "top1-val")
    throw std::invalid_argument("train: unsupported selection metric " + cfg.selection);
  if (data.cycles.empty()) throw std::invalid_argument("train: empty dataset");
  const int T = data.cycles.front().length();
  for (const auto& c : data.cycles)
    if (c.length() != T) throw std::invalid_argument("train: cycles must share one length");
  if (T != model.input_length())
    throw std::invalid_argument("train: dataset length does not match the model input length");

  RandomStream rng(cfg.seed);

  // Deterministic train/val split (train:val = (1-f):f of the given set).
  std::vector<int> order(data.cycles.size());
  std::iota(order.begin(), order.end(), 0);
  {
    RandomStream split_rng = rng.fork("split");
    split_rng.shuffle(order);
  }
  std::size_t val_n = static_cast<std::size_t>(
      std::llround(cfg.val_fraction * static_cast<double>(order.size())));
  if (order.size() >= 2 && val_n == 0) val_n = 1;
  if (val_n >= order.size()) val_n = order.size() - 1;
  std::vector<int> val_idx(order.begin(), order.begin() + val_n);
  std::vector<int> train_idx(order.begin() + val_n, order.end());

  const std::size_t P = model.params().size();
  std::vector<double> grad(P), m(P, 0.0), v(P, 0.0);
  long adam_t = 0;
  long global_step = 0;

  TrainResult result;
  double best_top1 = -1.0;
  long total_clip_events = 0;

  std::vector<int> batch_idx;
  std::vector<double> buf;
  std::vector<int> labels;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> epoch_order = train_idx;
    {
      RandomStream sh = rng.fork("shuffle", static_cast<std::uint64_t>(epoch));
      sh.shuffle(epoch_order);
    }
    RandomStream aug = rng.fork("augment", static_cast<std::uint64_t>(epoch));

    double loss_sum = 0.0;
    long clip_events = 0;
    for (std::size_t start = 0; start < epoch_order.size(); start += cfg.batch_size) {
      const std::size_t bsz =
          std::min<std::size_t>(cfg.batch_size, epoch_order.size() - start);
      batch_idx.assign(epoch_order.begin() + start, epoch_order.begin() + start + bsz);
      fill_batch(buf, data, batch_idx, labels);
      if (cfg.augmentation == Augmentation::Rotate) {
        for (std::size_t i = 0; i < bsz; ++i) {
          const Quaternion r = aug.unit_quaternion();
          for (int t = 0; t < T; ++t) {
            double* s = buf.data() + (i * T + t) * 3;
            const Vector3 w = vector_part(conjugation_rotate(r, embed_pure({s[0], s[1], s[2]})));
            s[0] = w.x;
            s[1] = w.y;
            s[2] = w.z;
          }
        }
      }

      ad::Tape tape;
      nn::Model::Forward fw = model.forward(tape, buf, static_cast<int>(bsz), nn::Mode::Train);
      ad::Var loss = ad::nll_mean(ad::log_softmax(fw.logits), labels);
      const double loss_v = loss.scalar();
      if (!std::isfinite(loss_v)) throw DivergenceError(epoch, global_step);
      loss_sum += loss_v * static_cast<double>(bsz);
      tape.backward(loss);
      model.collect_param_grads(fw, grad);

      if (cfg.clip_norm > 0.0) {
        double ss = 0.0;
        for (double g : grad) ss += g * g;
        const double gn = std::sqrt(ss);
        if (gn > cfg.clip_norm) {
          const double s = cfg.clip_norm / gn;
          for (double& g : grad) g *= s;
          ++clip_events;
        }
      }

      ++adam_t;
      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(adam_t));
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(adam_t));
      auto& params = model.params();
      for (std::size_t i = 0; i < P; ++i) {
        m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grad[i];
        v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
        params[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
      }
      ++global_step;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(train_idx.size());
    em.clip_events = clip_events;
    if (!val_idx.empty()) {
      const EvalReport val = evaluate_indices(model, data, val_idx);
      em.val_top1 = val.top1;
      em.val_top5 = val.top5;
    }
    result.history.push_back(em);

    total_clip_events += clip_events;
    if (em.val_top1 > best_top1) {
      best_top1 = em.val_top1;
      result.best = snapshot_checkpoint(model);
      result.best.seed = cfg.seed;
      result.best.best_epoch = epoch;
      result.best.val_top1 = em.val_top1;
      result.best.val_top5 = em.val_top5;
    }
  }

  result.best.clip_events = total_clip_events;
  restore_checkpoint(model, result.best);
  return result;
}

// -- config JSON ----------------------------------------------------------------

TrainConfig train_config_from_json_text(const std::string& text) {
  json j = json::parse(text);
  TrainConfig cfg;
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
  cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
  cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
  cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.val_fraction = j.value("val_fraction", cfg.val_fraction);
  cfg.selection = j.value("selection", cfg.selection);
  if (j.contains("augmentation")) {
    const std::string a = j.at("augmentation").get<std::string>();
    if (a == "none")
      cfg.augmentation = Augmentation::None;
    else if (a == "rotate")
      cfg.augmentation = Augmentation::Rotate;
    else
      throw std::invalid_argument("unknown augmentation mode: " + a);
  }
  if (j.contains("model")) {
    if (j.at("model").is_string())
      cfg.model = j.at("model").get<std::string>();
    else
      cfg.inline_spec = nn::model_spec_from_json_text(j.at("model").dump());
  }
  return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["clip_norm"] = cfg.clip_norm;
  j["seed"] = cfg.seed;
  j["val_fraction"] = cfg.val_fraction;
  j["selection"] = cfg.selection;
  j["augmentation"] = cfg.augmentation == Augmentation::Rotate ? "rotate" : "none";
  if (cfg.inline_spec)
    j["model"] = json::parse(nn::model_spec_to_json(*cfg.inline_spec));
  else
    j["model"] = cfg.model;
  return j.dump(2);
}

// -- checkpoint file --------------------------------------------------------------

namespace {

void append_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void append_f64_le(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

double read_f64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string blob;
  blob.reserve((ckpt.params.size() + 64) * 8);
  for (double d : ckpt.params) append_f64_le(blob, d);
  for (const auto& mu : ckpt.bn_mu)
    for (double d : mu) append_f64_le(blob, d);
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(blob.data()), static_cast<uInt>(blob.size())));

  json header;
  header["version"] = 1;
  header["model"] = json::parse(nn::model_spec_to_json(ckpt.spec));
  header["params"] = {{"count", ckpt.params.size()}};
  json bn = json::array();
  for (const auto& mu : ckpt.bn_mu) bn.push_back(mu.size());
  header["batchnorm_channels"] = bn;
  header["blob"] = {{"offset", 0}, {"bytes", blob.size()}, {"crc32", crc}};
  header["meta"] = {{"seed", ckpt.seed},
                    {"best_epoch", ckpt.best_epoch},
                    {"val_top1", ckpt.val_top1},
                    {"val_top5", ckpt.val_top5},
                    {"clip_events", ckpt.clip_events}};

  // The blob offset depends on the header's own length; iterate to the fixed
  // point (digit-count changes converge within a few rounds).
  std::string htext;
  for (int i = 0; i < 8; ++i) {
    htext = header.dump();
    const std::size_t offset = 8 + htext.size();
    if (header["blob"]["offset"] == offset) break;
    header["blob"]["offset"] = offset;
  }
  htext = header.dump();

  std::string out = "QCK1";
  append_u32_le(out, static_cast<std::uint32_t>(htext.size()));
  out += htext;
  out += blob;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 || buf.compare(0, 4, "QCK1") != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + 4);
  const std::uint32_t hlen = static_cast<std::uint32_t>(p[0]) | (p[1] << 8) | (p[2] << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  if (8 + static_cast<std::size_t>(hlen) > buf.size())
    throw std::runtime_error("load_checkpoint: truncated header");
  json header = json::parse(buf.substr(8, hlen));
  if (header.at("version").get<int>() != 1)
    throw std::runtime_error("load_checkpoint: unsupported version");

  Checkpoint ck;
  ck.spec = nn::model_spec_from_json_text(header.at("model").dump());
  const std::size_t offset = header.at("blob").at("offset").get<std::size_t>();
  const std::size_t bytes = header.at("blob").at("bytes").get<std::size_t>();
  const std::uint32_t want_crc = header.at("blob").at("crc32").get<std::uint32_t>();
  if (offset != 8 + static_cast<std::size_t>(hlen) || offset + bytes > buf.size())
    throw std::runtime_error("load_checkpoint: blob offset/size out of range");
  const std::uint32_t got_crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data() + offset), static_cast<uInt>(bytes)));
  if (got_crc != want_crc)
    throw std::runtime_error("load_checkpoint: blob CRC32 mismatch (corrupted file)");

  const std::size_t param_count = header.at("params").at("count").get<std::size_t>();
  std::vector<std::size_t> bn_sizes;
  for (const auto& e : header.at("batchnorm_channels")) bn_sizes.push_back(e.get<std::size_t>());
  std::size_t want_doubles = param_count;
  for (std::size_t s : bn_sizes) want_doubles += s;
  if (bytes != want_doubles * 8)
    throw std::runtime_error("load_checkpoint: blob size does not match the declared arrays");

  const auto* blob = reinterpret_cast<const unsigned char*>(buf.data() + offset);
  ck.params.resize(param_count);
  for (std::size_t i = 0; i < param_count; ++i) ck.params[i] = read_f64_le(blob + 8 * i);
  std::size_t pos = param_count;
  for (std::size_t s : bn_sizes) {
    std::vector<double> mu(s);
    for (std::size_t i = 0; i < s; ++i) mu[i] = read_f64_le(blob + 8 * (pos + i));
    pos += s;
    ck.bn_mu.push_back(std::move(mu));
  }
  const json& meta = header.at("meta");
  ck.seed = meta.value("seed", std::uint64_t{0});
  ck.best_epoch = meta.value("best_epoch", -1);
  ck.val_top1 = meta.value("val_top1", 0.0);
  ck.val_top5 = meta.value("val_top5", 0.0);
  ck.clip_events = meta.value("clip_events", 0l);
  return ck;
}

void write_metrics_csv(const std::vector<EpochMetrics>& history,
                       const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_metrics_csv: cannot open " + path.string());
  f << "epoch,train_loss,val_top1,val_top5,clip_events\n";
  for (const EpochMetrics& e : history)
    f << e.epoch << ',' << fmt("%.12g", e.train_loss) << ',' << fmt("%.6f", e.val_top1) << ','
      << fmt("%.6f", e.val_top5) << ',' << e.clip_events << "\n";
}

// -- experiments -------------------------------------------------------------------

ExperimentConfig experiment_config_from_json_text(const std::string& text) {
  json j = json::parse(text);
  ExperimentConfig cfg;
  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    if (d.contains("path")) {
      cfg.dataset.path = d.at("path").get<std::string>();
    } else {
      cfg.dataset.synthetic.num_classes = d.value("classes", cfg.dataset.synthetic.num_classes);
      cfg.dataset.synthetic.cycles_per_class =
          d.value("per_class", cfg.dataset.synthetic.cycles_per_class);
      cfg.dataset.synthetic.length = d.value("T", cfg.dataset.synthetic.length);
      cfg.dataset.synthetic.noise_sigma =
          d.value("noise_sigma", cfg.dataset.synthetic.noise_sigma);
      cfg.dataset.synthetic.seed = d.value("seed", cfg.dataset.synthetic.seed);
    }
  }
  cfg.test_per_class = j.value("test_per_class", cfg.test_per_class);
  cfg.rotation_seed = j.value("rotation_seed", cfg.rotation_seed);
  if (j.contains("flip_axis")) {
    const std::string a = j.at("flip_axis").get<std::string>();
    if (a != "x" && a != "y" && a != "z")
      throw std::invalid_argument("flip_axis must be x, y, or z");
    cfg.flip_axis = a[0];
  }
  if (j.contains("train")) cfg.train_qcnn = train_config_from_json_text(j.at("train").dump());
  cfg.train_cnn = cfg.train_qcnn;
  cfg.train_cnn.model = "cnn-baseline";
  if (j.contains("train_cnn")) {
    TrainConfig base = train_config_from_json_text(j.at("train_cnn").dump());
    cfg.train_cnn = base;
    if (!j.at("train_cnn").contains("model")) cfg.train_cnn.model = "cnn-baseline";
  }
  if (cfg.train_qcnn.model == "cnn-baseline")
    throw std::invalid_argument("experiment train block must name a quaternion model");
  return cfg;
}

namespace {

gait::GaitDataset load_or_generate(const DatasetSource& src) {
  if (src.path) return gait::load_dataset(*src.path);
  return gait::generate_synthetic_dataset(src.synthetic);
}

// Stratified split: `test_per_class` cycles of each class go to the second set.
void split_test(const gait::GaitDataset& data, int test_per_class, std::uint64_t seed,
                gait::GaitDataset& trainval, gait::GaitDataset& test) {
  std::vector<std::vector<int>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.cycles.size(); ++i)
    by_class[data.cycles[i].label].push_back(static_cast<int>(i));
  trainval.num_classes = test.num_classes = data.num_classes;
  trainval.meta = data.meta;
  test.meta = data.meta;
  trainval.meta.split = gait::Split::Train;
  test.meta.split = gait::Split::Test;
  RandomStream rng(seed);
  for (int k = 0; k < data.num_classes; ++k) {
    auto idx = by_class[k];
    RandomStream s = rng.fork("class-split", static_cast<std::uint64_t>(k));
    s.shuffle(idx);
    const int ntest = std::min<int>(test_per_class, static_cast<int>(idx.size()) - 1);
    if (ntest < 1) throw std::invalid_argument("split_test: class too small for a test split");
    for (int i = 0; i < static_cast<int>(idx.size()); ++i) {
      (i < ntest ? test : trainval).cycles.push_back(data.cycles[idx[i]]);
    }
  }
}

struct TrainedPair {
  Checkpoint checkpoint;
  nn::Model model;
};

TrainedPair train_fresh(const TrainConfig& cfg, const gait::GaitDataset& data,
                        std::uint64_t seed_salt) {
  const int T = data.cycles.front().length();
  TrainConfig c = cfg;
  c.seed = RandomStream(cfg.seed).fork("run", seed_salt).root_seed();
  nn::Model model = build_model_from_config(c, data.num_classes, T);
  RandomStream init_rng = RandomStream(c.seed).fork("model-init");
  model.init_params(init_rng);
  TrainResult r = train(model, data, c);
  return {std::move(r.best), std::move(model)};
}

}  // namespace

MatrixResult run_experiment_matrix(const ExperimentConfig& cfg) {
  const gait::GaitDataset full = load_or_generate(cfg.dataset);
  gait::GaitDataset trainval, test;
  split_test(full, cfg.test_per_class, cfg.rotation_seed, trainval, test);

  RandomStream rot(cfg.rotation_seed);
  RandomStream rot_train = rot.fork("rotate-train");
  RandomStream rot_test = rot.fork("rotate-test");
  const gait::GaitDataset trainval_rot = gait::rotate_dataset(trainval, rot_train);
  const gait::GaitDataset test_rot = gait::rotate_dataset(test, rot_test);

  MatrixResult res;

  TrainedPair q_orig = train_fresh(cfg.train_qcnn, trainval, 1);
  res.original_original.qcnn = evaluate(q_orig.model, test);
  res.original_rotated.qcnn = evaluate(q_orig.model, test_rot);
  res.qcnn_original = std::move(q_orig.checkpoint);

  TrainedPair q_rot = train_fresh(cfg.train_qcnn, trainval_rot, 2);
  res.rotated_rotated.qcnn = evaluate(q_rot.model, test_rot);

  TrainedPair c_orig = train_fresh(cfg.train_cnn, trainval, 3);
  res.original_original.cnn = evaluate(c_orig.model, test);
  res.original_rotated.cnn = evaluate(c_orig.model, test_rot);
  res.cnn_original = std::move(c_orig.checkpoint);

  TrainedPair c_rot = train_fresh(cfg.train_cnn, trainval_rot, 4);
  res.rotated_rotated.cnn = evaluate(c_rot.model, test_rot);

  return res;
}

namespace {

std::string grid_csv(const char* header, const std::vector<std::pair<std::string, RegimeResult>>& rows) {
  std::string out = header;
  out += "\n";
  for (const auto& [name, r] : rows) {
    out += name + "," + fmt("%.6f", r.qcnn.top1) + "," + fmt("%.6f", r.qcnn.top5) + "," +
           fmt("%.6f", r.cnn.top1) + "," + fmt("%.6f", r.cnn.top5) + "\n";
  }
  return out;
}

std::string grid_table(const char* row_title,
                       const std::vector<std::pair<std::string, RegimeResult>>& rows) {
  char line[160];
  std::string out;
  std::snprintf(line, sizeof line, "%-20s %12s %12s %12s %12s\n", row_title, "qcnn-top1",
                "qcnn-top5", "cnn-top1", "cnn-top5");
  out += line;
  out += std::string(72, '-') + "\n";
  for (const auto& [name, r] : rows) {
    std::snprintf(line, sizeof line, "%-20s %11.2f%% %11.2f%% %11.2f%% %11.2f%%\n", name.c_str(),
                  100.0 * r.qcnn.top1, 100.0 * r.qcnn.top5, 100.0 * r.cnn.top1,
                  100.0 * r.cnn.top5);
    out += line;
  }
  return out;
}

}  // namespace

std::string matrix_csv(const MatrixResult& r) {
  return grid_csv("regime,qcnn_top1,qcnn_top5,cnn_top1,cnn_top5",
                  {{"original/original", r.original_original},
                   {"original/rotated", r.original_rotated},
                   {"rotated/rotated", r.rotated_rotated}});
}

std::string matrix_table(const MatrixResult& r) {
  return grid_table("train/test",
                    {{"original/original", r.original_original},
                     {"original/rotated", r.original_rotated},
                     {"rotated/rotated", r.rotated_rotated}});
}

FlipResult flip_experiment(const ExperimentConfig& cfg) {
  const gait::GaitDataset full = load_or_generate(cfg.dataset);
  gait::GaitDataset trainval, test;
  split_test(full, cfg.test_per_class, cfg.rotation_seed, trainval, test);

  Quaternion flip{0.0, 0.0, 0.0, 0.0};
  switch (cfg.flip_axis) {
    case 'x': flip.x = 1.0; break;
    case 'y': flip.y = 1.0; break;
    case 'z': flip.z = 1.0; break;
    default: throw std::invalid_argument("flip axis must be x, y, or z");
  }
  const gait::GaitDataset test_flipped = gait::rotate_dataset_fixed(test, flip);
  const gait::GaitDataset train_flipped = gait::rotate_dataset_fixed(trainval, flip);
  gait::GaitDataset all_flipped = train_flipped;
  all_flipped.cycles.insert(all_flipped.cycles.end(), test_flipped.cycles.begin(),
                            test_flipped.cycles.end());

  TrainedPair q = train_fresh(cfg.train_qcnn, trainval, 11);
  TrainedPair c = train_fresh(cfg.train_cnn, trainval, 12);

  FlipResult res;
  res.test.qcnn = evaluate(q.model, test);
  res.test.cnn = evaluate(c.model, test);
  res.test_flipped.qcnn = evaluate(q.model, test_flipped);
  res.test_flipped.cnn = evaluate(c.model, test_flipped);
  res.train_flipped.qcnn = evaluate(q.model, train_flipped);
  res.train_flipped.cnn = evaluate(c.model, train_flipped);
  res.all_flipped.qcnn = evaluate(q.model, all_flipped);
  res.all_flipped.cnn = evaluate(c.model, all_flipped);
  return res;
}

std::string flip_csv(const FlipResult& r) {
  return grid_csv("split,qcnn_top1,qcnn_top5,cnn_top1,cnn_top5",
                  {{"test", r.test},
                   {"test-flipped", r.test_flipped},
                   {"train-flipped", r.train_flipped},
                   {"all-flipped", r.all_flipped}});
}

std::string flip_table(const FlipResult& r) {
  return grid_table("split", {{"test", r.test},
                              {"test-flipped", r.test_flipped},
                              {"train-flipped", r.train_flipped},
                              {"all-flipped", r.all_flipped}});
}

}  // namespace qcnn::train
