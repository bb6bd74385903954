#include "qcnn/viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json.hpp"

namespace qcnn::viz {

namespace {

using nlohmann::json;

struct LayerRef {
  int cin, cout, taps, stride, padding;
  nn::QConvForm form;
};

LayerRef qconv_layer_ref(const nn::Model& model, int layer, int out_channel) {
  if (layer < 0 || layer >= model.layer_count() ||
      model.layer(layer).kind != nn::LayerKind::QConv)
    throw std::invalid_argument("viz: target layer must be a qconv layer");
  const nn::LayerSpec& l = model.layer(layer);
  if (out_channel < 0 || out_channel >= l.out_channels)
    throw std::invalid_argument("viz: out_channel out of range");
  return {l.in_channels, l.out_channels, l.taps, l.stride, l.padding, l.form};
}

// The (a,b,c) rows of one (out_channel, in_channel) filter slice, packed as a
// standalone 1-in/1-out parameter block.
std::vector<double> slice_params(const nn::Model& model, int layer, const LayerRef& ref,
                                 int out_channel, int in_channel) {
  auto p = model.layer_params(layer);
  const std::int64_t lcc = static_cast<std::int64_t>(ref.taps) * ref.cin * ref.cout;
  const std::int64_t row = (static_cast<std::int64_t>(out_channel) * ref.cin + in_channel) *
                           ref.taps;
  std::vector<double> block(3 * static_cast<std::size_t>(ref.taps));
  for (int i = 0; i < ref.taps; ++i) {
    block[i] = p[row + i];
    block[ref.taps + i] = p[lcc + row + i];
    block[2 * ref.taps + i] = p[2 * lcc + row + i];
  }
  return block;
}

std::vector<double> embed_window(std::span<const double> points) {
  const std::size_t L = points.size() / 3;
  std::vector<double> buf(L * 4, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    buf[4 * t + 1] = points[3 * t];
    buf[4 * t + 2] = points[3 * t + 1];
    buf[4 * t + 3] = points[3 * t + 2];
  }
  return buf;
}

double window_rms(std::span<const double> points) {
  double ss = 0.0;
  for (double v : points) ss += v * v;
  return std::sqrt(ss / (points.size() / 3));
}

void project_rms1(std::vector<double>& points) {
  const double r = window_rms(points);
  if (r < 1e-300) throw std::runtime_error("viz: window collapsed to zero during ascent");
  for (double& v : points) v /= r;
}

struct Eval {
  double activation;
  Quaternion output;
  std::vector<double> grad;  // [L][3]; empty unless requested
};

Eval eval_window(const std::vector<double>& block, std::span<const double> points, int taps,
                 nn::QConvForm form, bool want_grad) {
  ad::Tape tape;
  ad::Var w = tape.leaf({1, 1, taps, 4}, embed_window(points), want_grad);
  ad::Var p = tape.constant({static_cast<int>(block.size())}, block);
  ad::Var y = nn::qconv_op(tape, w, p, taps, 1, 0, 1, form);
  ad::Var act = ad::magnitude(y);  // [1,1,1]

  Eval e;
  auto yv = y.value();
  e.output = {yv[0], yv[1], yv[2], yv[3]};
  e.activation = act.value()[0];
  if (want_grad) {
    tape.backward(act);
    auto g = w.grad();
    e.grad.resize(static_cast<std::size_t>(taps) * 3);
    if (!g.empty())
      for (int t = 0; t < taps; ++t)
        for (int c = 0; c < 3; ++c) e.grad[3 * t + c] = g[4 * t + 1 + c];
  }
  return e;
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

TrajectoryFragment maximize_kernel_activation(const nn::Model& model, int layer,
                                              int out_channel, std::uint64_t seed,
                                              const AscentOptions& opts) {
  const LayerRef ref = qconv_layer_ref(model, layer, out_channel);
  const int L = ref.taps;

  // One shared seed window: every kernel starts from the same trajectory so
  // the optimized fragments have comparable orientations.
  std::vector<double> seed_points(static_cast<std::size_t>(L) * 3);
  {
    RandomStream rng = RandomStream(seed).fork("viz-window");
    for (double& v : seed_points) v = rng.normal();
    project_rms1(seed_points);
  }

  TrajectoryFragment best;
  best.kernel = out_channel;
  best.layer = layer;
  bool have = false;

  for (int ci = 0; ci < ref.cin; ++ci) {
    const std::vector<double> block = slice_params(model, layer, ref, out_channel, ci);
    std::vector<double> w = seed_points;
    Eval cur = eval_window(block, w, L, ref.form, true);
    bool flat = false;
    double eta = opts.step_size;
    for (int step = 0; step < opts.steps; ++step) {
      if (!std::isfinite(cur.activation) || !all_finite(cur.grad))
        throw std::runtime_error("viz: non-finite values during ascent at step " +
                                 std::to_string(step));
      double gn = 0.0;
      for (double g : cur.grad) gn += g * g;
      if (gn == 0.0) {
        flat = cur.activation == 0.0;
        break;  // stationary; nothing to climb
      }
      std::vector<double> trial = w;
      for (std::size_t i = 0; i < trial.size(); ++i) trial[i] += eta * cur.grad[i];
      project_rms1(trial);
      Eval ev = eval_window(block, trial, L, ref.form, false);
      if (!std::isfinite(ev.activation))
        throw std::runtime_error("viz: non-finite activation during ascent at step " +
                                 std::to_string(step));
      if (ev.activation < cur.activation) {
        eta *= 0.5;
        if (eta < 1e-12) break;
        continue;
      }
      w = std::move(trial);
      cur = eval_window(block, w, L, ref.form, true);
    }
    if (!have || cur.activation > best.activation) {
      have = true;
      best.points = w;
      best.activation = cur.activation;
      best.output_real = cur.output.w;
      best.output_vector = vector_part(cur.output);
      best.flat_landscape = flat;
    }
  }
  return best;
}

std::vector<TracePoint> apply_kernel_trace(const nn::Model& model, int layer, int out_channel,
                                           std::span<const double> cycle) {
  const LayerRef ref = qconv_layer_ref(model, layer, out_channel);
  const std::vector<double> acts = model.quaternion_activations_before(layer, cycle);
  const int n = model.layout(layer).in_length;

  ad::Tape tape;
  ad::Var x = tape.constant({1, ref.cin, n, 4}, acts);
  ad::Var p = tape.constant({static_cast<int>(model.layout(layer).param_count)},
                            model.layer_params(layer));
  ad::Var y = nn::qconv_op(tape, x, p, ref.taps, ref.stride, ref.padding, ref.cout, ref.form);

  const int np = model.layout(layer).out_length;
  auto yv = y.value();
  std::vector<TracePoint> out(np);
  for (int t = 0; t < np; ++t) {
    const double* q = yv.data() + (static_cast<std::size_t>(out_channel) * np + t) * 4;
    TracePoint& tp = out[t];
    tp.position = t;
    tp.input_pivot = t * ref.stride - ref.padding + (ref.taps - 1) / 2;
    tp.real = q[0];
    tp.vec = {q[1], q[2], q[3]};
    tp.magnitude = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  }
  return out;
}

std::string viz_to_json(const VizDocument& doc) {
  json j;
  j["checkpoint"] = doc.checkpoint_path;
  j["layer"] = doc.layer;
  j["seed"] = doc.seed;
  j["fragments"] = json::array();
  for (const TrajectoryFragment& f : doc.fragments) {
    json e;
    e["kernel"] = f.kernel;
    json pts = json::array();
    const std::size_t L = f.points.size() / 3;
    for (std::size_t t = 0; t < L; ++t)
      pts.push_back({f.points[3 * t], f.points[3 * t + 1], f.points[3 * t + 2]});
    e["points"] = pts;
    e["output_vector"] = {f.output_vector.x, f.output_vector.y, f.output_vector.z};
    e["output_real"] = f.output_real;
    e["activation"] = f.activation;
    j["fragments"].push_back(e);
  }
  if (!doc.traces.empty()) {
    j["traces"] = json::array();
    for (const KernelTrace& tr : doc.traces) {
      json e;
      e["kernel"] = tr.kernel;
      json pos = json::array(), piv = json::array(), re = json::array(), vec = json::array(),
           mag = json::array();
      for (const TracePoint& p : tr.points) {
        pos.push_back(p.position);
        piv.push_back(p.input_pivot);
        re.push_back(p.real);
        vec.push_back({p.vec.x, p.vec.y, p.vec.z});
        mag.push_back(p.magnitude);
      }
      e["positions"] = pos;
      e["input_pivots"] = piv;
      e["real"] = re;
      e["vectors"] = vec;
      e["magnitude"] = mag;
      j["traces"].push_back(e);
    }
  }
  return j.dump(2);
}

namespace {

struct P2 {
  double u, v;
};

// Fixed isometric projection; +y points up on screen.
P2 project(double x, double y, double z) {
  return {(x - z) * 0.8660254037844386, (x + z) * 0.5 - y};
}

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::string render_svg(const std::string& json_text) {
  const json j = json::parse(json_text);
  const auto& frags = j.at("fragments");
  const int n = static_cast<int>(frags.size());
  const int cols = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n)))));
  const int rows = n == 0 ? 1 : (n + cols - 1) / cols;
  const double cell = 180.0, pad = 18.0;

  std::string svg;
  char head[256];
  std::snprintf(head, sizeof head,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
                "viewBox=\"0 0 %d %d\">\n",
                static_cast<int>(cols * cell), static_cast<int>(rows * cell),
                static_cast<int>(cols * cell), static_cast<int>(rows * cell));
  svg += head;
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  for (int fi = 0; fi < n; ++fi) {
    const auto& f = frags[fi];
    std::vector<P2> pts;
    for (const auto& p : f.at("points"))
      pts.push_back(project(p[0].get<double>(), p[1].get<double>(), p[2].get<double>()));
    const P2 origin = project(0, 0, 0);
    const std::size_t pivot = pts.empty() ? 0 : (pts.size() - 1) / 2;
    const auto& ov = f.at("output_vector");
    const auto& praw = f.at("points");
    P2 tip = origin;
    if (!pts.empty()) {
      tip = project(praw[pivot][0].get<double>() + ov[0].get<double>(),
                    praw[pivot][1].get<double>() + ov[1].get<double>(),
                    praw[pivot][2].get<double>() + ov[2].get<double>());
    }

    double lo_u = origin.u, hi_u = origin.u, lo_v = origin.v, hi_v = origin.v;
    for (const P2& p : pts) {
      lo_u = std::min(lo_u, p.u);
      hi_u = std::max(hi_u, p.u);
      lo_v = std::min(lo_v, p.v);
      hi_v = std::max(hi_v, p.v);
    }
    lo_u = std::min(lo_u, tip.u);
    hi_u = std::max(hi_u, tip.u);
    lo_v = std::min(lo_v, tip.v);
    hi_v = std::max(hi_v, tip.v);
    const double span = std::max({hi_u - lo_u, hi_v - lo_v, 1e-6});
    const double s = (cell - 2 * pad) / span;
    const double ox = (fi % cols) * cell, oy = (fi / cols) * cell;
    auto X = [&](const P2& p) { return ox + pad + (p.u - lo_u) * s; };
    auto Y = [&](const P2& p) { return oy + pad + (p.v - lo_v) * s; };

    char line[256];
    std::snprintf(line, sizeof line,
                  "<rect x=\"%s\" y=\"%s\" width=\"%s\" height=\"%s\" fill=\"none\" "
                  "stroke=\"#dddddd\"/>\n",
                  num(ox + 1).c_str(), num(oy + 1).c_str(), num(cell - 2).c_str(),
                  num(cell - 2).c_str());
    svg += line;
    // origin marker
    std::snprintf(line, sizeof line,
                  "<path d=\"M %s %s h 8 m -4 -4 v 8\" stroke=\"#999999\" fill=\"none\"/>\n",
                  num(X(origin) - 4).c_str(), num(Y(origin)).c_str());
    svg += line;
    if (!pts.empty()) {
      std::string poly = "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.6\" points=\"";
      for (const P2& p : pts) poly += num(X(p)) + "," + num(Y(p)) + " ";
      poly += "\"/>\n";
      svg += poly;
      std::snprintf(line, sizeof line, "<circle cx=\"%s\" cy=\"%s\" r=\"2.4\" fill=\"#1f77b4\"/>\n",
                    num(X(pts[pivot])).c_str(), num(Y(pts[pivot])).c_str());
      svg += line;
      // output vector, rooted at the pivot
      std::snprintf(line, sizeof line,
                    "<line x1=\"%s\" y1=\"%s\" x2=\"%s\" y2=\"%s\" stroke=\"#d62728\" "
                    "stroke-width=\"1.6\"/>\n",
                    num(X(pts[pivot])).c_str(), num(Y(pts[pivot])).c_str(), num(X(tip)).c_str(),
                    num(Y(tip)).c_str());
      svg += line;
      std::snprintf(line, sizeof line, "<circle cx=\"%s\" cy=\"%s\" r=\"2.0\" fill=\"#d62728\"/>\n",
                    num(X(tip)).c_str(), num(Y(tip)).c_str());
      svg += line;
    }
    char label[96];
    std::snprintf(label, sizeof label, "k%d  a=%.3f", f.at("kernel").get<int>(),
                  f.at("activation").get<double>());
    std::snprintf(line, sizeof line,
                  "<text x=\"%s\" y=\"%s\" font-family=\"monospace\" font-size=\"11\" "
                  "fill=\"#333333\">%s</text>\n",
                  num(ox + 8).c_str(), num(oy + 14).c_str(), label);
    svg += line;
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace qcnn::viz
