#include "tttseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include <json.hpp>

namespace tttseg {

void LabelMask::validate() const {
  if (labels.rank() != 2) throw ShapeError("label mask must be [H x W], got " + shape_str(labels.shape()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = labels[i];
    if (v < 0.0 || v != std::floor(v) || v >= static_cast<double>(num_classes)) {
      throw ValueError("label value " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

namespace {

void check_same_shape(const LabelMask& a, const LabelMask& b) {
  if (!a.labels.same_shape(b.labels)) {
    throw ShapeError("mask shape mismatch: " + shape_str(a.labels.shape()) + " vs " +
                     shape_str(b.labels.shape()));
  }
}

struct Pixel {
  int row, col;
};

std::vector<Pixel> class_boundary(const Tensor& mask, int cls) {
  const int h = static_cast<int>(mask.extent(0));
  const int w = static_cast<int>(mask.extent(1));
  auto cls_at = [&](int r, int c) { return static_cast<int>(mask[static_cast<std::size_t>(r) * w + c]); };
  std::vector<Pixel> out;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (cls_at(r, c) != cls) continue;
      const bool edge = r == 0 || r == h - 1 || c == 0 || c == w - 1;
      if (edge || cls_at(r - 1, c) != cls || cls_at(r + 1, c) != cls || cls_at(r, c - 1) != cls ||
          cls_at(r, c + 1) != cls) {
        out.push_back({r, c});
      }
    }
  }
  return out;
}

std::size_t within_tolerance(const std::vector<Pixel>& from, const std::vector<Pixel>& to, double tau) {
  const double tau2 = tau * tau;
  std::size_t hits = 0;
  for (const Pixel& a : from) {
    bool hit = false;
    for (const Pixel& b : to) {
      const double dr = a.row - b.row;
      const double dc = a.col - b.col;
      if (dr * dr + dc * dc <= tau2) {
        hit = true;
        break;
      }
    }
    hits += hit;
  }
  return hits;
}

// BFS connected-component labelling of nonzero pixels, 4-connectivity.
std::vector<int> components(const Tensor& mask, int& count) {
  const int h = static_cast<int>(mask.extent(0));
  const int w = static_cast<int>(mask.extent(1));
  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  count = 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * w + c;
      if (mask[idx] <= 0.0 || label[idx] >= 0) continue;
      const int id = count++;
      std::deque<Pixel> queue{{r, c}};
      label[idx] = id;
      while (!queue.empty()) {
        const Pixel p = queue.front();
        queue.pop_front();
        const int dr[4] = {-1, 1, 0, 0};
        const int dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int nr = p.row + dr[k], nc = p.col + dc[k];
          if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
          const std::size_t nidx = static_cast<std::size_t>(nr) * w + nc;
          if (mask[nidx] <= 0.0 || label[nidx] >= 0) continue;
          label[nidx] = id;
          queue.push_back({nr, nc});
        }
      }
    }
  }
  return label;
}

}  // namespace

double dsc(const LabelMask& pred, const LabelMask& gt, int cls) {
  check_same_shape(pred, gt);
  std::size_t p = 0, g = 0, inter = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool ip = static_cast<int>(pred.labels[i]) == cls;
    const bool ig = static_cast<int>(gt.labels[i]) == cls;
    p += ip;
    g += ig;
    inter += ip && ig;
  }
  if (p == 0 && g == 0) return 1.0;
  if (p == 0 || g == 0) return 0.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

double nsd(const LabelMask& pred, const LabelMask& gt, int cls, double tau) {
  check_same_shape(pred, gt);
  if (tau < 0.0) throw ValueError("nsd tolerance must be >= 0");
  const auto bp = class_boundary(pred.labels, cls);
  const auto bg = class_boundary(gt.labels, cls);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;
  const std::size_t hits = within_tolerance(bp, bg, tau) + within_tolerance(bg, bp, tau);
  return static_cast<double>(hits) / static_cast<double>(bp.size() + bg.size());
}

double instance_f1(const LabelMask& pred, const LabelMask& gt, double iou_threshold) {
  check_same_shape(pred, gt);
  int np = 0, ng = 0;
  const auto pl = components(pred.labels, np);
  const auto gl = components(gt.labels, ng);
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;

  std::vector<std::size_t> psize(np, 0), gsize(ng, 0);
  std::vector<std::vector<std::size_t>> inter(np, std::vector<std::size_t>(ng, 0));
  for (std::size_t i = 0; i < pl.size(); ++i) {
    if (pl[i] >= 0) ++psize[pl[i]];
    if (gl[i] >= 0) ++gsize[gl[i]];
    if (pl[i] >= 0 && gl[i] >= 0) ++inter[pl[i]][gl[i]];
  }
  struct Cand {
    double iou;
    int p, g;
  };
  std::vector<Cand> cands;
  for (int p = 0; p < np; ++p) {
    for (int g = 0; g < ng; ++g) {
      if (inter[p][g] == 0) continue;
      const double uni = static_cast<double>(psize[p] + gsize[g] - inter[p][g]);
      cands.push_back({static_cast<double>(inter[p][g]) / uni, p, g});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  std::vector<bool> usedp(np, false), usedg(ng, false);
  int tp = 0;
  for (const Cand& c : cands) {
    if (c.iou < iou_threshold) break;
    if (usedp[c.p] || usedg[c.g]) continue;
    usedp[c.p] = true;
    usedg[c.g] = true;
    ++tp;
  }
  const int fp = np - tp, fn = ng - tp;
  return 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

MetricsAccumulator::MetricsAccumulator(std::size_t num_classes, double tau, bool with_instance_f1,
                                       double iou_threshold)
    : num_classes_(num_classes),
      tau_(tau),
      with_f1_(with_instance_f1),
      iou_threshold_(iou_threshold),
      dsc_sums_(num_classes > 0 ? num_classes - 1 : 0, 0.0),
      nsd_sums_(num_classes > 0 ? num_classes - 1 : 0, 0.0) {
  if (num_classes < 2) throw ValueError("metrics need at least 2 classes");
  if (tau < 0.0) throw ValueError("nsd tolerance must be >= 0");
}

void MetricsAccumulator::add(const LabelMask& pred, const LabelMask& gt) {
  check_same_shape(pred, gt);
  double case_dsc = 0.0, case_nsd = 0.0;
  for (std::size_t cls = 1; cls < num_classes_; ++cls) {
    // Track the empty-mask conventions so aggregates are auditable.
    std::size_t p = 0, g = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
      p += static_cast<int>(pred.labels[i]) == static_cast<int>(cls);
      g += static_cast<int>(gt.labels[i]) == static_cast<int>(cls);
    }
    if (p == 0 && g == 0) {
      ++both_empty_;
    } else if (p == 0 || g == 0) {
      ++one_empty_;
    }
    const double d = dsc(pred, gt, static_cast<int>(cls));
    const double s = nsd(pred, gt, static_cast<int>(cls), tau_);
    dsc_sums_[cls - 1] += d;
    nsd_sums_[cls - 1] += s;
    case_dsc += d;
    case_nsd += s;
  }
  const double fg = static_cast<double>(num_classes_ - 1);
  case_dsc_.push_back(case_dsc / fg);
  case_nsd_.push_back(case_nsd / fg);
  if (with_f1_) {
    // Binarize at class 1 (interior convention for cell-style tasks).
    auto binarize = [](const LabelMask& m) {
      Tensor b(m.labels.shape());
      for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<int>(m.labels[i]) == 1 ? 1.0 : 0.0;
      return LabelMask{b, 2};
    };
    f1_.push_back(instance_f1(binarize(pred), binarize(gt), iou_threshold_));
  }
}

MetricsReport MetricsAccumulator::finalize() const {
  MetricsReport r;
  r.tau = tau_;
  r.iou_threshold = iou_threshold_;
  r.num_samples = case_dsc_.size();
  r.both_empty_pairs = both_empty_;
  r.one_empty_pairs = one_empty_;
  const double n = r.num_samples > 0 ? static_cast<double>(r.num_samples) : 1.0;
  double dsc_acc = 0.0, nsd_acc = 0.0;
  for (std::size_t cls = 1; cls < num_classes_; ++cls) {
    ClassAggregate agg;
    agg.cls = static_cast<int>(cls);
    agg.samples = r.num_samples;
    agg.mean_dsc = dsc_sums_[cls - 1] / n;
    agg.mean_nsd = nsd_sums_[cls - 1] / n;
    dsc_acc += agg.mean_dsc;
    nsd_acc += agg.mean_nsd;
    r.per_class.push_back(agg);
  }
  const double fg = static_cast<double>(num_classes_ - 1);
  r.mean_dsc_per_class = dsc_acc / fg;
  r.mean_nsd_per_class = nsd_acc / fg;
  double case_dsc = 0.0, case_nsd = 0.0;
  for (double v : case_dsc_) case_dsc += v;
  for (double v : case_nsd_) case_nsd += v;
  r.mean_dsc_per_case = case_dsc / n;
  r.mean_nsd_per_case = case_nsd / n;
  if (with_f1_) {
    double acc = 0.0;
    for (double v : f1_) acc += v;
    r.mean_instance_f1 = acc / n;
  }
  return r;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["tau"] = tau;
  j["iou_threshold"] = iou_threshold;
  j["num_samples"] = num_samples;
  j["aggregation"] = {{"per_class", "mean over samples per class, then over classes"},
                      {"per_case", "mean over foreground classes per sample, then over samples"}};
  j["mean_dsc_per_class"] = mean_dsc_per_class;
  j["mean_nsd_per_class"] = mean_nsd_per_class;
  j["mean_dsc_per_case"] = mean_dsc_per_case;
  j["mean_nsd_per_case"] = mean_nsd_per_case;
  if (mean_instance_f1) j["mean_instance_f1"] = *mean_instance_f1;
  j["empty_conventions"] = {{"both_empty_pairs", both_empty_pairs}, {"one_empty_pairs", one_empty_pairs}};
  nlohmann::json classes = nlohmann::json::array();
  for (const ClassAggregate& c : per_class) {
    classes.push_back({{"class", c.cls}, {"dsc", c.mean_dsc}, {"nsd", c.mean_nsd}});
  }
  j["per_class"] = classes;
  return j.dump(2);
}

}  // namespace tttseg
