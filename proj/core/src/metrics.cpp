#include "mtvision/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "mtvision/errors.hpp"
#include "mtvision/geometry.hpp"

namespace mtv::metrics {

namespace {

double mask_iou(const Mask& a, const Mask& b) {
  if (a.h != b.h || a.w != b.w) throw ShapeError("mask IoU: raster shape mismatch");
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    const bool pa = a.px[i] != 0, pb = b.px[i] != 0;
    inter += (pa && pb);
    uni += (pa || pb);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct FlatPred {
  int image = 0;
  int index = 0;  // original per-image index, for deterministic ties
  const PredInstance* p = nullptr;
};

constexpr int kMaxDets = 100;

/// AP for one category at one IoU threshold by greedy score-ordered matching.
double ap_single(const std::vector<FlatPred>& preds,
                 const std::vector<std::vector<const GtInstance*>>& gt_by_image, long n_gt,
                 double thresh, APMode mode) {
  std::vector<std::vector<bool>> used(gt_by_image.size());
  for (std::size_t i = 0; i < gt_by_image.size(); ++i)
    used[i].assign(gt_by_image[i].size(), false);

  std::vector<bool> is_tp(preds.size(), false);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto& fp = preds[k];
    const auto& gts = gt_by_image[static_cast<size_t>(fp.image)];
    int best = -1;
    double best_iou = thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[static_cast<size_t>(fp.image)][g]) continue;
      const double iou = mode == APMode::kBox ? box_iou(fp.p->box, gts[g]->box)
                                              : mask_iou(fp.p->mask, gts[g]->mask);
      if (iou > best_iou || (best < 0 && iou >= thresh && iou == best_iou)) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<size_t>(fp.image)][static_cast<size_t>(best)] = true;
      is_tp[k] = true;
    }
  }

  // 101-point interpolated area under the PR curve
  std::vector<double> precision, recall;
  long tp = 0, fpc = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    tp += is_tp[k];
    fpc += !is_tp[k];
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fpc));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  double ap = 0;
  for (int ri = 0; ri <= 100; ++ri) {
    const double r = ri / 100.0;
    double best_p = 0;
    for (std::size_t k = 0; k < precision.size(); ++k)
      if (recall[k] >= r) best_p = std::max(best_p, precision[k]);
    ap += best_p;
  }
  return ap / 101.0;
}

}  // namespace

APResult coco_ap(const std::vector<std::vector<PredInstance>>& predictions,
                 const std::vector<std::vector<GtInstance>>& ground_truth, APMode mode) {
  if (predictions.size() != ground_truth.size())
    throw ShapeError("coco_ap: prediction/GT image counts differ");
  const int n_img = static_cast<int>(ground_truth.size());

  std::set<int> cats;
  long total_gt = 0;
  for (const auto& img : ground_truth)
    for (const auto& g : img) {
      cats.insert(g.category);
      ++total_gt;
    }

  APResult res;
  if (total_gt == 0) {
    res.defined = false;
    res.ap = 0.0;
    return res;
  }

  // maxDets: keep each image's top-scoring predictions
  std::vector<std::vector<FlatPred>> top(static_cast<size_t>(n_img));
  for (int i = 0; i < n_img; ++i) {
    auto& t = top[static_cast<size_t>(i)];
    for (int j = 0; j < static_cast<int>(predictions[static_cast<size_t>(i)].size()); ++j)
      t.push_back({i, j, &predictions[static_cast<size_t>(i)][static_cast<size_t>(j)]});
    std::stable_sort(t.begin(), t.end(),
                     [](const FlatPred& a, const FlatPred& b) { return a.p->score > b.p->score; });
    if (static_cast<int>(t.size()) > kMaxDets) t.resize(kMaxDets);
  }

  double sum_ap = 0;
  for (int cat : cats) {
    std::vector<FlatPred> preds;
    for (const auto& t : top)
      for (const auto& fp : t)
        if (fp.p->category == cat) preds.push_back(fp);
    std::sort(preds.begin(), preds.end(), [](const FlatPred& a, const FlatPred& b) {
      if (a.p->score != b.p->score) return a.p->score > b.p->score;
      if (a.image != b.image) return a.image < b.image;
      return a.index < b.index;
    });

    std::vector<std::vector<const GtInstance*>> gts(static_cast<size_t>(n_img));
    long n_gt = 0;
    for (int i = 0; i < n_img; ++i)
      for (const auto& g : ground_truth[static_cast<size_t>(i)])
        if (g.category == cat) {
          gts[static_cast<size_t>(i)].push_back(&g);
          ++n_gt;
        }

    double cat_ap = 0;
    for (int ti = 0; ti < 10; ++ti)
      cat_ap += ap_single(preds, gts, n_gt, 0.50 + 0.05 * ti, mode);
    cat_ap /= 10.0;
    res.per_category[cat] = cat_ap;
    sum_ap += cat_ap;
  }
  res.ap = sum_ap / static_cast<double>(cats.size());
  return res;
}

void SegIouAccumulator::add(const SemanticMask& pred, const SemanticMask& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw ShapeError("segmentation_iou: raster shape mismatch");
  for (std::size_t i = 0; i < gt.px.size(); ++i) {
    const std::uint8_t p = pred.px[i], g = gt.px[i];
    ++pred_[p];
    ++gt_[g];
    if (p == g) ++inter_[p];
  }
}

void SegIouAccumulator::merge(const SegIouAccumulator& other) {
  for (int i = 0; i < 256; ++i) {
    inter_[static_cast<size_t>(i)] += other.inter_[static_cast<size_t>(i)];
    pred_[static_cast<size_t>(i)] += other.pred_[static_cast<size_t>(i)];
    gt_[static_cast<size_t>(i)] += other.gt_[static_cast<size_t>(i)];
  }
}

SegIouResult SegIouAccumulator::result(const std::vector<int>& categories) const {
  std::set<int> subset(categories.begin(), categories.end());
  SegIouResult r;
  long long total_gt = 0;
  std::vector<int> present;
  for (int c = 0; c < 256; ++c) {
    if (gt_[static_cast<size_t>(c)] == 0) continue;
    if (!subset.empty() && !subset.count(c)) continue;
    present.push_back(c);
    total_gt += gt_[static_cast<size_t>(c)];
  }
  if (present.empty() || total_gt == 0) return r;

  for (int c : present) {
    const long long inter = inter_[static_cast<size_t>(c)];
    const long long uni =
        pred_[static_cast<size_t>(c)] + gt_[static_cast<size_t>(c)] - inter;
    const double iou = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
    r.per_category[c] = iou;
    r.miou += iou;
    r.fwiou += iou * static_cast<double>(gt_[static_cast<size_t>(c)]) /
               static_cast<double>(total_gt);
  }
  r.miou /= static_cast<double>(present.size());
  return r;
}

SegIouResult segmentation_iou(const SemanticMask& pred, const SemanticMask& gt,
                              const std::vector<int>& categories) {
  SegIouAccumulator acc;
  acc.add(pred, gt);
  return acc.result(categories);
}

namespace {

std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& toks,
                                                     int n) {
  std::map<std::vector<std::string>, int> out;
  for (int i = 0; i + n <= static_cast<int>(toks.size()); ++i)
    ++out[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

}  // namespace

double bleu4(const std::vector<std::vector<std::string>>& candidates,
             const std::vector<std::vector<std::vector<std::string>>>& references) {
  if (candidates.empty()) throw ArityError("bleu4: empty candidate set");
  if (references.size() != candidates.size())
    throw ArityError("bleu4: candidate/reference count mismatch");

  long long cand_len = 0, ref_len = 0;
  std::array<long long, 4> numer{}, denom{};

  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    const auto& refs = references[i];
    if (refs.empty()) throw ArityError("bleu4: candidate without references");

    const long long c = static_cast<long long>(cand.size());
    cand_len += c;
    // closest reference length; ties go to the shorter reference
    long long best_r = static_cast<long long>(refs[0].size());
    for (const auto& ref : refs) {
      const long long rl = static_cast<long long>(ref.size());
      if (std::llabs(rl - c) < std::llabs(best_r - c) ||
          (std::llabs(rl - c) == std::llabs(best_r - c) && rl < best_r))
        best_r = rl;
    }
    ref_len += best_r;

    for (int n = 1; n <= 4; ++n) {
      const auto cc = ngram_counts(cand, n);
      std::map<std::vector<std::string>, int> max_ref;
      for (const auto& ref : refs)
        for (const auto& [gram, cnt] : ngram_counts(ref, n))
          max_ref[gram] = std::max(max_ref[gram], cnt);
      for (const auto& [gram, cnt] : cc) {
        const auto it = max_ref.find(gram);
        numer[static_cast<size_t>(n - 1)] += std::min(cnt, it == max_ref.end() ? 0 : it->second);
      }
      denom[static_cast<size_t>(n - 1)] += std::max<long long>(0, c - n + 1);
    }
  }

  if (cand_len == 0) return 0.0;
  double log_p = 0;
  for (int n = 0; n < 4; ++n) {
    if (denom[static_cast<size_t>(n)] == 0 || numer[static_cast<size_t>(n)] == 0) return 0.0;
    log_p += 0.25 * std::log(static_cast<double>(numer[static_cast<size_t>(n)]) /
                             static_cast<double>(denom[static_cast<size_t>(n)]));
  }
  const double bp =
      std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len)));
  return bp * std::exp(log_p);
}

std::string to_json(const MetricReport& r) {
  nlohmann::json j;
  j["box_ap"] = r.box_ap;
  j["box_ap_defined"] = r.box_ap_defined;
  j["mask_ap"] = r.mask_ap;
  j["mask_ap_defined"] = r.mask_ap_defined;
  j["miou"] = r.miou;
  j["fwiou"] = r.fwiou;
  j["bleu4"] = r.bleu4;
  auto cats = [](const std::map<int, double>& m) {
    nlohmann::json o = nlohmann::json::object();
    for (const auto& [k, v] : m) o[std::to_string(k)] = v;
    return o;
  };
  j["box_ap_per_category"] = cats(r.box_ap_per_category);
  j["mask_ap_per_category"] = cats(r.mask_ap_per_category);
  j["iou_per_category"] = cats(r.iou_per_category);
  return j.dump();
}

std::string to_table(const MetricReport& r) {
  char buf[256];
  std::string out;
  auto row = [&](const char* name, double v, bool defined) {
    if (defined)
      std::snprintf(buf, sizeof buf, "%-8s %.4f\n", name, v);
    else
      std::snprintf(buf, sizeof buf, "%-8s (undefined: no ground truth)\n", name);
    out += buf;
  };
  row("box_ap", r.box_ap, r.box_ap_defined);
  row("mask_ap", r.mask_ap, r.mask_ap_defined);
  row("miou", r.miou, true);
  row("fwiou", r.fwiou, true);
  row("bleu4", r.bleu4, true);
  return out;
}

}  // namespace mtv::metrics
