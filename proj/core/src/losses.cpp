#include "mtvision/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <tuple>
#include <utility>

#include "mtvision/errors.hpp"
#include "mtvision/geometry.hpp"
#include "mtvision/network.hpp"

namespace mtv::losses {

void LossWeights::validate() const {
  if (w_det < 0 || w_mask < 0 || w_sem < 0 || w_cap < 0)
    throw ConfigError("loss weights must be nonnegative");
}

int select_stride(const Box& b) {
  const double side = std::max(b.width(), b.height());
  int best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    const double score = std::abs(std::log2(side / (8.0 * net::kStrides[i])));
    if (score < best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

AssignmentResult assign_detection_targets(const std::vector<std::vector<LabeledBox>>& gt,
                                          int img_h, int img_w) {
  AssignmentResult res;
  res.batch = static_cast<int>(gt.size());
  res.img_h = img_h;
  res.img_w = img_w;

  // (stride, n, y, x) -> {gt index, IoU against the cell's prior square}
  std::map<std::tuple<int, int, int, int>, std::pair<int, double>> claims;

  for (int n = 0; n < res.batch; ++n) {
    for (int g = 0; g < static_cast<int>(gt[static_cast<size_t>(n)].size()); ++g) {
      const Box& b = gt[static_cast<size_t>(n)][static_cast<size_t>(g)].box;
      if (!(b.width() > 0) || !(b.height() > 0)) continue;
      const int si = select_stride(b);
      const int stride = net::kStrides[si];
      const int gh = img_h / stride, gw = img_w / stride;
      const double gcx = 0.5 * (b.x1 + b.x2), gcy = 0.5 * (b.y1 + b.y2);
      const int cx0 = std::clamp(static_cast<int>(std::floor(gcx / stride)), 0, gw - 1);
      const int cy0 = std::clamp(static_cast<int>(std::floor(gcy / stride)), 0, gh - 1);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int cx = cx0 + dx, cy = cy0 + dy;
          if (cx < 0 || cy < 0 || cx >= gw || cy >= gh) continue;
          const double pcx = (cx + 0.5) * stride, pcy = (cy + 0.5) * stride;
          const double half = 0.5 * net::kBoxScale * stride;
          const Box prior{pcx - half, pcy - half, pcx + half, pcy + half};
          const double iou = box_iou(b, prior);
          auto key = std::make_tuple(si, n, cy, cx);
          auto it = claims.find(key);
          if (it == claims.end()) {
            claims.emplace(key, std::make_pair(g, iou));
          } else if (iou > it->second.second) {
            // equal IoU keeps the earlier (lower-index) GT
            it->second = {g, iou};
          }
        }
      }
    }
  }

  for (const auto& [key, val] : claims) {
    Assignment a;
    a.stride_index = std::get<0>(key);
    a.loc = GridLoc{std::get<1>(key), std::get<2>(key), std::get<3>(key)};
    a.gt_index = val.first;
    res.assigned.push_back(a);
  }
  // std::map iterates keys in (stride, n, y, x) order already; keep explicit for clarity.
  std::sort(res.assigned.begin(), res.assigned.end(), [](const Assignment& a, const Assignment& b) {
    return std::make_tuple(a.stride_index, a.loc.n, a.loc.y, a.loc.x) <
           std::make_tuple(b.stride_index, b.loc.n, b.loc.y, b.loc.x);
  });
  return res;
}

namespace {

struct ColBoxes {
  Tensor x1, y1, x2, y2;  // each (M,1)
};

Tensor column(const std::vector<Real>& v) {
  return Tensor::from_vector({static_cast<int>(v.size()), 1}, v);
}

/// CIoU for predicted column boxes against constant GT column boxes. Returns (M,1).
Tensor ciou_columns(const ColBoxes& p, const ColBoxes& g) {
  const Tensor iw = clamp_min(sub(minimum(p.x2, g.x2), maximum(p.x1, g.x1)), 0.0);
  const Tensor ih = clamp_min(sub(minimum(p.y2, g.y2), maximum(p.y1, g.y1)), 0.0);
  const Tensor inter = mul(iw, ih);
  const Tensor pw = sub(p.x2, p.x1), ph = sub(p.y2, p.y1);
  const Tensor gw = sub(g.x2, g.x1), gh = sub(g.y2, g.y1);
  const Tensor uni = sub(add(mul(pw, ph), mul(gw, gh)), inter);
  const Tensor iou = div(inter, uni);

  const Tensor pcx = mul_scalar(add(p.x1, p.x2), 0.5), pcy = mul_scalar(add(p.y1, p.y2), 0.5);
  const Tensor gcx = mul_scalar(add(g.x1, g.x2), 0.5), gcy = mul_scalar(add(g.y1, g.y2), 0.5);
  const Tensor rho2 = add(square(sub(pcx, gcx)), square(sub(pcy, gcy)));
  const Tensor cw = sub(maximum(p.x2, g.x2), minimum(p.x1, g.x1));
  const Tensor ch = sub(maximum(p.y2, g.y2), minimum(p.y1, g.y1));
  const Tensor c2 = add(square(cw), square(ch));

  constexpr double k4pi2 = 4.0 / (M_PI * M_PI);
  const Tensor v = mul_scalar(square(sub(atan(div(gw, gh)), atan(div(pw, ph)))), k4pi2);
  const Tensor alpha =
      div(v, add_scalar(add(sub(Tensor::full(v.shape(), 1.0), iou), v), 1e-9)).detach();
  return sub(sub(iou, div(rho2, c2)), mul(alpha, v));
}

}  // namespace

double ciou_scalar(const Box& pred, const Box& gt) {
  ColBoxes p{column({pred.x1}), column({pred.y1}), column({pred.x2}), column({pred.y2})};
  ColBoxes g{column({gt.x1}), column({gt.y1}), column({gt.x2}), column({gt.y2})};
  return ciou_columns(p, g).data()[0];
}

DetectionLossResult detection_loss(const std::vector<Tensor>& det_maps,
                                   const AssignmentResult& assign,
                                   const std::vector<std::vector<LabeledBox>>& gt) {
  if (det_maps.size() != 3) throw ShapeError("detection_loss: expected 3 stride maps");

  // group assignments per stride
  std::vector<std::vector<GridLoc>> locs(3);
  std::vector<std::vector<int>> gts(3);
  for (const auto& a : assign.assigned) {
    locs[static_cast<size_t>(a.stride_index)].push_back(a.loc);
    gts[static_cast<size_t>(a.stride_index)].push_back(a.gt_index);
  }

  long m_total = 0;
  for (const auto& l : locs) m_total += static_cast<long>(l.size());

  Tensor box_sum = Tensor::scalar(0.0);
  std::vector<Tensor> cls_logit_parts;
  std::vector<Real> cls_targets;
  std::vector<Tensor> obj_logit_parts;
  std::vector<Real> obj_targets;

  for (int si = 0; si < 3; ++si) {
    const Tensor& m = det_maps[static_cast<size_t>(si)];
    const int h = m.dim(2), w = m.dim(3);
    const double stride = net::kStrides[si];

    // objectness over every location of this stride
    obj_logit_parts.push_back(reshape(slice(m, 1, 4, 1), {m.dim(0) * h * w}));
    std::vector<Real> ot(static_cast<size_t>(m.dim(0)) * h * w, 0.0);
    for (const auto& loc : locs[static_cast<size_t>(si)])
      ot[(static_cast<size_t>(loc.n) * h + loc.y) * w + loc.x] = 1.0;
    obj_targets.insert(obj_targets.end(), ot.begin(), ot.end());

    const auto& sl = locs[static_cast<size_t>(si)];
    if (sl.empty()) continue;
    const int ms = static_cast<int>(sl.size());
    for (const auto& loc : sl)
      if (loc.y >= h || loc.x >= w || loc.n >= m.dim(0))
        throw ShapeError("detection_loss: assignment outside map bounds");

    const Tensor rows = gather_locations(m, sl);
    const Tensor dist = mul_scalar(softplus(slice(rows, 1, 0, 4)), stride * net::kBoxScale);
    const Tensor dl = slice(dist, 1, 0, 1), dt = slice(dist, 1, 1, 1);
    const Tensor dr = slice(dist, 1, 2, 1), db = slice(dist, 1, 3, 1);

    std::vector<Real> ccx(static_cast<size_t>(ms)), ccy(static_cast<size_t>(ms));
    std::vector<Real> gx1(static_cast<size_t>(ms)), gy1(static_cast<size_t>(ms));
    std::vector<Real> gx2(static_cast<size_t>(ms)), gy2(static_cast<size_t>(ms));
    for (int i = 0; i < ms; ++i) {
      ccx[static_cast<size_t>(i)] = (sl[static_cast<size_t>(i)].x + 0.5) * stride;
      ccy[static_cast<size_t>(i)] = (sl[static_cast<size_t>(i)].y + 0.5) * stride;
      const Box& b = gt[static_cast<size_t>(sl[static_cast<size_t>(i)].n)]
                       [static_cast<size_t>(gts[static_cast<size_t>(si)][static_cast<size_t>(i)])]
                           .box;
      gx1[static_cast<size_t>(i)] = b.x1;
      gy1[static_cast<size_t>(i)] = b.y1;
      gx2[static_cast<size_t>(i)] = b.x2;
      gy2[static_cast<size_t>(i)] = b.y2;
    }
    const Tensor tcx = column(ccx), tcy = column(ccy);
    ColBoxes p{sub(tcx, dl), sub(tcy, dt), add(tcx, dr), add(tcy, db)};
    ColBoxes g{column(gx1), column(gy1), column(gx2), column(gy2)};
    const Tensor ciou = ciou_columns(p, g);
    box_sum = add(box_sum, sum(sub(Tensor::full(ciou.shape(), 1.0), ciou)));

    cls_logit_parts.push_back(slice(rows, 1, 5, kInstanceCategories));
    for (int i = 0; i < ms; ++i) {
      std::vector<Real> row(kInstanceCategories, 0.0);
      const int cat = gt[static_cast<size_t>(sl[static_cast<size_t>(i)].n)]
                        [static_cast<size_t>(gts[static_cast<size_t>(si)][static_cast<size_t>(i)])]
                            .category;
      if (cat < 0 || cat >= kInstanceCategories)
        throw RangeError("detection_loss: GT category out of range");
      row[static_cast<size_t>(cat)] = 1.0;
      cls_targets.insert(cls_targets.end(), row.begin(), row.end());
    }
  }

  DetectionLossResult r;
  r.box = m_total > 0 ? mul_scalar(box_sum, 1.0 / static_cast<double>(m_total))
                      : Tensor::scalar(0.0);
  const int obj_count = static_cast<int>(obj_targets.size());
  r.obj = bce_with_logits_mean(concat(obj_logit_parts, 0),
                               Tensor::from_vector({obj_count}, std::move(obj_targets)));
  r.cls = m_total > 0
              ? bce_with_logits_mean(
                    concat(cls_logit_parts, 0),
                    Tensor::from_vector({static_cast<int>(m_total), kInstanceCategories},
                                        std::move(cls_targets)))
              : Tensor::scalar(0.0);
  r.total = add(add(r.box, r.obj), r.cls);
  return r;
}

Tensor instance_mask_loss(const Tensor& prototypes, const std::vector<Tensor>& det_maps,
                          const AssignmentResult& assign, const std::vector<Sample>& batch) {
  if (assign.assigned.empty()) return Tensor::scalar(0.0);
  if (prototypes.ndim() != 4) throw ShapeError("instance_mask_loss: prototypes must be (N,K,H,W)");
  const int k = prototypes.dim(1), ph = prototypes.dim(2), pw = prototypes.dim(3);
  const double sy = static_cast<double>(assign.img_h) / ph;
  const double sx = static_cast<double>(assign.img_w) / pw;

  // gather coefficient rows per stride
  std::vector<std::vector<GridLoc>> locs(3);
  std::vector<std::vector<int>> gts(3);
  for (const auto& a : assign.assigned) {
    locs[static_cast<size_t>(a.stride_index)].push_back(a.loc);
    gts[static_cast<size_t>(a.stride_index)].push_back(a.gt_index);
  }
  std::vector<Tensor> coeffs(3);
  for (int si = 0; si < 3; ++si) {
    if (locs[static_cast<size_t>(si)].empty()) continue;
    const Tensor& m = det_maps[static_cast<size_t>(si)];
    if (m.dim(1) < 5 + kInstanceCategories + k)
      throw ShapeError("instance_mask_loss: detection map lacks coefficient channels");
    coeffs[static_cast<size_t>(si)] = slice(
        gather_locations(m, locs[static_cast<size_t>(si)]), 1, 5 + kInstanceCategories, k);
  }

  Tensor total = Tensor::scalar(0.0);
  long count = 0;
  for (int si = 0; si < 3; ++si) {
    for (int i = 0; i < static_cast<int>(locs[static_cast<size_t>(si)].size()); ++i) {
      const GridLoc& loc = locs[static_cast<size_t>(si)][static_cast<size_t>(i)];
      const auto& inst = batch[static_cast<size_t>(loc.n)]
                             .instances[static_cast<size_t>(
                                 gts[static_cast<size_t>(si)][static_cast<size_t>(i)])];
      const Box& b = inst.labeled_box.box;
      const int x0 = std::max(0, static_cast<int>(std::ceil(b.x1 / sx - 0.5)));
      const int x1 = std::min(pw, static_cast<int>(std::ceil(b.x2 / sx - 0.5)));
      const int y0 = std::max(0, static_cast<int>(std::ceil(b.y1 / sy - 0.5)));
      const int y1 = std::min(ph, static_cast<int>(std::ceil(b.y2 / sy - 0.5)));
      if (x1 <= x0 || y1 <= y0) continue;
      const int cw = x1 - x0, chh = y1 - y0;

      const Tensor coeff_row = slice(coeffs[static_cast<size_t>(si)], 0, i, 1);
      const Tensor proto_n =
          reshape(slice(prototypes, 0, loc.n, 1), {k, ph * pw});
      const Tensor logit_map = reshape(matmul(coeff_row, proto_n), {1, 1, ph, pw});
      const Tensor crop = reshape(crop_hw(logit_map, 0, y0, y1, x0, x1), {chh * cw});

      std::vector<Real> target(static_cast<size_t>(chh) * cw);
      const Mask& gm = inst.mask;
      for (int y = 0; y < chh; ++y)
        for (int x = 0; x < cw; ++x) {
          const int iy = std::min(gm.h - 1, static_cast<int>((y0 + y + 0.5) * sy));
          const int ix = std::min(gm.w - 1, static_cast<int>((x0 + x + 0.5) * sx));
          target[static_cast<size_t>(y) * cw + x] = gm.at(iy, ix) ? 1.0 : 0.0;
        }
      const Tensor bce = bce_with_logits_mean(
          crop, Tensor::from_vector({chh * cw}, std::move(target)));
      const double area = std::max(1e-9, (b.width() / sx) * (b.height() / sy));
      total = add(total, mul_scalar(bce, static_cast<double>(chh) * cw / area));
      ++count;
    }
  }
  if (count == 0) return Tensor::scalar(0.0);
  return mul_scalar(total, 1.0 / static_cast<double>(count));
}

Tensor semantic_loss(const Tensor& logits, const std::vector<SemanticMask>& gt) {
  if (logits.ndim() != 4) throw ShapeError("semantic_loss: logits must be (N,C,H,W)");
  const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (static_cast<int>(gt.size()) != n)
    throw ShapeError("semantic_loss: batch size mismatch");
  for (const auto& m : gt)
    if (m.h != 4 * h || m.w != 4 * w)
      throw ShapeError("semantic_loss: GT must be 4x the logit resolution");

  std::vector<int> targets(static_cast<size_t>(n) * h * w);
  std::size_t o = 0;
  for (int i = 0; i < n; ++i) {
    const SemanticMask& m = gt[static_cast<size_t>(i)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        targets[o++] = m.at(std::min(m.h - 1, 4 * y + 2), std::min(m.w - 1, 4 * x + 2));
  }
  const Tensor flat = reshape(permute(logits, {0, 2, 3, 1}), {n * h * w, c});
  return softmax_xent_mean(flat, targets);
}

Tensor caption_loss(const Tensor& logits, const std::vector<std::vector<int>>& token_ids) {
  if (logits.ndim() != 3) throw ShapeError("caption_loss: logits must be (N,T,V)");
  const int n = logits.dim(0), t = logits.dim(1), v = logits.dim(2);
  if (static_cast<int>(token_ids.size()) != n)
    throw ShapeError("caption_loss: batch size mismatch");
  std::vector<int> targets(static_cast<size_t>(n) * t, 0);
  std::vector<std::uint8_t> valid(static_cast<size_t>(n) * t, 0);
  bool any = false;
  for (int i = 0; i < n; ++i) {
    const auto& ids = token_ids[static_cast<size_t>(i)];
    if (static_cast<int>(ids.size()) != t + 1)
      throw ShapeError("caption_loss: sequence length must be logits T + 1");
    for (int j = 0; j < t; ++j) {
      const int tgt = ids[static_cast<size_t>(j) + 1];
      if (tgt < 0 || tgt >= v) throw RangeError("caption_loss: target id out of vocabulary");
      targets[static_cast<size_t>(i) * t + j] = tgt;
      if (tgt != 0) {
        valid[static_cast<size_t>(i) * t + j] = 1;
        any = true;
      }
    }
  }
  if (!any) {
    std::cerr << "warning: caption_loss: all targets are pad; loss is 0\n";
    return Tensor::scalar(0.0);
  }
  return softmax_xent_mean(reshape(logits, {n * t, v}), targets, &valid);
}

Tensor total_loss(const LossComponents& c, const LossWeights& w) {
  w.validate();
  const struct {
    const Tensor* t;
    const char* task;
  } parts[] = {{&c.det, "detection"}, {&c.mask, "instance_mask"}, {&c.sem, "semantic"},
               {&c.cap, "caption"}};
  for (const auto& p : parts) {
    if (!p.t->defined()) throw ContractError(std::string("total_loss: missing ") + p.task);
    if (!all_finite(*p.t))
      throw NonFiniteLossError(p.task, std::string("non-finite ") + p.task + " loss");
  }
  // Zero-weighted tasks stay out of the graph entirely so their parameters
  // receive no gradient (and no decoupled weight decay) from this loss.
  const std::pair<const Tensor*, double> terms[] = {
      {&c.det, w.w_det}, {&c.mask, w.w_mask}, {&c.sem, w.w_sem}, {&c.cap, w.w_cap}};
  Tensor out;
  for (const auto& [t, wt] : terms) {
    if (wt == 0.0) continue;
    const Tensor term = mul_scalar(*t, wt);
    out = out.defined() ? add(out, term) : term;
  }
  return out.defined() ? out : Tensor::scalar(0.0);
}

}  // namespace mtv::losses
