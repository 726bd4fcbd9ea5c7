#include <doctest.h>

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "mtvision/errors.hpp"
#include "mtvision/network.hpp"
#include "mtvision/nn.hpp"
#include "mtvision/rng.hpp"
#include "mtvision/tensor.hpp"
#include "testutil.hpp"

using namespace mtv;
using net::FeaturePyramid;
using net::Model;
using net::ModelConfig;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.width = 0.0625;
  cfg.depth = 0.33;
  cfg.prototypes = 8;
  cfg.vocab_size = 16;
  cfg.decoder_layers = 1;
  cfg.decoder_heads = 2;
  cfg.decoder_dim = 32;
  cfg.max_caption_len = 8;
  cfg.max_memory_positions = 500;
  cfg.seed = 3;
  return cfg;
}

Tensor random_images(int n, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> v(static_cast<std::size_t>(n) * 3 * h * w);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from_vector({n, 3, h, w}, std::move(v));
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) return false;
  for (long i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

long prefix_numel(const nn::ParamRegistry& reg, const std::string& prefix) {
  long total = 0;
  for (std::size_t i = 0; i < reg.size(); ++i)
    if (reg.name(i).rfind(prefix, 0) == 0) total += reg.tensor(i).numel();
  return total;
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("channel schedule snaps to multiples of eight") {
    ModelConfig cfg = tiny_config();
    CHECK(cfg.c8() == 8);
    CHECK(cfg.c16() == 16);
    CHECK(cfg.c32() == 32);
    CHECK(cfg.det_channels() == 5 + 80 + 8);
    cfg.width = 1.0;
    CHECK(cfg.c8() == 128);
    CHECK(cfg.c16() == 256);
    CHECK(cfg.c32() == 512);
    cfg.width = 0.25;
    CHECK(cfg.c8() == 32);
  }

  TEST_CASE("pyramid shapes follow stride arithmetic across input sizes") {
    Model model(tiny_config());
    for (int size : {64, 96, 160, 320}) {
      FeaturePyramid p = model.backbone_forward(random_images(1, size, size, 7));
      CHECK(p.p8.dim(2) == size / 8);
      CHECK(p.p8.dim(3) == size / 8);
      CHECK(p.p16.dim(2) == size / 16);
      CHECK(p.p32.dim(2) == size / 32);
      CHECK(p.p8.dim(1) == 8);
      CHECK(p.p16.dim(1) == 16);
      CHECK(p.p32.dim(1) == 32);
      CHECK(all_finite(p.p8));
      CHECK(all_finite(p.p16));
      CHECK(all_finite(p.p32));
    }
    CHECK_THROWS_AS(model.backbone_forward(random_images(1, 70, 64, 7)), ShapeError);
  }

  TEST_CASE("batch dimension carries through and items stay independent") {
    Model model(tiny_config());
    Tensor one = random_images(1, 64, 64, 9);
    std::vector<Real> doubled(one.data(), one.data() + one.numel());
    doubled.insert(doubled.end(), one.data(), one.data() + one.numel());
    Tensor two = Tensor::from_vector({2, 3, 64, 64}, std::move(doubled));

    FeaturePyramid p = model.backbone_forward(two);
    CHECK(p.p8.dim(0) == 2);
    CHECK(p.p16.dim(0) == 2);
    CHECK(p.p32.dim(0) == 2);
    // Identical inputs -> identical per-item features.
    const long half = p.p8.numel() / 2;
    for (long i = 0; i < half; ++i) CHECK(p.p8.data()[i] == p.p8.data()[half + i]);

    auto det = model.detection_head(p);
    REQUIRE(det.size() == 3);
    const long dhalf = det[0].numel() / 2;
    for (long i = 0; i < dhalf; ++i) CHECK(det[0].data()[i] == det[0].data()[dhalf + i]);
  }

  TEST_CASE("implicit latents apply channel-wise") {
    nn::ParamRegistry reg;
    net::layers::Implicit imp(reg, "t", 3);
    Tensor x = random_images(1, 8, 8, 11);  // (1,3,8,8)

    // Fresh latents are exact identity.
    Tensor y = imp.forward(x);
    CHECK(tensors_equal(y, x));

    // add = 0.5 shifts every element.
    Tensor add = reg.get("t.add");
    for (int c = 0; c < 3; ++c) add.data()[c] = 0.5;
    y = imp.forward(x);
    for (long i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i] + 0.5);

    // mul = 2 doubles every element.
    for (int c = 0; c < 3; ++c) add.data()[c] = 0.0;
    Tensor mul = reg.get("t.mul");
    for (int c = 0; c < 3; ++c) mul.data()[c] = 2.0;
    y = imp.forward(x);
    for (long i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == 2.0 * x.data()[i]);
  }

  TEST_CASE("implicits at init leave every head output bitwise unchanged") {
    Model model(tiny_config());
    Tensor images = random_images(2, 64, 64, 13);
    FeaturePyramid p = model.backbone_forward(images);

    auto det_on = model.detection_head(p);
    Tensor proto_on = model.prototype_head(p);
    Tensor sem_on = model.semantic_head(p);
    Tensor cap_on = model.caption_decoder_forward(p, {{1, 4, 5}, {1, 2, 0}});

    model.set_implicits_enabled(false);
    auto det_off = model.detection_head(p);
    Tensor proto_off = model.prototype_head(p);
    Tensor sem_off = model.semantic_head(p);
    Tensor cap_off = model.caption_decoder_forward(p, {{1, 4, 5}, {1, 2, 0}});
    model.set_implicits_enabled(true);

    for (int s = 0; s < 3; ++s) CHECK(tensors_equal(det_on[s], det_off[s]));
    CHECK(tensors_equal(proto_on, proto_off));
    CHECK(tensors_equal(sem_on, sem_off));
    CHECK(tensors_equal(cap_on, cap_off));
  }

  TEST_CASE("detection maps carry 85+K channels and decode inside the canvas") {
    Model model(tiny_config());
    Tensor images = random_images(1, 96, 64, 17);
    FeaturePyramid p = model.backbone_forward(images);
    auto maps = model.detection_head(p);
    REQUIRE(maps.size() == 3);
    for (int s = 0; s < 3; ++s) {
      CHECK(maps[s].dim(1) == 93);
      CHECK(maps[s].dim(2) == 96 / net::kStrides[s]);
      CHECK(maps[s].dim(3) == 64 / net::kStrides[s]);
    }
    auto dets = net::decode_detections(maps, 96, 64, 0.0, 0.5, 200);
    REQUIRE(dets.size() == 1);
    CHECK(!dets[0].empty());
    for (const auto& d : dets[0]) {
      CHECK(d.box.x1 >= 0);
      CHECK(d.box.y1 >= 0);
      CHECK(d.box.x2 <= 64);
      CHECK(d.box.y2 <= 96);
      CHECK(d.score >= 0);
      CHECK(d.score <= 1);
      CHECK(d.mask_coefficients.size() == 8);
    }
  }

  TEST_CASE("prototypes land at stride 4") {
    Model model(tiny_config());
    FeaturePyramid p = model.backbone_forward(random_images(2, 64, 96, 19));
    Tensor protos = model.prototype_head(p);
    REQUIRE(protos.ndim() == 4);
    CHECK(protos.dim(0) == 2);
    CHECK(protos.dim(1) == 8);
    CHECK(protos.dim(2) == 16);
    CHECK(protos.dim(3) == 24);
    CHECK(all_finite(protos));
  }

  TEST_CASE("assemble_mask is a thresholded prototype combination") {
    Model model(tiny_config());
    FeaturePyramid p = model.backbone_forward(random_images(1, 64, 64, 23));
    Tensor protos = model.prototype_head(p);  // (1,8,16,16)

    Detection det;
    det.box = Box{8, 12, 40, 48};
    det.score = 0.9;
    det.category = 0;

    // Missing coefficients violate the contract.
    CHECK_THROWS_AS(net::assemble_mask(protos, 0, det, 64, 64), ContractError);

    // All-zero coefficients sit exactly on the 0.5 boundary: strict > keeps nothing.
    det.mask_coefficients.assign(8, 0.0);
    CHECK(net::assemble_mask(protos, 0, det, 64, 64).area() == 0);

    // One-hot coefficient selects sigmoid(prototype_j) inside the box crop.
    const int j = 2;
    det.mask_coefficients.assign(8, 0.0);
    det.mask_coefficients[j] = 1.0;
    Mask m = net::assemble_mask(protos, 0, det, 64, 64);
    REQUIRE(m.h == 64);
    REQUIRE(m.w == 64);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const bool inside = x >= 8 && x < 40 && y >= 12 && y < 48;
        if (!inside) {
          CHECK(m.at(y, x) == 0);
          continue;
        }
        const double logit = protos.data()[(j * 16 + y / 4) * 16 + x / 4];
        CHECK(int(m.at(y, x)) == (net::sigmoid_scalar(logit) > 0.5 ? 1 : 0));
      }

    // Linearity before the sigmoid: combining coefficients adds logits.
    std::vector<double> a = {0.3, -0.2, 0.5, 0, 0.1, 0, -0.4, 0.2};
    std::vector<double> b = {-0.1, 0.4, 0, 0.2, 0, -0.3, 0.1, 0};
    auto logit_at = [&](const std::vector<double>& coeff, int cy, int cx) {
      double s = 0;
      for (int k = 0; k < 8; ++k) s += coeff[k] * protos.data()[(k * 16 + cy) * 16 + cx];
      return s;
    };
    std::vector<double> ab(8);
    for (int k = 0; k < 8; ++k) ab[k] = a[k] + b[k];
    for (int cy = 3; cy < 12; ++cy)
      for (int cx = 2; cx < 10; ++cx)
        CHECK(logit_at(ab, cy, cx) ==
              doctest::Approx(logit_at(a, cy, cx) + logit_at(b, cy, cx)));
  }

  TEST_CASE("semantic head emits 172 channels at stride 4 with valid softmax") {
    Model model(tiny_config());
    FeaturePyramid p = model.backbone_forward(random_images(1, 64, 64, 29));
    Tensor logits = model.semantic_head(p);
    REQUIRE(logits.ndim() == 4);
    CHECK(logits.dim(1) == 172);
    CHECK(logits.dim(2) == 16);
    CHECK(logits.dim(3) == 16);

    Tensor probs = softmax_lastdim(reshape(permute(logits, {0, 2, 3, 1}), {16 * 16, 172}));
    for (int px = 0; px < 16 * 16; ++px) {
      double s = 0;
      for (int c = 0; c < 172; ++c) s += probs.data()[px * 172 + c];
      CHECK(s == doctest::Approx(1.0));
    }

    // Requesting the mode the model was not built with is a config misuse.
    CHECK_THROWS_AS(model.semantic_head(p, true), ConfigError);
  }

  TEST_CASE("multi-scale semantic head spends strictly more parameters") {
    ModelConfig single = tiny_config();
    ModelConfig multi = tiny_config();
    multi.multi_scale_semantic = true;
    Model ms(single), mm(multi);
    const long ns = prefix_numel(ms.params(), "sem.");
    const long nm = prefix_numel(mm.params(), "sem.");
    CHECK(ns > 0);
    CHECK(ns < nm);

    FeaturePyramid p = mm.backbone_forward(random_images(1, 64, 64, 31));
    Tensor logits = mm.semantic_head(p);
    CHECK(logits.dim(1) == 172);
    CHECK(logits.dim(2) == 16);
  }

  TEST_CASE("caption decoder logits are causal and shape-correct") {
    Model model(tiny_config());
    FeaturePyramid p = model.backbone_forward(random_images(2, 64, 64, 37));

    std::vector<std::vector<int>> tokens = {{1, 4, 5, 6}, {1, 2, 0, 0}};
    Tensor logits = model.caption_decoder_forward(p, tokens);
    REQUIRE(logits.ndim() == 3);
    CHECK(logits.dim(0) == 2);
    CHECK(logits.dim(1) == 4);
    CHECK(logits.dim(2) == 16);

    // Perturbing token 3 leaves positions 0..2 bitwise unchanged.
    std::vector<std::vector<int>> perturbed = tokens;
    perturbed[0][3] = 9;
    Tensor logits2 = model.caption_decoder_forward(p, perturbed);
    for (int t = 0; t < 3; ++t)
      for (int v = 0; v < 16; ++v)
        CHECK(logits.data()[(0 * 4 + t) * 16 + v] == logits2.data()[(0 * 4 + t) * 16 + v]);
    // ...and does change position 3.
    bool changed = false;
    for (int v = 0; v < 16; ++v)
      changed = changed || logits.data()[(0 * 4 + 3) * 16 + v] != logits2.data()[(0 * 4 + 3) * 16 + v];
    CHECK(changed);

    // Same pixels -> same logits for the same prefix (items 0 and 1 of a
    // duplicated batch).
    Tensor one = random_images(1, 64, 64, 41);
    std::vector<Real> dup(one.data(), one.data() + one.numel());
    dup.insert(dup.end(), one.data(), one.data() + one.numel());
    FeaturePyramid pp = model.backbone_forward(Tensor::from_vector({2, 3, 64, 64}, std::move(dup)));
    Tensor same = model.caption_decoder_forward(pp, {{1, 4, 5}, {1, 4, 5}});
    for (int t = 0; t < 3; ++t)
      for (int v = 0; v < 16; ++v)
        CHECK(same.data()[(0 * 3 + t) * 16 + v] == same.data()[(1 * 3 + t) * 16 + v]);

    std::vector<std::vector<int>> overlong = {{1, 2, 3, 4, 5, 6, 7, 0, 0}};
    FeaturePyramid p1 = model.backbone_forward(random_images(1, 64, 64, 43));
    CHECK_THROWS_AS(model.caption_decoder_forward(p1, overlong), ShapeError);
  }

  TEST_CASE("generation stops at eos, greedy equals beam(1)") {
    Model model(tiny_config());
    FeaturePyramid p = model.backbone_forward(random_images(1, 64, 64, 47));

    auto greedy = model.generate_caption(p, 0, 8, 1);
    CHECK(greedy.size() <= 8);
    REQUIRE(!greedy.empty());
    CHECK(greedy[0] == 1);  // bos

    auto beam = model.generate_caption(p, 0, 8, 3);
    CHECK(beam.size() <= 8);
    CHECK(model.generate_caption(p, 0, 8, 1) == greedy);

    // Force "always eos": zero the output projection, spike the eos bias.
    Tensor w = model.params().get("caption.out.w");
    for (long i = 0; i < w.numel(); ++i) w.data()[i] = 0.0;
    Tensor b = model.params().get("caption.out.b");
    for (long i = 0; i < b.numel(); ++i) b.data()[i] = 0.0;
    b.data()[2] = 100.0;  // eos
    auto eos_only = model.generate_caption(p, 0, 8, 1);
    REQUIRE(eos_only.size() == 2);
    CHECK(eos_only[0] == 1);
    CHECK(eos_only[1] == 2);
    CHECK(model.generate_caption(p, 0, 8, 4) == eos_only);
  }

  TEST_CASE("every head pulls gradients back into the backbone stem") {
    Model model(tiny_config());
    Tensor stem_w = model.params().get("backbone.stem.conv.w");

    auto run = [&](auto&& head_loss) {
      model.params().zero_grad_all();
      Tensor images = random_images(1, 64, 64, 53);
      FeaturePyramid p = model.backbone_forward(images);
      head_loss(p).backward();
      REQUIRE(stem_w.has_grad());
      double mag = 0;
      for (double g : stem_w.grad()) mag += std::abs(g);
      CHECK(mag > 0);
    };

    run([&](FeaturePyramid& p) { return mean(square(model.detection_head(p)[0])); });
    run([&](FeaturePyramid& p) { return mean(square(model.prototype_head(p))); });
    run([&](FeaturePyramid& p) { return mean(square(model.semantic_head(p))); });
    run([&](FeaturePyramid& p) {
      return mean(square(model.caption_decoder_forward(p, {{1, 4, 5}})));
    });
  }

  TEST_CASE("forward_vision bundles all task outputs") {
    Model model(tiny_config());
    net::NetworkOutputs out = model.forward_vision(random_images(2, 64, 64, 59));
    REQUIRE(out.det_maps.size() == 3);
    CHECK(out.det_maps[0].dim(0) == 2);
    CHECK(out.prototypes.dim(1) == 8);
    CHECK(out.semantic_logits.dim(1) == 172);
  }

  TEST_CASE("images_to_tensor maps bytes into the unit interval") {
    auto ds = testutil::synthetic_dataset(2, 32, 32, 61);
    Tensor t = net::images_to_tensor(ds);
    REQUIRE(t.ndim() == 4);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(1) == 3);
    CHECK(t.dim(2) == 32);
    for (long i = 0; i < t.numel(); ++i) {
      CHECK(t.data()[i] >= 0.0);
      CHECK(t.data()[i] <= 1.0);
    }
    // NCHW layout: channel plane c holds pixel channel c.
    CHECK(t.data()[0] == doctest::Approx(ds[0].image.at(0, 0, 0) / 255.0));
    CHECK(t.data()[32 * 32] == doctest::Approx(ds[0].image.at(0, 0, 1) / 255.0));
  }

  TEST_CASE("model config validation") {
    ModelConfig bad = tiny_config();
    bad.prototypes = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    ModelConfig dim = tiny_config();
    dim.decoder_dim = 30;  // not divisible by heads? dim%heads must be 0
    dim.decoder_heads = 4;
    CHECK_THROWS_AS(dim.validate(), ConfigError);
  }
}
