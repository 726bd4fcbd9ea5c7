#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include <mtvision/augment.hpp>
#include <mtvision/metrics.hpp>
#include <mtvision/network.hpp>
#include <mtvision/rng.hpp>
#include <mtvision/tensor.hpp>

namespace {

mtv::Tensor random_tensor(const mtv::Shape& s, mtv::Rng& rng) {
  long n = 1;
  for (int d : s) n *= d;
  std::vector<mtv::Real> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform() * 2.0 - 1.0;
  return mtv::Tensor::from_vector(s, std::move(v));
}

void bm_conv2d_forward(benchmark::State& state) {
  mtv::Rng rng(7);
  mtv::Tensor x = random_tensor({1, 16, 64, 64}, rng);
  mtv::Tensor w = random_tensor({16, 16, 3, 3}, rng);
  mtv::Tensor b = random_tensor({16}, rng);
  for (auto _ : state) {
    mtv::Tensor y = mtv::conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(bm_conv2d_forward);

void bm_backbone_forward(benchmark::State& state) {
  mtv::net::ModelConfig cfg;
  cfg.width = 0.125;
  cfg.depth = 0.33;
  cfg.vocab_size = 16;
  mtv::net::Model model(cfg);
  mtv::Rng rng(3);
  mtv::Tensor x = random_tensor({1, 3, 96, 96}, rng);
  for (auto _ : state) {
    auto p = model.backbone_forward(x);
    benchmark::DoNotOptimize(p.p32.data());
  }
}
BENCHMARK(bm_backbone_forward);

void bm_decode_nms(benchmark::State& state) {
  mtv::Rng rng(11);
  std::vector<mtv::Tensor> maps;
  int hw[3] = {12, 6, 3};
  for (int s = 0; s < 3; ++s) maps.push_back(random_tensor({1, 85 + 8, hw[s], hw[s]}, rng));
  for (auto _ : state) {
    auto dets = mtv::net::decode_detections(maps, 96, 96, 0.05, 0.5, 100);
    benchmark::DoNotOptimize(dets);
  }
}
BENCHMARK(bm_decode_nms);

void bm_bleu4(benchmark::State& state) {
  std::vector<std::vector<std::string>> cands, refs_flat;
  std::vector<std::vector<std::vector<std::string>>> refs;
  mtv::Rng rng(5);
  for (int i = 0; i < 64; ++i) {
    std::vector<std::string> sent;
    for (int j = 0; j < 12; ++j) sent.push_back("w" + std::to_string(rng.uniform_int(40)));
    cands.push_back(sent);
    refs.push_back({sent});
  }
  for (auto _ : state) {
    double b = mtv::metrics::bleu4(cands, refs);
    benchmark::DoNotOptimize(b);
  }
}
BENCHMARK(bm_bleu4);

void bm_make_views(benchmark::State& state) {
  mtv::Rng rng(9);
  std::vector<mtv::Sample> batch;
  for (int i = 0; i < 4; ++i) {
    mtv::Sample s;
    s.id = i;
    s.image = mtv::Image(96, 128, static_cast<std::uint8_t>(40 * i));
    mtv::InstanceAnnotation inst;
    inst.labeled_box.category = 0;
    inst.labeled_box.box = {30, 20, 90, 60};
    inst.mask = mtv::Mask(96, 128);
    for (int y = 20; y < 60; ++y)
      for (int x = 30; x < 90; ++x) inst.mask.at(y, x) = 1;
    s.instances.push_back(inst);
    s.semantic = mtv::SemanticMask(96, 128, 90);
    batch.push_back(s);
  }
  mtv::aug::AugConfig cfg;
  cfg.target_size = 96;
  for (auto _ : state) {
    auto views = mtv::aug::make_views(batch, cfg, rng);
    benchmark::DoNotOptimize(views);
  }
}
BENCHMARK(bm_make_views);

}  // namespace

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  benchmark::RunSpecifiedBenchmarks();
  return 0;
}
