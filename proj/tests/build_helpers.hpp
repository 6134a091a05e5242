#pragma once

#include <random>
#include <string>
#include <vector>

#include "lpu/codegen.hpp"
#include "lpu/compiler.hpp"
#include "lpu/interp.hpp"

namespace testing_support {

struct Built {
  lpu::ModelConfig model;
  lpu::DeviceConfig dev;
  lpu::Partition part;
  lpu::ParamStore params;
  std::vector<lpu::MemoryMap> maps;
  std::vector<lpu::DeviceMemory> images;
  std::vector<lpu::Program> virt;
  std::vector<lpu::ChainSet> chained;

  std::vector<const lpu::Program*> programs() const {
    std::vector<const lpu::Program*> out;
    for (const auto& c : chained) out.push_back(&c.program);
    return out;
  }
};

inline Built build(const std::string& model_name, int n, std::uint64_t seed = 7,
                   const std::string& arch = "hbm3-x1") {
  using namespace lpu;
  Built b;
  b.model = model_preset(model_name);
  b.dev = device_preset(arch);
  b.part = partition_model(b.model, n);
  b.params = synth_params(b.model, seed);
  const auto cluster = make_cluster(b.dev, n);
  for (int i = 0; i < n; ++i) {
    b.maps.push_back(map_device(b.part, b.model, b.dev, i));
    b.images.push_back(build_device_image(b.maps.back(), b.params, b.part));
    b.virt.push_back(generate_program(b.model, b.maps.back(), b.part, cluster));
    b.chained.push_back(compile(b.virt.back(), b.dev));
  }
  return b;
}

inline std::vector<int> random_prompt(int vocab, int len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, vocab - 1);
  std::vector<int> p(static_cast<std::size_t>(len));
  for (int& t : p) t = pick(rng);
  return p;
}

}  // namespace testing_support
