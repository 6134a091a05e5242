#pragma once

// Property checks shared by the doctest suites and the acceptance runner.
// Each returns a count of violations so callers decide how to report.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "build_helpers.hpp"
#include "lpu/esl.hpp"
#include "lpu/mapper.hpp"

namespace testing_support {

struct Placement {
  std::int64_t linear;
  lpu::Half value;
};

/// Every parameter element with the address the tile list implies for it.
inline std::vector<Placement> expected_placements(const lpu::MemoryMap& map, const lpu::ParamStore& ps) {
  using namespace lpu;
  const int v = map.device_config().vector_dim;
  std::vector<Placement> out;
  for (const Region& r : map.regions()) {
    if (r.kind == RegionKind::KeyCache || r.kind == RegionKind::ValueCache || r.kind == RegionKind::Io) continue;
    const int layers = r.per_layer ? map.model().num_layers : 1;
    for (int layer = 0; layer < layers; ++layer) {
      const int tl = r.per_layer ? layer : -1;
      if (r.kind == RegionKind::TiledMatrix) {
        const Tensor t = r.role == TensorRole::LmHead ? ps.lm_head_matrix() : ps.get(r.role, tl);
        for (const Tile& tile : map.stream_tiles(r, tl))
          for (std::int64_t c = tile.col_begin; c < std::min(tile.col_end, t.cols); ++c)
            for (std::int64_t row = tile.row_begin; row < std::min(tile.row_end, t.rows); ++row)
              out.push_back({tile.linear + ((c - tile.col_begin) * v + (row - tile.row_begin)) * 2, t.at(row, c)});
      } else {
        const Tensor& t = ps.get(r.role, tl);
        for (std::int64_t i = 0; i < t.numel(); ++i)
          out.push_back({r.base_for(layer) + i * 2, t.data[static_cast<std::size_t>(i)]});
      }
    }
  }
  return out;
}

struct BijectionReport {
  std::int64_t elements = 0;      // parameter elements the model owns, head copy included
  std::int64_t placed = 0;        // addresses produced by the tile lists
  std::int64_t collisions = 0;    // addresses used twice
  std::int64_t wrong_values = 0;  // image disagrees with the parameter
  std::int64_t dirty_padding = 0; // non-zero bytes in tile padding
  bool ok() const { return elements == placed && collisions == 0 && wrong_values == 0 && dirty_padding == 0; }
};

/// Unsplit map of one device: the whole parameter set lives there.
inline BijectionReport check_bijection(const std::string& model, const std::string& arch, std::uint64_t seed) {
  using namespace lpu;
  BijectionReport rep;
  const auto cfg = model_preset(model);
  const auto dev = device_preset(arch);
  const auto part = partition_model(cfg, 1);
  const auto ps = synth_params(cfg, seed);
  for (const auto& t : ps.tensors()) rep.elements += t.numel();
  if (cfg.tie_embeddings) rep.elements += cfg.vocab_size * static_cast<std::int64_t>(cfg.d_model);
  const auto map = map_device(part, cfg, dev, 0);
  const auto image = build_device_image(map, ps, part);
  const auto places = expected_placements(map, ps);
  rep.placed = static_cast<std::int64_t>(places.size());
  std::vector<std::int64_t> addrs;
  for (const auto& p : places) {
    addrs.push_back(p.linear);
    if (!(image.load(p.linear) == p.value)) ++rep.wrong_values;
  }
  std::sort(addrs.begin(), addrs.end());
  for (std::size_t i = 1; i < addrs.size(); ++i) rep.collisions += addrs[i] == addrs[i - 1];
  std::vector<char> used(static_cast<std::size_t>(image.size()), 0);
  for (auto a : addrs) used[static_cast<std::size_t>(a)] = 1;
  for (const Region& r : map.regions()) {
    if (r.kind != RegionKind::TiledMatrix) continue;
    const int layers = r.per_layer ? cfg.num_layers : 1;
    for (int layer = 0; layer < layers; ++layer)
      for (std::int64_t a = r.base_for(layer); a < r.base_for(layer) + r.bytes; a += 2)
        if (!used[static_cast<std::size_t>(a)] && image.load(a).bits != 0) ++rep.dirty_padding;
  }
  return rep;
}

/// Writes random Key and Value matrices through the KV write path of every
/// layer and reads them back through the streamed tile layout. Returns the
/// number of lanes that differ from K^T (Key) or V (Value).
inline std::int64_t kv_transpose_mismatches(const std::string& model, const std::string& arch, std::uint64_t seed) {
  using namespace lpu;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> bits(0, 0x7BFF);  // finite halves
  const auto cfg = model_preset(model);
  const auto dev = device_preset(arch);
  const auto map = map_device(partition_model(cfg, 1), cfg, dev, 0);
  const int hd = cfg.head_dim(), seq = cfg.max_seq, v = dev.vector_dim, l = dev.mac_trees;
  std::int64_t bad = 0;
  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    for (int head = 0; head < cfg.num_heads; head += std::max(1, cfg.num_heads - 1)) {
      DeviceMemory mem(map.total_bytes());
      std::vector<std::uint16_t> K(static_cast<std::size_t>(seq * hd)), V(K.size());
      for (auto& x : K) x = static_cast<std::uint16_t>(bits(rng) | ((rng() & 1) ? 0x8000 : 0));
      for (auto& x : V) x = static_cast<std::uint16_t>(bits(rng));
      for (int pos = 0; pos < seq; ++pos)
        for (int e = 0; e < hd; ++e) {
          const auto i = static_cast<std::size_t>(pos * hd + e);
          mem.store(map.kv_write_address(layer, head, pos, e, true).linear, Half::from_bits(K[i]));
          mem.store(map.kv_write_address(layer, head, pos, e, false).linear, Half::from_bits(V[i]));
        }
      // lane r of MAC tree c holds K[col][row] for Key tiles and V[row][col] for Value tiles
      for (const Tile& t : map.stream_tiles(map.key_region(head), layer))
        for (int c = 0; c < l; ++c)
          for (int r = 0; r < v; ++r) {
            const std::int64_t row = t.row_begin + r, col = t.col_begin + c;
            const std::uint16_t want = (row < hd && col < seq) ? K[static_cast<std::size_t>(col * hd + row)] : 0;
            bad += mem.load(t.linear + (c * v + r) * 2).bits != want;
          }
      for (const Tile& t : map.stream_tiles(map.value_region(head), layer))
        for (int c = 0; c < l; ++c)
          for (int r = 0; r < v; ++r) {
            const std::int64_t row = t.row_begin + r, col = t.col_begin + c;
            const std::uint16_t want = (row < seq && col < hd) ? V[static_cast<std::size_t>(row * hd + col)] : 0;
            bad += mem.load(t.linear + (c * v + r) * 2).bits != want;
          }
    }
  }
  return bad;
}

/// Runs `schedules` random interleavings of the engine queues and counts the
/// ones whose tokens or logits differ from in-order execution.
inline int schedule_mismatches(const std::string& model, int n_devices, int schedules, std::uint64_t seed) {
  using namespace lpu;
  const auto b = build(model, n_devices, seed);
  const std::vector<int> prompt = random_prompt(b.model.vocab_size, 3, seed);
  RunOptions opt;
  opt.max_new_tokens = 3;
  opt.capture_logits = true;
  const auto ref = run_functional(b.programs(), b.images, prompt, opt);
  opt.schedule = Schedule::Random;
  int bad = 0;
  for (int s = 0; s < schedules; ++s) {
    opt.schedule_seed = seed * 1000003u + static_cast<std::uint64_t>(s);
    try {
      const auto got = run_functional(b.programs(), b.images, prompt, opt);
      bad += got.tokens != ref.tokens || got.logits != ref.logits;
    } catch (const Error&) {
      ++bad;
    }
  }
  return bad;
}

struct EslReport {
  int trials = 0;
  int lost_or_duplicated = 0;  // conservation violations
  int exposed_when_hidden = 0; // hiding violations
};

/// Random back-to-back FC exchanges where every link's per-task load fits in
/// the per-task compute time and the next FC outlasts the route.
inline EslReport esl_properties(int trials, std::uint64_t seed) {
  using namespace lpu;
  EslReport rep;
  const LinkParams lp;
  std::mt19937_64 rng(seed);
  const RingPartition parts[] = {RingPartition::k1x2, RingPartition::k1x4, RingPartition::k1x8, RingPartition::k2x4,
                                 RingPartition::k4x2};
  for (int trial = 0; trial < trials; ++trial) {
    const RingPartition part = parts[trial % 5];
    const auto rc = configure_rings(partition_devices(part), part);
    const int n = rc.ring_size();
    const int tasks = std::uniform_int_distribution<int>(8, 256)(rng);
    const int task_bytes = 64;
    const double link_load = (n - 1) * lp.serialization_cycles(task_bytes);
    const double spacing = link_load * std::uniform_real_distribution<double>(1.0, 4.0)(rng);
    std::vector<SyncJob> jobs;
    for (std::size_t r = 0; r < rc.rings.size(); ++r) {
      SyncJob j;
      j.ring = static_cast<int>(r);
      j.task_bytes = task_bytes;
      for (int m = 0; m < n; ++m) {
        const double start = std::uniform_real_distribution<double>(0, spacing)(rng);
        std::vector<double> done;
        for (int t = 0; t < tasks; ++t) done.push_back(start + (t + 1) * spacing);
        j.task_done.push_back(done);
        j.bytes.push_back(std::int64_t{tasks} * task_bytes);
        j.compute_end.push_back(done.back());
      }
      const double latest = *std::max_element(j.compute_end.begin(), j.compute_end.end());
      const double earliest = *std::min_element(j.compute_end.begin(), j.compute_end.end());
      j.consumer_cycles = std::max<double>(tasks * spacing, (latest - earliest) + (n - 1) * (lp.hop_cycles() +
                                                                  lp.serialization_cycles(lp.packet_bytes)));
      jobs.push_back(std::move(j));
    }
    const auto results = simulate_syncs(jobs, rc, lp);
    ++rep.trials;
    for (std::size_t r = 0; r < jobs.size(); ++r) {
      const auto& res = results[r];
      bool conserved = res.duplicate_deliveries == 0;
      for (int s = 0; s < n; ++s)
        for (int d = 0; d < n; ++d)
          conserved = conserved && res.delivered[static_cast<std::size_t>(s)][static_cast<std::size_t>(d)] ==
                                       (s == d ? 0 : jobs[r].bytes[static_cast<std::size_t>(s)]);
      rep.lost_or_duplicated += !conserved;
      rep.exposed_when_hidden += res.exposed_max > 0;
    }
  }
  return rep;
}

}  // namespace testing_support
