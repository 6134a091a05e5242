#include "lpu/mapper.hpp"

#include <algorithm>
#include <ostream>

#include "lpu/error.hpp"

namespace lpu {

namespace {

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }
std::int64_t round_up(std::int64_t a, std::int64_t b) { return ceil_div(a, b) * b; }

}  // namespace

Partition partition_model(const ModelConfig& cfg, int n) {
  if (n != 1 && n != 2 && n != 4 && n != 8)
    throw Error(ErrorKind::InvalidDeviceCount, "device count must be 1, 2, 4 or 8, got " + std::to_string(n));
  Partition p;
  p.n_devices = n;
  p.head_dim = cfg.head_dim();
  p.heads_padded = static_cast<int>(round_up(cfg.num_heads, n));
  p.ffn_padded = static_cast<int>(round_up(cfg.ffn_dim, n));
  p.vocab_padded = static_cast<int>(round_up(cfg.vocab_size, n));
  const int hpd = p.heads_padded / n;
  const int fpd = p.ffn_padded / n;
  const int vpd = p.vocab_padded / n;
  for (int d = 0; d < n; ++d) {
    DeviceSlice s;
    s.device = d;
    s.head_begin = d * hpd;
    s.head_end = (d + 1) * hpd;
    s.ffn_begin = d * fpd;
    s.ffn_end = (d + 1) * fpd;
    s.vocab_begin = d * vpd;
    s.vocab_end = (d + 1) * vpd;
    p.devices.push_back(s);
  }
  return p;
}

TileGrid tile_tensor(std::int64_t rows, std::int64_t cols, int v, int l) {
  return {ceil_div(rows, v), ceil_div(cols, l)};
}

// --- MemoryMap ---------------------------------------------------------------

Region& MemoryMap::add_region(Region r, std::int64_t& cursor) {
  const int v = dev_.vector_dim;
  const int l = dev_.mac_trees;
  const std::int64_t tb = dev_.tile_bytes();
  if (r.kind == RegionKind::Vector || r.kind == RegionKind::Io) {
    r.bytes = round_up(r.rows * r.cols * 2, tb);
  } else {
    r.grid = tile_tensor(r.rows, r.cols, v, l);
    r.bytes = r.grid.count() * tb;
  }
  r.id = static_cast<int>(regions_.size());
  r.base = cursor;
  cursor += r.bytes;
  regions_.push_back(std::move(r));
  return regions_.back();
}

MemoryMap::MemoryMap(const ModelConfig& model, const Partition& part, const DeviceConfig& dev, int device_id)
    : model_(model), dev_(dev), device_(device_id) {
  if (device_id < 0 || device_id >= part.n_devices)
    throw Error(ErrorKind::IndexOutOfRange, "device id " + std::to_string(device_id));
  slice_ = part.devices[static_cast<std::size_t>(device_id)];
  const std::int64_t d = model.d_model;
  const std::int64_t hd = part.head_dim;
  const std::int64_t local_attn = static_cast<std::int64_t>(slice_.heads()) * hd;
  const std::int64_t norm_rows = model.norm_kind == NormKind::LayerNorm ? 2 : 1;
  const bool owns_row_bias = device_id == 0;

  auto named = [](TensorRole role, RegionKind kind, std::int64_t rows, std::int64_t cols, bool per_layer) {
    Region r;
    r.role = role;
    r.kind = kind;
    r.rows = rows;
    r.cols = cols;
    r.per_layer = per_layer;
    r.name = role_name(role);
    return r;
  };

  std::int64_t cursor = 0;
  // model-level regions
  add_region(named(TensorRole::Embed, RegionKind::Vector, model.vocab_size, d, false), cursor);
  if (model.pos_encoding == PosEncoding::Learned)
    add_region(named(TensorRole::Pos, RegionKind::Vector, model.max_seq, d, false), cursor);
  add_region(named(TensorRole::NormFinal, RegionKind::Vector, norm_rows, d, false), cursor);
  add_region(named(TensorRole::LmHead, RegionKind::TiledMatrix, d, slice_.vocab(), false), cursor);

  // one layer block, replicated num_layers times at a fixed stride
  const std::int64_t block_begin = cursor;
  std::vector<int> layer_ids;
  auto add_layer = [&](Region r) { layer_ids.push_back(add_region(std::move(r), cursor).id); };
  add_layer(named(TensorRole::Norm1, RegionKind::Vector, norm_rows, d, true));
  add_layer(named(TensorRole::Q, RegionKind::TiledMatrix, d, local_attn, true));
  add_layer(named(TensorRole::K, RegionKind::TiledMatrix, d, local_attn, true));
  add_layer(named(TensorRole::V, RegionKind::TiledMatrix, d, local_attn, true));
  add_layer(named(TensorRole::O, RegionKind::TiledMatrix, local_attn, d, true));
  add_layer(named(TensorRole::Norm2, RegionKind::Vector, norm_rows, d, true));
  add_layer(named(TensorRole::Fc1, RegionKind::TiledMatrix, d, slice_.ffn(), true));
  add_layer(named(TensorRole::Fc2, RegionKind::TiledMatrix, slice_.ffn(), d, true));
  if (model.has_bias) {
    add_layer(named(TensorRole::QBias, RegionKind::Vector, 1, local_attn, true));
    add_layer(named(TensorRole::KBias, RegionKind::Vector, 1, local_attn, true));
    add_layer(named(TensorRole::VBias, RegionKind::Vector, 1, local_attn, true));
    if (owns_row_bias) add_layer(named(TensorRole::OBias, RegionKind::Vector, 1, d, true));
    add_layer(named(TensorRole::Fc1Bias, RegionKind::Vector, 1, slice_.ffn(), true));
    if (owns_row_bias) add_layer(named(TensorRole::Fc2Bias, RegionKind::Vector, 1, d, true));
  }
  const std::int64_t block_bytes = cursor - block_begin;
  for (int id : layer_ids) regions_[static_cast<std::size_t>(id)].layer_stride = block_bytes;
  cursor = block_begin + block_bytes * model.num_layers;
  weight_bytes_ = cursor;

  // KV cache, head-partitioned alongside attention, preallocated at max_seq
  const std::int64_t kv_begin = cursor;
  std::vector<int> kv_ids;
  for (int h = 0; h < slice_.heads(); ++h) {
    Region k = named(TensorRole::K, RegionKind::KeyCache, hd, model.max_seq, true);
    k.name = "kcache.h" + std::to_string(h);
    k.head = h;
    kv_ids.push_back(add_region(std::move(k), cursor).id);
    Region vv = named(TensorRole::V, RegionKind::ValueCache, model.max_seq, hd, true);
    vv.name = "vcache.h" + std::to_string(h);
    vv.head = h;
    kv_ids.push_back(add_region(std::move(vv), cursor).id);
  }
  const std::int64_t kv_block = cursor - kv_begin;
  for (int id : kv_ids) regions_[static_cast<std::size_t>(id)].layer_stride = kv_block;
  cursor = kv_begin + kv_block * model.num_layers;
  kv_bytes_ = cursor - kv_begin;

  Region in = named(TensorRole::Embed, RegionKind::Io, 1, model.max_seq, false);
  in.name = "io.input";
  add_region(std::move(in), cursor);
  Region out = named(TensorRole::Embed, RegionKind::Io, 1, model.max_seq, false);
  out.name = "io.output";
  add_region(std::move(out), cursor);
  total_bytes_ = cursor;
}

const Region* MemoryMap::try_find(TensorRole role) const {
  for (const auto& r : regions_)
    if (r.role == role && (r.kind == RegionKind::TiledMatrix || r.kind == RegionKind::Vector)) return &r;
  return nullptr;
}

const Region& MemoryMap::find(TensorRole role) const {
  if (const Region* r = try_find(role)) return *r;
  throw Error(ErrorKind::UnmappedTensor, std::string("tensor ") + role_name(role) + " not mapped on device " +
                                             std::to_string(device_));
}

const Region& MemoryMap::key_region(int local_head) const {
  for (const auto& r : regions_)
    if (r.kind == RegionKind::KeyCache && r.head == local_head) return r;
  throw Error(ErrorKind::IndexOutOfRange, "no key cache for local head " + std::to_string(local_head));
}

const Region& MemoryMap::value_region(int local_head) const {
  for (const auto& r : regions_)
    if (r.kind == RegionKind::ValueCache && r.head == local_head) return r;
  throw Error(ErrorKind::IndexOutOfRange, "no value cache for local head " + std::to_string(local_head));
}

const Region& MemoryMap::io_region(bool output) const {
  for (const auto& r : regions_)
    if (r.kind == RegionKind::Io && (r.name == (output ? "io.output" : "io.input"))) return r;
  throw Error(ErrorKind::UnmappedTensor, "io region missing");
}

DeviceAddress MemoryMap::translate(std::int64_t linear) const {
  const std::int64_t tb = dev_.tile_bytes();
  const std::int64_t slot = linear / tb;
  DeviceAddress a;
  a.linear = linear;
  a.channel = static_cast<int>(slot % dev_.num_channels);
  a.channel_offset = (slot / dev_.num_channels) * tb + linear % tb;
  return a;
}

std::int64_t MemoryMap::tile_linear(const Region& r, int layer, std::int64_t tile_row, std::int64_t tile_col) const {
  const std::int64_t idx = tile_col * r.grid.row_tiles + tile_row;
  return r.base_for(layer) + idx * dev_.tile_bytes();
}

std::int64_t MemoryMap::element_offset(const Region&, int, std::int64_t row, std::int64_t col) const {
  const int v = dev_.vector_dim;
  const int l = dev_.mac_trees;
  // tree j (column within the tile) owns v contiguous lanes
  return ((col % l) * v + (row % v)) * 2;
}

std::vector<Tile> MemoryMap::stream_tiles(const Region& r, int layer) const {
  std::vector<Tile> out;
  out.reserve(static_cast<std::size_t>(r.grid.count()));
  const int v = dev_.vector_dim;
  const int l = dev_.mac_trees;
  for (std::int64_t c = 0; c < r.grid.col_tiles; ++c)
    for (std::int64_t rr = 0; rr < r.grid.row_tiles; ++rr) {
      Tile t;
      t.region = r.id;
      t.layer = r.per_layer ? layer : -1;
      t.row_begin = rr * v;
      t.row_end = std::min<std::int64_t>((rr + 1) * v, r.rows);
      t.col_begin = c * l;
      t.col_end = std::min<std::int64_t>((c + 1) * l, r.cols);
      t.device = device_;
      t.linear = tile_linear(r, layer, rr, c);
      const auto a = translate(t.linear);
      t.channel = a.channel;
      t.address = a.channel_offset;
      out.push_back(t);
    }
  return out;
}

DeviceAddress MemoryMap::kv_write_address(int layer, int local_head, int position, int element, bool key) const {
  if (layer < 0 || layer >= model_.num_layers || local_head < 0 || local_head >= slice_.heads() || position < 0 ||
      position >= model_.max_seq || element < 0 || element >= model_.head_dim())
    throw Error(ErrorKind::IndexOutOfRange, "kv_write_address(" + std::to_string(layer) + "," +
                                                std::to_string(local_head) + "," + std::to_string(position) + "," +
                                                std::to_string(element) + ")");
  const int v = dev_.vector_dim;
  const int l = dev_.mac_trees;
  const Region& r = key ? key_region(local_head) : value_region(local_head);
  // K^T: rows = head elements, cols = positions. V: rows = positions, cols = head elements.
  const std::int64_t row = key ? element : position;
  const std::int64_t col = key ? position : element;
  const std::int64_t linear = tile_linear(r, layer, row / v, col / l) + element_offset(r, layer, row, col);
  return translate(linear);
}

void MemoryMap::dump_csv(std::ostream& os, bool all_layers) const {
  os << "tensor,layer,tile_row,tile_col,device,channel,address\n";
  for (const auto& r : regions_) {
    if (r.kind != RegionKind::TiledMatrix && r.kind != RegionKind::KeyCache && r.kind != RegionKind::ValueCache)
      continue;
    const int layers = r.per_layer ? (all_layers ? model_.num_layers : std::min(1, model_.num_layers)) : 1;
    for (int layer = 0; layer < layers; ++layer)
      for (const auto& t : stream_tiles(r, layer))
        os << r.name << ',' << t.layer << ',' << t.row_begin / dev_.vector_dim << ',' << t.col_begin / dev_.mac_trees
           << ',' << device_ << ',' << t.channel << ',' << t.address << '\n';
  }
}

std::int64_t region_tile_linear(const Region& r, int layer, std::int64_t tile_row, std::int64_t tile_col,
                                int tile_bytes) {
  return r.base_for(layer) + (tile_col * r.grid.row_tiles + tile_row) * tile_bytes;
}

std::int64_t region_element_linear(const Region& r, int layer, std::int64_t row, std::int64_t col, int v, int l) {
  return region_tile_linear(r, layer, row / v, col / l, v * l * 2) + ((col % l) * v + (row % v)) * 2;
}

MemoryMap map_device(const Partition& part, const ModelConfig& cfg, const DeviceConfig& dev, int device_id) {
  MemoryMap m(cfg, part, dev, device_id);
  if (static_cast<double>(m.total_bytes()) > dev.hbm_capacity)
    throw CapacityExceeded(static_cast<double>(m.total_bytes()) - dev.hbm_capacity,
                           "device " + std::to_string(device_id) + " image " + std::to_string(m.total_bytes()) +
                               " B exceeds HBM capacity");
  return m;
}

// --- device image -------------------------------------------------------------

Half DeviceMemory::load(std::int64_t linear) const {
  const auto i = static_cast<std::size_t>(linear);
  return Half::from_bits(static_cast<std::uint16_t>(bytes_[i] | (bytes_[i + 1] << 8)));
}

void DeviceMemory::store(std::int64_t linear, Half h) {
  const auto i = static_cast<std::size_t>(linear);
  bytes_[i] = static_cast<std::uint8_t>(h.bits & 0xFF);
  bytes_[i + 1] = static_cast<std::uint8_t>(h.bits >> 8);
}

DeviceMemory build_device_image(const MemoryMap& map, const ParamStore& params, const Partition& part) {
  const ModelConfig& cfg = map.model();
  const DeviceSlice& s = map.slice();
  const std::int64_t hd = part.head_dim;
  DeviceMemory mem(map.total_bytes());

  // global index of a local attention column (or -1 for a padded head)
  auto attn_global = [&](std::int64_t local) -> std::int64_t {
    const std::int64_t head = s.head_begin + local / hd;
    return head < cfg.num_heads ? head * hd + local % hd : -1;
  };

  for (const auto& r : map.regions()) {
    const int layers = r.per_layer ? cfg.num_layers : 1;
    for (int layer = 0; layer < layers; ++layer) {
      const int tl = r.per_layer ? layer : -1;
      if (r.kind == RegionKind::TiledMatrix) {
        Tensor lm;
        const Tensor* src = nullptr;
        if (r.role == TensorRole::LmHead) {
          lm = params.lm_head_matrix();
          src = &lm;
        } else {
          src = &params.get(r.role, tl);
        }
        for (std::int64_t row = 0; row < r.rows; ++row)
          for (std::int64_t col = 0; col < r.cols; ++col) {
            std::int64_t gr = row, gc = col;
            switch (r.role) {
              case TensorRole::Q:
              case TensorRole::K:
              case TensorRole::V: gc = attn_global(col); break;
              case TensorRole::O: gr = attn_global(row); break;
              case TensorRole::Fc1: gc = s.ffn_begin + col < cfg.ffn_dim ? s.ffn_begin + col : -1; break;
              case TensorRole::Fc2: gr = s.ffn_begin + row < cfg.ffn_dim ? s.ffn_begin + row : -1; break;
              case TensorRole::LmHead: gc = s.vocab_begin + col < cfg.vocab_size ? s.vocab_begin + col : -1; break;
              default: break;
            }
            if (gr < 0 || gc < 0) continue;
            const std::int64_t at = map.tile_linear(r, layer, row / map.device_config().vector_dim,
                                                    col / map.device_config().mac_trees) +
                                    map.element_offset(r, layer, row, col);
            mem.store(at, src->at(gr, gc));
          }
      } else if (r.kind == RegionKind::Vector) {
        const Tensor& src = params.get(r.role, tl);
        const std::int64_t base = r.base_for(layer);
        for (std::int64_t i = 0; i < r.rows * r.cols; ++i) {
          std::int64_t g = i;
          switch (r.role) {
            case TensorRole::QBias:
            case TensorRole::KBias:
            case TensorRole::VBias: g = attn_global(i); break;
            case TensorRole::Fc1Bias: g = s.ffn_begin + i < cfg.ffn_dim ? s.ffn_begin + i : -1; break;
            default: break;
          }
          if (g < 0) continue;
          mem.store(base + 2 * i, src.data[static_cast<std::size_t>(g)]);
        }
      }
    }
  }
  return mem;
}

}  // namespace lpu
