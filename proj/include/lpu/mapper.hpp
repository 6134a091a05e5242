#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lpu/arch.hpp"
#include "lpu/model.hpp"

namespace lpu {

/// Slice of the model owned by one device under intra-layer parallelism.
struct DeviceSlice {
  int device = 0;
  int head_begin = 0, head_end = 0;    // padded head index range
  int ffn_begin = 0, ffn_end = 0;      // FC1 columns / FC2 rows
  int vocab_begin = 0, vocab_end = 0;  // LM head columns
  int heads() const { return head_end - head_begin; }
  int ffn() const { return ffn_end - ffn_begin; }
  int vocab() const { return vocab_end - vocab_begin; }
};

struct Partition {
  int n_devices = 1;
  int heads_padded = 0;
  int ffn_padded = 0;
  int vocab_padded = 0;
  int head_dim = 0;
  std::vector<DeviceSlice> devices;
  // embeddings and norm parameters are replicated on every device
  bool replicate_embeddings = true;
  bool replicate_norms = true;
  /// Row-parallel outputs (attention out-projection, FC2) hold partial sums.
  bool needs_sync() const { return n_devices > 1; }
};

/// Heads padded to a multiple of n_devices and split evenly; FC1 column-split,
/// FC2 row-split; LM head column-split over the (padded) vocabulary.
Partition partition_model(const ModelConfig& cfg, int n_devices);

struct TileGrid {
  std::int64_t row_tiles = 0;
  std::int64_t col_tiles = 0;
  std::int64_t count() const { return row_tiles * col_tiles; }
};

/// ceil(rows / v) x ceil(cols / l); the ragged edge is zero-padded.
TileGrid tile_tensor(std::int64_t rows, std::int64_t cols, int v, int l);

enum class RegionKind { TiledMatrix, Vector, KeyCache, ValueCache, Io };

/// A contiguous region of a device's linear address space. Per-layer tensors
/// are one region with a layer stride.
struct Region {
  int id = 0;
  std::string name;
  RegionKind kind = RegionKind::Vector;
  TensorRole role = TensorRole::Embed;
  bool per_layer = false;
  int head = -1;                     // local head for KV regions
  std::int64_t base = 0;             // bytes, layer 0
  std::int64_t layer_stride = 0;     // bytes between consecutive layers
  std::int64_t rows = 0, cols = 0;   // logical local shape
  TileGrid grid;                     // for tiled kinds
  std::int64_t bytes = 0;            // one layer instance, tile-aligned

  std::int64_t base_for(int layer) const { return base + (per_layer ? layer * layer_stride : 0); }
};

struct DeviceAddress {
  std::int64_t linear = 0;
  int channel = 0;
  std::int64_t channel_offset = 0;
};

struct Tile {
  int region = 0;
  int layer = -1;
  std::int64_t row_begin = 0, row_end = 0;  // along the input (vector) dimension, multiples of v
  std::int64_t col_begin = 0, col_end = 0;  // along the output dimension, multiples of l
  int device = 0;
  int channel = 0;
  std::int64_t address = 0;  // channel-local byte offset
  std::int64_t linear = 0;
};

class MemoryMap {
 public:
  MemoryMap() = default;
  MemoryMap(const ModelConfig& model, const Partition& part, const DeviceConfig& dev, int device_id);

  int device() const { return device_; }
  const DeviceConfig& device_config() const { return dev_; }
  const ModelConfig& model() const { return model_; }
  const DeviceSlice& slice() const { return slice_; }
  const std::vector<Region>& regions() const { return regions_; }
  const Region& region(int id) const { return regions_.at(static_cast<std::size_t>(id)); }
  /// Throws UnmappedTensor.
  const Region& find(TensorRole role) const;
  const Region* try_find(TensorRole role) const;
  const Region& key_region(int local_head) const;
  const Region& value_region(int local_head) const;
  const Region& io_region(bool output) const;
  std::int64_t total_bytes() const { return total_bytes_; }
  std::int64_t weight_bytes() const { return weight_bytes_; }
  std::int64_t kv_bytes() const { return kv_bytes_; }
  int tile_bytes() const { return dev_.tile_bytes(); }

  DeviceAddress translate(std::int64_t linear) const;
  /// Tiles of a tiled region in stream order (column sets major, rows inner).
  std::vector<Tile> stream_tiles(const Region& r, int layer) const;
  /// Byte offset of element (row, col) inside its tile.
  std::int64_t element_offset(const Region& r, int layer, std::int64_t row, std::int64_t col) const;
  std::int64_t tile_linear(const Region& r, int layer, std::int64_t tile_row, std::int64_t tile_col) const;

  /// Where element `element` of the Key (or Value) vector for `position`
  /// lands. Keys are written so that a stream read of the region yields
  /// K-transposed tiles.
  DeviceAddress kv_write_address(int layer, int local_head, int position, int element, bool key = true) const;

  void dump_csv(std::ostream& os, bool all_layers) const;

 private:
  Region& add_region(Region r, std::int64_t& cursor);

  ModelConfig model_;
  DeviceConfig dev_;
  DeviceSlice slice_;
  int device_ = 0;
  std::vector<Region> regions_;
  std::int64_t total_bytes_ = 0;
  std::int64_t weight_bytes_ = 0;
  std::int64_t kv_bytes_ = 0;
};

/// Linear address of tile (tile_row, tile_col) of a tiled region; tiles are laid
/// out in stream order (column sets major, rows inner).
std::int64_t region_tile_linear(const Region& r, int layer, std::int64_t tile_row, std::int64_t tile_col,
                                int tile_bytes);
/// Linear address of element (row, col) of a tiled region. Inside a tile the v
/// lanes feeding one MAC tree are contiguous.
std::int64_t region_element_linear(const Region& r, int layer, std::int64_t row, std::int64_t col, int v, int l);

/// Throws CapacityExceeded if the device image does not fit.
MemoryMap map_device(const Partition& part, const ModelConfig& cfg, const DeviceConfig& dev, int device_id);

/// Byte-addressable image of one device's HBM holding the mapped parameters.
class DeviceMemory {
 public:
  DeviceMemory() = default;
  explicit DeviceMemory(std::int64_t bytes) : bytes_(static_cast<std::size_t>(bytes), 0) {}
  Half load(std::int64_t linear) const;
  void store(std::int64_t linear, Half h);
  std::int64_t size() const { return static_cast<std::int64_t>(bytes_.size()); }
  const std::vector<std::uint8_t>& raw() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Writes every parameter the map places on its device. Padding stays zero.
DeviceMemory build_device_image(const MemoryMap& map, const ParamStore& params, const Partition& part);

}  // namespace lpu
