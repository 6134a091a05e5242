#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lpu/error.hpp"

namespace lpu {

/// Microarchitectural constants the timing model needs but the published
/// design leaves open. All of them are plain configuration.
struct MicroArch {
  int sxe_pipeline_depth = 8;      // cycles from tile issue to MAC-tree output
  int oiu_prefetch_tiles = 4;      // tiles of the next operand stream staged in the OIU
  int vxe_fixed_latency = 16;      // VXE pipeline constant added to ceil(n / v)
  double hbm_latency_ns = 200.0;   // loaded read latency, request to first data
  int dispatch_width = 2;          // instructions dispatched by the ICP per cycle
  int lmu_writeback_cycles = 1;
  int vector_registers = 64;       // per LMU (vector bank)
  int scalar_registers = 64;       // per LMU (scalar bank)
};

struct DeviceConfig {
  std::string name;
  double hbm_bandwidth = 0;     // bytes/s
  double hbm_capacity = 0;      // bytes
  int num_channels = 0;
  int burst_bytes = 64;
  double freq_hz = 1e9;
  int mac_trees = 0;            // l
  int vector_dim = 64;          // v
  int lmu_banks = 2;
  double lmu_bytes = 8.0 * 1024 * 1024;
  double sync_buffer_bytes = 64.0 * 1024;
  double link_bandwidth = 25e9;     // bytes/s per direction per port
  double link_hop_latency = 500e-9; // seconds
  MicroArch micro;

  double channel_bandwidth() const { return hbm_bandwidth / num_channels; }
  int tile_bytes() const { return vector_dim * mac_trees * 2; }
  /// Throws InvalidConfig when an invariant does not hold.
  void validate() const;
};

enum class RingPartition { k1x8, k2x4, k4x2, k1x4, k1x2, k1x1 };

const char* partition_name(RingPartition p);
RingPartition parse_partition(const std::string& s);
/// Number of devices a partition spans and the size of each ring in it.
int partition_devices(RingPartition p);
int partition_ring_size(RingPartition p);
RingPartition default_partition(int n_devices);

struct ClusterConfig {
  DeviceConfig device;  // homogeneous cluster
  int num_devices = 1;
  RingPartition partition = RingPartition::k1x1;

  void validate() const;
};

ClusterConfig make_cluster(const DeviceConfig& dev, int n_devices);
ClusterConfig make_cluster(const DeviceConfig& dev, int n_devices, RingPartition partition);

/// Power-of-two MAC-tree count geometrically nearest to bw / (v * 2 B * freq); ties round up.
int derive_mac_trees(double hbm_bandwidth, int vector_dim, double freq_hz);

/// l * v * 2 B * freq
double sxe_peak_bandwidth(int mac_trees, int vector_dim, double freq_hz);

/// Throws CapacityExceeded with the deficit (bytes) if the model plus KV cache
/// does not fit across the cluster, or if any device's even shard does not fit.
void validate_fit(double model_bytes, double kv_bytes, const ClusterConfig& cluster);

// --- presets and JSON config files ---------------------------------------

std::filesystem::path preset_dir();
DeviceConfig load_device_config(const std::filesystem::path& file);
DeviceConfig device_preset(const std::string& name);
std::string device_config_to_json(const DeviceConfig& cfg);
DeviceConfig device_config_from_json(const std::string& text);
std::vector<std::string> device_preset_names();

}  // namespace lpu
