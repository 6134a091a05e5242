#include "lpu/arch.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"

#ifndef LPU_DEFAULT_PRESET_DIR
#define LPU_DEFAULT_PRESET_DIR "presets"
#endif

namespace lpu {

namespace {

bool is_pow2(long long x) { return x > 0 && (x & (x - 1)) == 0; }

}  // namespace

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::CapacityExceeded: return "CapacityExceeded";
    case ErrorKind::InvalidDeviceCount: return "InvalidDeviceCount";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::UnmappedTensor: return "UnmappedTensor";
    case ErrorKind::UnknownBlock: return "UnknownBlock";
    case ErrorKind::RegisterPressureExceeded: return "RegisterPressureExceeded";
    case ErrorKind::CyclicDependency: return "CyclicDependency";
    case ErrorKind::MalformedBinary: return "MalformedBinary";
    case ErrorKind::InvalidSamplingParams: return "InvalidSamplingParams";
    case ErrorKind::Deadlock: return "Deadlock";
    case ErrorKind::DecodeFault: return "DecodeFault";
    case ErrorKind::IllegalPartition: return "IllegalPartition";
    case ErrorKind::CrossRing: return "CrossRing";
    case ErrorKind::BufferOverflow: return "BufferOverflow";
    case ErrorKind::UnknownPreset: return "UnknownPreset";
  }
  return "Error";
}

void DeviceConfig::validate() const {
  auto fail = [&](const std::string& why) {
    throw Error(ErrorKind::InvalidConfig, "device '" + name + "': " + why);
  };
  if (hbm_bandwidth <= 0 || hbm_capacity <= 0 || freq_hz <= 0) fail("bandwidth, capacity and frequency must be positive");
  if (num_channels <= 0) fail("num_channels must be positive");
  if (burst_bytes <= 0 || !is_pow2(burst_bytes)) fail("burst_bytes must be a power of two");
  if (!is_pow2(mac_trees)) fail("mac_trees must be a power of two");
  if (!is_pow2(vector_dim)) fail("vector_dim must be a power of two");
  if (tile_bytes() % burst_bytes != 0) fail("tile size must be a multiple of the burst size");
  if (sxe_peak_bandwidth(mac_trees, vector_dim, freq_hz) < 0.95 * hbm_bandwidth)
    fail("SXE peak bandwidth below memory bandwidth (compute starved)");
  if (link_bandwidth <= 0 || link_hop_latency < 0) fail("link parameters must be positive");
  if (micro.sxe_pipeline_depth < 1 || micro.oiu_prefetch_tiles < 0 || micro.vxe_fixed_latency < 0 ||
      micro.hbm_latency_ns < 0 || micro.dispatch_width < 1 || micro.vector_registers < 1 ||
      micro.scalar_registers < 1)
    fail("invalid microarchitecture constants");
}

const char* partition_name(RingPartition p) {
  switch (p) {
    case RingPartition::k1x8: return "1x8";
    case RingPartition::k2x4: return "2x4";
    case RingPartition::k4x2: return "4x2";
    case RingPartition::k1x4: return "1x4";
    case RingPartition::k1x2: return "1x2";
    case RingPartition::k1x1: return "1x1";
  }
  return "?";
}

RingPartition parse_partition(const std::string& s) {
  for (auto p : {RingPartition::k1x8, RingPartition::k2x4, RingPartition::k4x2, RingPartition::k1x4,
                 RingPartition::k1x2, RingPartition::k1x1})
    if (s == partition_name(p)) return p;
  throw Error(ErrorKind::IllegalPartition, "unknown partition '" + s + "'");
}

int partition_devices(RingPartition p) {
  switch (p) {
    case RingPartition::k1x8:
    case RingPartition::k2x4:
    case RingPartition::k4x2: return 8;
    case RingPartition::k1x4: return 4;
    case RingPartition::k1x2: return 2;
    case RingPartition::k1x1: return 1;
  }
  return 0;
}

int partition_ring_size(RingPartition p) {
  switch (p) {
    case RingPartition::k1x8: return 8;
    case RingPartition::k2x4: return 4;
    case RingPartition::k4x2: return 2;
    case RingPartition::k1x4: return 4;
    case RingPartition::k1x2: return 2;
    case RingPartition::k1x1: return 1;
  }
  return 0;
}

RingPartition default_partition(int n_devices) {
  switch (n_devices) {
    case 1: return RingPartition::k1x1;
    case 2: return RingPartition::k1x2;
    case 4: return RingPartition::k1x4;
    case 8: return RingPartition::k1x8;
    default: throw Error(ErrorKind::InvalidDeviceCount, "device count must be 1, 2, 4 or 8");
  }
}

void ClusterConfig::validate() const {
  device.validate();
  if (num_devices != 1 && num_devices != 2 && num_devices != 4 && num_devices != 8)
    throw Error(ErrorKind::InvalidDeviceCount, "device count must be 1, 2, 4 or 8");
  if (partition_devices(partition) != num_devices)
    throw Error(ErrorKind::IllegalPartition, std::string("partition ") + partition_name(partition) +
                                                 " does not cover " + std::to_string(num_devices) + " devices");
}

ClusterConfig make_cluster(const DeviceConfig& dev, int n_devices) {
  return make_cluster(dev, n_devices, default_partition(n_devices));
}

ClusterConfig make_cluster(const DeviceConfig& dev, int n_devices, RingPartition partition) {
  ClusterConfig c;
  c.device = dev;
  c.num_devices = n_devices;
  c.partition = partition;
  c.validate();
  return c;
}

int derive_mac_trees(double hbm_bandwidth, int vector_dim, double freq_hz) {
  const double ratio = hbm_bandwidth / (static_cast<double>(vector_dim) * 2.0 * freq_hz);
  const double exponent = std::floor(std::log2(ratio) + 0.5);
  return exponent <= 0 ? 1 : 1 << static_cast<int>(exponent);
}

double sxe_peak_bandwidth(int mac_trees, int vector_dim, double freq_hz) {
  return static_cast<double>(mac_trees) * vector_dim * 2.0 * freq_hz;
}

void validate_fit(double model_bytes, double kv_bytes, const ClusterConfig& cluster) {
  const double total_capacity = cluster.device.hbm_capacity * cluster.num_devices;
  const double need = model_bytes + kv_bytes;
  if (need > total_capacity) {
    std::ostringstream os;
    os << "need " << need << " B, cluster capacity " << total_capacity << " B";
    throw CapacityExceeded(need - total_capacity, os.str());
  }
  const double shard = need / cluster.num_devices;
  if (shard > cluster.device.hbm_capacity) {
    std::ostringstream os;
    os << "per-device shard " << shard << " B exceeds " << cluster.device.hbm_capacity << " B";
    throw CapacityExceeded(shard - cluster.device.hbm_capacity, os.str());
  }
}

// --- JSON ------------------------------------------------------------------

using nlohmann::json;

std::filesystem::path preset_dir() {
  if (const char* env = std::getenv("LPU_PRESET_DIR"); env != nullptr && *env != '\0') return env;
  return LPU_DEFAULT_PRESET_DIR;
}

DeviceConfig device_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("device config: ") + e.what());
  }
  DeviceConfig c;
  try {
    c.name = j.value("name", std::string("custom"));
    c.hbm_bandwidth = j.at("hbm_bandwidth").get<double>();
    c.hbm_capacity = j.at("hbm_capacity").get<double>();
    c.freq_hz = j.value("freq_hz", 1e9);
    c.vector_dim = j.value("vector_dim", 64);
    c.num_channels = j.value("num_channels", std::max(1, static_cast<int>(std::lround(c.hbm_bandwidth / 102.4e9))));
    c.burst_bytes = j.value("burst_bytes", 64);
    c.mac_trees = j.value("mac_trees", derive_mac_trees(c.hbm_bandwidth, c.vector_dim, c.freq_hz));
    c.lmu_banks = j.value("lmu_banks", 2);
    c.lmu_bytes = j.value("lmu_bytes", 8.0 * 1024 * 1024);
    c.sync_buffer_bytes = j.value("sync_buffer_bytes", 64.0 * 1024);
    c.link_bandwidth = j.value("link_bandwidth", 25e9);
    c.link_hop_latency = j.value("link_hop_latency", 500e-9);
    if (j.contains("micro")) {
      const auto& m = j.at("micro");
      c.micro.sxe_pipeline_depth = m.value("sxe_pipeline_depth", c.micro.sxe_pipeline_depth);
      c.micro.oiu_prefetch_tiles = m.value("oiu_prefetch_tiles", c.micro.oiu_prefetch_tiles);
      c.micro.vxe_fixed_latency = m.value("vxe_fixed_latency", c.micro.vxe_fixed_latency);
      c.micro.hbm_latency_ns = m.value("hbm_latency_ns", c.micro.hbm_latency_ns);
      c.micro.dispatch_width = m.value("dispatch_width", c.micro.dispatch_width);
      c.micro.lmu_writeback_cycles = m.value("lmu_writeback_cycles", c.micro.lmu_writeback_cycles);
      c.micro.vector_registers = m.value("vector_registers", c.micro.vector_registers);
      c.micro.scalar_registers = m.value("scalar_registers", c.micro.scalar_registers);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("device config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string device_config_to_json(const DeviceConfig& c) {
  json j = {
      {"name", c.name},
      {"hbm_bandwidth", c.hbm_bandwidth},
      {"hbm_capacity", c.hbm_capacity},
      {"num_channels", c.num_channels},
      {"burst_bytes", c.burst_bytes},
      {"freq_hz", c.freq_hz},
      {"mac_trees", c.mac_trees},
      {"vector_dim", c.vector_dim},
      {"lmu_banks", c.lmu_banks},
      {"lmu_bytes", c.lmu_bytes},
      {"sync_buffer_bytes", c.sync_buffer_bytes},
      {"link_bandwidth", c.link_bandwidth},
      {"link_hop_latency", c.link_hop_latency},
      {"micro",
       {{"sxe_pipeline_depth", c.micro.sxe_pipeline_depth},
        {"oiu_prefetch_tiles", c.micro.oiu_prefetch_tiles},
        {"vxe_fixed_latency", c.micro.vxe_fixed_latency},
        {"hbm_latency_ns", c.micro.hbm_latency_ns},
        {"dispatch_width", c.micro.dispatch_width},
        {"lmu_writeback_cycles", c.micro.lmu_writeback_cycles},
        {"vector_registers", c.micro.vector_registers},
        {"scalar_registers", c.micro.scalar_registers}}},
  };
  return j.dump(2);
}

DeviceConfig load_device_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::UnknownPreset, "cannot open " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return device_config_from_json(ss.str());
}

DeviceConfig device_preset(const std::string& name) {
  const auto file = preset_dir() / "arch" / (name + ".json");
  if (!std::filesystem::exists(file)) throw Error(ErrorKind::UnknownPreset, "no arch preset '" + name + "' in " + file.parent_path().string());
  return load_device_config(file);
}

std::vector<std::string> device_preset_names() {
  std::vector<std::string> out;
  const auto dir = preset_dir() / "arch";
  if (std::filesystem::is_directory(dir))
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.path().extension() == ".json") out.push_back(e.path().stem().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace lpu
