#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "lpu/arch.hpp"
#include "lpu/compiler.hpp"
#include "lpu/esl.hpp"
#include "lpu/mapper.hpp"
#include "lpu/model.hpp"
#include "lpu/vxe.hpp"

namespace lpu {

/// Per-device programs of one tensor-parallel group, replicated on every ring
/// of the partition.
struct CompiledCluster {
  ModelConfig model;
  ClusterConfig cluster;
  Partition partition;
  std::vector<MemoryMap> maps;  // one per ring member
  std::vector<ChainSet> chains;

  int group_size() const { return partition.n_devices; }
  std::vector<const Program*> programs() const;
};

/// Throws CapacityExceeded, InvalidDeviceCount, IllegalPartition.
CompiledCluster compile_cluster(const ModelConfig& model, const DeviceConfig& dev, int n_devices,
                                RingPartition partition);
CompiledCluster compile_cluster(const ModelConfig& model, const DeviceConfig& dev, int n_devices);

struct ExperimentSpec {
  std::string model = "opt-1.3b";
  std::string arch = "hbm3-x4";
  int devices = 1;
  std::string partition;  // empty: default for the device count
  int input_tokens = 32;
  int output_tokens = 2016;
  std::vector<int> positions;  // empty: five evenly spaced decode positions
  SamplingParams sampling;
  std::uint64_t seed = 1;
  bool full_decode = false;  // every decode position instead of samples
  std::string output;        // report path, empty for none
};

/// Decode positions input..input+output-1 sampled at five evenly spaced points.
std::vector<int> default_positions(int input_tokens, int output_tokens);
/// Trapezoidal weights over sorted positions; they sum to 1.
std::vector<double> trapezoid_weights(const std::vector<int>& positions);

struct PositionSample {
  int position = 0;
  double seconds = 0;
  double bytes = 0;
  double exposed_sync_seconds = 0;
  int syncs = 0;
};

struct ExperimentResult {
  std::string model, arch, partition;
  int devices = 1;
  double ms_per_token = 0;
  double utilization = 0;       // weighted bytes over weighted time, all devices
  double exposed_sync_us = 0;   // per token
  int syncs_per_token = 0;
  std::vector<PositionSample> samples;
};

ExperimentResult run_experiment(const CompiledCluster& cc, const std::vector<int>& positions);
ExperimentResult run_experiment(const ExperimentSpec& spec);

struct ScalingRow {
  int devices = 1;
  std::string partition;
  double ms_per_token = 0;
  double speedup = 1;
  double exposed_sync_us = 0;
  double utilization = 0;
};

/// Speedups are relative to the first entry of `devices`.
std::vector<ScalingRow> run_sweep(const ExperimentSpec& base, const std::vector<int>& devices);
/// Geometric mean of the speedup between consecutive rows.
double mean_doubling_gain(const std::vector<ScalingRow>& rows);

constexpr int kCsvVersion = 1;
void write_run_csv(std::ostream& os, const std::vector<ExperimentResult>& rows);
void write_scaling_csv(std::ostream& os, const std::vector<ScalingRow>& rows);

}  // namespace lpu
