#include "lpu/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <thread>
#include <ostream>

#include "lpu/codegen.hpp"

namespace lpu {

std::vector<const Program*> CompiledCluster::programs() const {
  std::vector<const Program*> out;
  for (const auto& c : chains) out.push_back(&c.program);
  return out;
}

CompiledCluster compile_cluster(const ModelConfig& model, const DeviceConfig& dev, int n_devices,
                                RingPartition partition) {
  CompiledCluster cc;
  cc.model = model;
  cc.cluster = make_cluster(dev, n_devices, partition);
  const int group = partition_ring_size(partition);
  cc.partition = partition_model(model, group);
  for (int i = 0; i < group; ++i) {
    cc.maps.push_back(map_device(cc.partition, model, dev, i));
    cc.chains.push_back(compile(generate_program(model, cc.maps.back(), cc.partition, cc.cluster), dev));
  }
  return cc;
}

CompiledCluster compile_cluster(const ModelConfig& model, const DeviceConfig& dev, int n_devices) {
  return compile_cluster(model, dev, n_devices, default_partition(n_devices));
}

std::vector<int> default_positions(int input_tokens, int output_tokens) {
  if (input_tokens < 1 || output_tokens < 1)
    throw Error(ErrorKind::InvalidConfig, "input and output token counts must be positive");
  std::vector<int> out;
  const int span = output_tokens - 1;
  for (int k = 0; k <= 4; ++k) {
    const int p = input_tokens + static_cast<int>(std::lround(static_cast<double>(span) * k / 4.0));
    if (out.empty() || out.back() != p) out.push_back(p);
  }
  return out;
}

std::vector<double> trapezoid_weights(const std::vector<int>& positions) {
  const std::size_t n = positions.size();
  if (n == 0) return {};
  if (n == 1) return {1.0};
  const double span = positions.back() - positions.front();
  std::vector<double> w(n, 0.0);
  if (span <= 0) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
    return w;
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double h = positions[i + 1] - positions[i];
    w[i] += h / 2;
    w[i + 1] += h / 2;
  }
  for (double& x : w) x /= span;
  return w;
}

ExperimentResult run_experiment(const CompiledCluster& cc, const std::vector<int>& positions_in) {
  std::vector<int> positions = positions_in;
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  if (positions.empty()) throw Error(ErrorKind::InvalidConfig, "no positions to simulate");
  for (int p : positions) check_position(cc.chains.front().program, p);

  const auto programs = cc.programs();
  const double f = cc.cluster.device.freq_hz;
  std::vector<PositionSample> samples(positions.size());
  // each position is an independent simulation
  const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  for (std::size_t begin = 0; begin < positions.size(); begin += workers) {
    std::vector<std::future<PositionSample>> jobs;
    for (std::size_t i = begin; i < std::min(positions.size(), begin + workers); ++i)
      jobs.push_back(std::async(std::launch::async, [&, i] {
        const ClusterReport r = simulate_cluster_token(programs, cc.cluster, positions[i]);
        return PositionSample{positions[i], r.seconds, r.bytes_streamed, r.exposed_sync_cycles / f, r.syncs};
      }));
    for (std::size_t i = 0; i < jobs.size(); ++i) samples[begin + i] = jobs[i].get();
  }

  // consecutive positions are the full decode; weight them evenly
  bool consecutive = true;
  for (std::size_t i = 1; i < positions.size(); ++i) consecutive = consecutive && positions[i] == positions[i - 1] + 1;
  std::vector<double> w = consecutive ? std::vector<double>(positions.size(), 1.0 / static_cast<double>(positions.size()))
                                      : trapezoid_weights(positions);

  ExperimentResult res;
  res.model = cc.model.name;
  res.arch = cc.cluster.device.name;
  res.partition = partition_name(cc.cluster.partition);
  res.devices = cc.cluster.num_devices;
  double t = 0, bytes = 0, exposed = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    t += w[i] * samples[i].seconds;
    bytes += w[i] * samples[i].bytes;
    exposed += w[i] * samples[i].exposed_sync_seconds;
  }
  res.ms_per_token = t * 1e3;
  const double group_bw = cc.cluster.device.hbm_bandwidth * cc.cluster.num_devices;
  res.utilization = t > 0 ? bytes / (group_bw * t) : 0.0;
  res.exposed_sync_us = exposed * 1e6;
  res.syncs_per_token = samples.front().syncs;
  res.samples = std::move(samples);
  return res;
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  const ModelConfig model = model_preset(spec.model);
  const DeviceConfig dev = device_preset(spec.arch);
  const RingPartition part = spec.partition.empty() ? default_partition(spec.devices) : parse_partition(spec.partition);
  const CompiledCluster cc = compile_cluster(model, dev, spec.devices, part);
  std::vector<int> positions = spec.positions;
  if (spec.full_decode) {
    positions.clear();
    for (int i = 0; i < spec.output_tokens; ++i) positions.push_back(spec.input_tokens + i);
  } else if (positions.empty()) {
    positions = default_positions(spec.input_tokens, spec.output_tokens);
  }
  return run_experiment(cc, positions);
}

std::vector<ScalingRow> run_sweep(const ExperimentSpec& base, const std::vector<int>& devices) {
  std::vector<ScalingRow> rows;
  for (int n : devices) {
    ExperimentSpec s = base;
    s.devices = n;
    s.partition.clear();
    const ExperimentResult r = run_experiment(s);
    ScalingRow row;
    row.devices = n;
    row.partition = r.partition;
    row.ms_per_token = r.ms_per_token;
    row.exposed_sync_us = r.exposed_sync_us;
    row.utilization = r.utilization;
    row.speedup = rows.empty() ? 1.0 : rows.front().ms_per_token / r.ms_per_token;
    rows.push_back(row);
  }
  return rows;
}

double mean_doubling_gain(const std::vector<ScalingRow>& rows) {
  if (rows.size() < 2) return 1.0;
  double log_sum = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) log_sum += std::log(rows[i - 1].ms_per_token / rows[i].ms_per_token);
  return std::exp(log_sum / static_cast<double>(rows.size() - 1));
}

void write_run_csv(std::ostream& os, const std::vector<ExperimentResult>& rows) {
  os << "# lpu-run v" << kCsvVersion << "\n";
  os << "model,arch,devices,partition,ms_per_token,utilization,exposed_sync_us\n";
  for (const auto& r : rows)
    os << r.model << ',' << r.arch << ',' << r.devices << ',' << r.partition << ',' << r.ms_per_token << ','
       << r.utilization << ',' << r.exposed_sync_us << '\n';
}

void write_scaling_csv(std::ostream& os, const std::vector<ScalingRow>& rows) {
  os << "# lpu-scaling v" << kCsvVersion << "\n";
  os << "devices,partition,ms_per_token,speedup,exposed_sync_us,utilization\n";
  for (const auto& r : rows)
    os << r.devices << ',' << r.partition << ',' << r.ms_per_token << ',' << r.speedup << ',' << r.exposed_sync_us
       << ',' << r.utilization << '\n';
}

}  // namespace lpu
