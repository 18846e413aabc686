#include "mdpf/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "mdpf/kernels.hpp"
#include "mdpf/special.hpp"

namespace mdpf {

using nlohmann::json;
using special::kPi;

static_assert(std::endian::native == std::endian::little,
              "the dataset container writes host-order doubles and assumes little-endian");

void Dataset::validate() const {
  if (!clean_observations.empty() && clean_observations.size() != trajectories.size()) {
    throw std::invalid_argument("dataset has " + std::to_string(clean_observations.size()) +
                                " clean observation blocks for " +
                                std::to_string(trajectories.size()) + " trajectories");
  }
  for (size_t i = 0; i < trajectories.size(); ++i) {
    trajectories[i].validate();
    if (!clean_observations.empty() &&
        !clean_observations[i].same_shape(trajectories[i].observations)) {
      throw std::invalid_argument("clean observations shaped unlike the observations");
    }
  }
}

void BearingsWorld::validate() const {
  if (outlier_rate < 0.0 || outlier_rate > 1.0) {
    throw std::invalid_argument("outlier rate must lie in [0, 1]");
  }
  if (!(concentration > 0.0)) throw std::invalid_argument("concentration must be positive");
  if (!(speed_min > 0.0) || speed_max < speed_min) {
    throw std::invalid_argument("speed bounds must satisfy 0 < min <= max");
  }
  if (!(radius_min > 0.0) || radius_max < radius_min) {
    throw std::invalid_argument("radius bounds must satisfy 0 < min <= max");
  }
  if (speed_walk < 0.0 || heading_walk < 0.0) {
    throw std::invalid_argument("walk scales must be non-negative");
  }
  if (label_stride < 1) throw std::invalid_argument("label stride must be >= 1");
}

Dataset gen_synthetic(const SyntheticTruth& truth, int n_seq, int T, RngStream& rng) {
  if (n_seq < 0) throw std::invalid_argument("n_seq must be >= 0");
  if (T < 1) throw std::invalid_argument("T must be >= 1");
  const double w1 = 1.0 - truth.w2;
  if (w1 < 0.0 || w1 > 1.0) throw std::invalid_argument("w2 must lie in [0, 1]");

  Dataset ds;
  ds.trajectories.reserve(static_cast<size_t>(n_seq));
  const RngStream base = rng.split(rng.next_u64());
  for (int i = 0; i < n_seq; ++i) {
    RngStream traj_rng = base.split(static_cast<std::uint64_t>(i));
    Tensor states({T, 1});
    Tensor obs({T, 1});
    Tensor actions({T, 1});
    double x = traj_rng.gaussian();  // x_0 ~ N(0, 1), not stored
    for (int t = 0; t < T; ++t) {
      const double a = traj_rng.uniform(-1.0, 1.0);
      x = truth.A * x + truth.B * a + truth.sigma * traj_rng.gaussian();
      const bool branch1 = traj_rng.uniform01() < w1;
      const double mean = branch1 ? truth.C1 * x + truth.c1 : truth.C2 * x + truth.c2;
      states.at(t, 0) = x;
      actions.at(t, 0) = a;
      obs.at(t, 0) = mean + truth.gamma * traj_rng.gaussian();
    }
    ds.trajectories.push_back(
        Trajectory{std::move(states), {T - 1}, std::move(obs), std::move(actions)});
  }
  const json cfg{{"task", "synthetic"},
                 {"n_seq", n_seq},
                 {"T", T},
                 {"truth",
                  {{"A", truth.A},
                   {"B", truth.B},
                   {"sigma", truth.sigma},
                   {"C1", truth.C1},
                   {"c1", truth.c1},
                   {"C2", truth.C2},
                   {"c2", truth.c2},
                   {"gamma", truth.gamma},
                   {"w2", truth.w2}}}};
  ds.generator = cfg.dump();
  return ds;
}

Tensor clean_bearings(const BearingsWorld& world, const Tensor& states) {
  if (states.rank() != 2 || states.dim(1) < 2) {
    throw std::invalid_argument("states must be T x D with D >= 2 for bearings");
  }
  const int T = states.dim(0);
  Tensor psi({T, 1});
  for (int t = 0; t < T; ++t) {
    psi.at(t, 0) =
        std::atan2(states.at(t, 1) - world.station_y, states.at(t, 0) - world.station_x);
  }
  return psi;
}

Dataset gen_bearings(const BearingsWorld& world, int n_seq, int T, RngStream& rng) {
  world.validate();
  if (n_seq < 0) throw std::invalid_argument("n_seq must be >= 0");
  if (T < 1) throw std::invalid_argument("T must be >= 1");

  Dataset ds;
  ds.trajectories.reserve(static_cast<size_t>(n_seq));
  ds.clean_observations.reserve(static_cast<size_t>(n_seq));
  const RngStream base = rng.split(rng.next_u64());
  for (int i = 0; i < n_seq; ++i) {
    RngStream traj_rng = base.split(static_cast<std::uint64_t>(i));
    Tensor states({T, 3});
    // uniform over the annulus area between the two radii
    const double radius = std::sqrt(traj_rng.uniform(world.radius_min * world.radius_min,
                                                     world.radius_max * world.radius_max));
    const double around = traj_rng.uniform(-kPi, kPi);
    double x = world.station_x + radius * std::cos(around);
    double y = world.station_y + radius * std::sin(around);
    double heading = traj_rng.uniform(-kPi, kPi);
    double speed = traj_rng.uniform(world.speed_min, world.speed_max);
    for (int t = 0; t < T; ++t) {
      if (t > 0) {
        speed = std::clamp(speed + world.speed_walk * traj_rng.gaussian(), world.speed_min,
                           world.speed_max);
        heading = special::wrap_angle(heading + world.heading_walk * traj_rng.gaussian());
        x += speed * std::cos(heading);
        y += speed * std::sin(heading);
      }
      states.at(t, 0) = x;
      states.at(t, 1) = y;
      states.at(t, 2) = heading;
    }
    Tensor psi = clean_bearings(world, states);
    Tensor obs({T, 1});
    for (int t = 0; t < T; ++t) {
      if (traj_rng.uniform01() < world.outlier_rate) {
        obs.at(t, 0) = traj_rng.uniform(-kPi, kPi);
      } else {
        obs.at(t, 0) = special::wrap_angle(
            psi.at(t, 0) +
            kernel_sample_val(KernelFamily::kVonMises, world.concentration, traj_rng));
      }
    }
    std::vector<int> labels;
    if (world.dense_labels) {
      for (int t = 0; t < T; ++t) labels.push_back(t);
    } else {
      for (int t = world.label_stride - 1; t < T; t += world.label_stride) labels.push_back(t);
    }
    ds.trajectories.push_back(
        Trajectory{std::move(states), std::move(labels), std::move(obs), std::nullopt});
    ds.clean_observations.push_back(std::move(psi));
  }
  const json cfg{{"task", "bearings"},
                 {"n_seq", n_seq},
                 {"T", T},
                 {"station", {world.station_x, world.station_y}},
                 {"outlier_rate", world.outlier_rate},
                 {"concentration", world.concentration},
                 {"speed", {world.speed_min, world.speed_max, world.speed_walk}},
                 {"heading_walk", world.heading_walk},
                 {"radius", {world.radius_min, world.radius_max}},
                 {"label_stride", world.label_stride},
                 {"dense_labels", world.dense_labels}};
  ds.generator = cfg.dump();
  return ds;
}

namespace {

constexpr char kMagic[8] = {'M', 'D', 'P', 'F', 'D', 'A', 'T', 'A'};
constexpr std::uint32_t kFormatVersion = 1;

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw std::runtime_error("dataset write failed");
}

void read_bytes(std::ifstream& in, void* p, std::size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw std::runtime_error(std::string("truncated dataset file (") + what + ")");
  }
}

void write_block(std::ofstream& out, const Tensor& t) {
  write_bytes(out, t.data(), sizeof(double) * static_cast<std::size_t>(t.numel()));
}

void read_block(std::ifstream& in, Tensor& t, const char* what) {
  read_bytes(in, t.data(), sizeof(double) * static_cast<std::size_t>(t.numel()), what);
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  ds.validate();
  int state_dim = 0;
  int obs_dim = 0;
  int action_dim = 0;
  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& tr = ds.trajectories[i];
    const int d = tr.state_dim();
    const int o = tr.observations.dim(1);
    const int a = tr.actions ? tr.actions->dim(1) : 0;
    if (i == 0) {
      state_dim = d;
      obs_dim = o;
      action_dim = a;
    } else if (d != state_dim || o != obs_dim || a != action_dim) {
      throw std::invalid_argument("dataset trajectories disagree on dimensions");
    }
  }
  const bool has_clean = !ds.clean_observations.empty();

  std::vector<int> lengths;
  std::vector<int> label_counts;
  for (const Trajectory& tr : ds.trajectories) {
    lengths.push_back(tr.length());
    label_counts.push_back(static_cast<int>(tr.labels.size()));
  }
  const json header{{"state_dim", state_dim},   {"obs_dim", obs_dim},
                    {"action_dim", action_dim}, {"has_clean", has_clean},
                    {"lengths", lengths},       {"label_counts", label_counts},
                    {"generator", ds.generator}};
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_bytes(out, kMagic, sizeof kMagic);
  const std::uint32_t version = kFormatVersion;
  write_bytes(out, &version, sizeof version);
  const std::uint64_t head_size = head.size();
  write_bytes(out, &head_size, sizeof head_size);
  write_bytes(out, head.data(), head.size());

  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& tr = ds.trajectories[i];
    write_block(out, tr.states);
    write_block(out, tr.observations);
    if (action_dim > 0) write_block(out, *tr.actions);
    Tensor labels({static_cast<int>(tr.labels.size())});
    for (size_t k = 0; k < tr.labels.size(); ++k) {
      labels[static_cast<std::int64_t>(k)] = static_cast<double>(tr.labels[k]);
    }
    write_block(out, labels);
    if (has_clean) write_block(out, ds.clean_observations[i]);
  }
  out.close();
  if (!out) throw std::runtime_error("dataset write failed closing " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);

  char magic[sizeof kMagic];
  read_bytes(in, magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("not a dataset file (bad magic): " + path);
  }
  std::uint32_t version = 0;
  read_bytes(in, &version, sizeof version, "version");
  if (version != kFormatVersion) {
    throw std::runtime_error("unsupported dataset version " + std::to_string(version) +
                             " (expected " + std::to_string(kFormatVersion) + ")");
  }
  std::uint64_t head_size = 0;
  read_bytes(in, &head_size, sizeof head_size, "header size");
  if (head_size > (1ull << 31)) throw std::runtime_error("corrupt dataset header size");
  std::string head(static_cast<std::size_t>(head_size), '\0');
  read_bytes(in, head.data(), head.size(), "header");

  int state_dim = 0;
  int obs_dim = 0;
  int action_dim = 0;
  bool has_clean = false;
  std::vector<int> lengths;
  std::vector<int> label_counts;
  Dataset ds;
  try {
    const json header = json::parse(head);
    state_dim = header.at("state_dim").get<int>();
    obs_dim = header.at("obs_dim").get<int>();
    action_dim = header.at("action_dim").get<int>();
    has_clean = header.at("has_clean").get<bool>();
    lengths = header.at("lengths").get<std::vector<int>>();
    label_counts = header.at("label_counts").get<std::vector<int>>();
    ds.generator = header.at("generator").get<std::string>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("corrupt dataset header: ") + e.what());
  }
  if (lengths.size() != label_counts.size()) {
    throw std::runtime_error("corrupt dataset header: lengths/label_counts mismatch");
  }

  for (size_t i = 0; i < lengths.size(); ++i) {
    const int T = lengths[i];
    const int n_labels = label_counts[i];
    if (T < 1 || n_labels < 0 || n_labels > T) {
      throw std::runtime_error("corrupt dataset header: bad trajectory layout");
    }
    Tensor states({T, state_dim});
    read_block(in, states, "states");
    Tensor obs({T, obs_dim});
    read_block(in, obs, "observations");
    std::optional<Tensor> actions;
    if (action_dim > 0) {
      actions.emplace(std::vector<int>{T, action_dim});
      read_block(in, *actions, "actions");
    }
    Tensor labels({n_labels});
    read_block(in, labels, "labels");
    std::vector<int> label_steps;
    for (std::int64_t k = 0; k < labels.numel(); ++k) {
      label_steps.push_back(static_cast<int>(labels[k]));
    }
    ds.trajectories.push_back(
        Trajectory{std::move(states), std::move(label_steps), std::move(obs), std::move(actions)});
    if (has_clean) {
      Tensor clean({T, obs_dim});
      read_block(in, clean, "clean observations");
      ds.clean_observations.push_back(std::move(clean));
    }
  }
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw std::runtime_error("trailing bytes after dataset payload: " + path);
  }
  ds.validate();
  return ds;
}

}  // namespace mdpf
