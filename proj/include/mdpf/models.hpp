#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdpf/mixture.hpp"
#include "mdpf/rng.hpp"

namespace mdpf {

enum class Activation { kRelu, kTanh };

// Dense stack: hidden layers activated, final layer linear.  Weights start
// uniform in +-1/sqrt(fan_in); zero_final zeroes the last layer so residual
// nets begin at the identity.
struct Mlp {
  std::vector<int> widths;  // [in, h..., out]
  Activation activation = Activation::kRelu;
  std::vector<Parameter> weights;  // widths[i] x widths[i+1]
  std::vector<Parameter> biases;   // widths[i+1]

  static Mlp make(const std::string& name, std::vector<int> widths, Activation act,
                  RngStream& rng, bool zero_final = false);

  ad::Var forward(Ctx& ctx, const ad::Var& x) const;  // B x in -> B x out
  void collect_params(std::vector<Parameter*>& out);
  void collect_params(std::vector<const Parameter*>& out) const;
};

// Width of the angle-lifted representation: 1 per linear dim, 2 per circular.
int lifted_dim(const std::vector<Topology>& topo);

// Replace each circular dim by (cos, sin); linear dims pass through.  Accepts
// a D vector or an N x D matrix.
ad::Var angle_to_vec(const ad::Var& x, const std::vector<Topology>& topo);

// Inverse lift: circular dims recovered via the two-argument arctangent of the
// (sin, cos) pair (scale-invariant, wrapped to [-pi, pi)); throws on an all-zero
// pair.
ad::Var vec_to_angle(const ad::Var& v, const std::vector<Topology>& topo);

// Learned stochastic dynamics: encode the (optionally position-masked) lifted
// particle and the action, concatenate Gaussian noise, and emit a tanh-bounded
// residual delta per dimension.
struct DynamicsModel {
  std::vector<Topology> dim_topology;
  Mlp particle_encoder;
  std::optional<Mlp> action_encoder;
  Mlp residual_net;
  int noise_dim = 0;
  Tensor output_scale;  // D, per-dimension delta bound
  bool position_invariant = false;

  static DynamicsModel make(const std::string& name, const std::vector<Topology>& topo,
                            int action_dim, RngStream& rng, bool position_invariant = false,
                            int hidden = 64, double scale = 0.99);

  ParticleSet propose(Ctx& ctx, const ParticleSet& ps, const std::optional<Tensor>& action,
                      RngStream& rng) const;
  void collect_params(std::vector<Parameter*>& out);
  void collect_params(std::vector<const Parameter*>& out) const;
};

// Learned measurement update: per-particle log-likelihood from encoded
// particle and encoded observation, folded into the weights via softmax.
struct MeasurementModel {
  std::vector<Topology> state_topology;
  std::vector<Topology> obs_topology;
  Mlp particle_encoder;
  Mlp observation_encoder;
  Mlp weight_net;  // scalar output

  static MeasurementModel make(const std::string& name, const std::vector<Topology>& state_topo,
                               const std::vector<Topology>& obs_topo, RngStream& rng,
                               int hidden = 64);

  // log w_new = weight_net(enc(particle), enc(obs)) + log w_old, normalized.
  ParticleSet weigh(Ctx& ctx, const ParticleSet& ps, const Tensor& obs) const;
  // the raw per-particle log-likelihood column (pre-normalization)
  ad::Var log_likelihood(Ctx& ctx, const ad::Var& particles, const Tensor& obs) const;
  void collect_params(std::vector<Parameter*>& out);
  void collect_params(std::vector<const Parameter*>& out) const;
};

// Flat named-array checkpoint: raw little-endian doubles plus a JSON manifest
// (name, shape, offset) stored alongside as <path>.json.
void save_checkpoint(const std::string& path, const std::vector<const Parameter*>& params);
void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params);

}  // namespace mdpf
