#include "mdpf/models.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "mdpf/special.hpp"

namespace mdpf {

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

Mlp Mlp::make(const std::string& name, std::vector<int> widths, Activation act, RngStream& rng,
              bool zero_final) {
  if (widths.size() < 2) throw std::invalid_argument("mlp needs at least one layer");
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("mlp widths must be positive");
  }
  Mlp m;
  m.widths = widths;
  m.activation = act;
  const size_t layers = widths.size() - 1;
  for (size_t l = 0; l < layers; ++l) {
    const int fan_in = widths[l], fan_out = widths[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w({fan_in, fan_out});
    Tensor b({fan_out}, 0.0);
    const bool zero = zero_final && l == layers - 1;
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = zero ? 0.0 : rng.uniform(-bound, bound);
    if (!zero) {
      for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = rng.uniform(-bound, bound);
    }
    const std::string tag = name + "." + std::to_string(l);
    m.weights.emplace_back(tag + ".w", std::move(w));
    m.biases.emplace_back(tag + ".b", std::move(b));
  }
  return m;
}

ad::Var Mlp::forward(Ctx& ctx, const ad::Var& x) const {
  if (x->value.rank() != 2 || x->value.dim(1) != widths.front()) {
    throw std::invalid_argument("mlp input must be B x " + std::to_string(widths.front()) +
                                ", got " + x->value.shape_str());
  }
  ad::Var h = x;
  for (size_t l = 0; l < weights.size(); ++l) {
    h = ad::add(ad::matmul(h, ctx.value(weights[l])), ctx.value(biases[l]));
    if (l + 1 < weights.size()) {
      h = activation == Activation::kRelu ? ad::relu(h) : ad::tanh(h);
    }
  }
  return h;
}

void Mlp::collect_params(std::vector<Parameter*>& out) {
  for (auto& p : weights) out.push_back(&p);
  for (auto& p : biases) out.push_back(&p);
}

void Mlp::collect_params(std::vector<const Parameter*>& out) const {
  for (const auto& p : weights) out.push_back(&p);
  for (const auto& p : biases) out.push_back(&p);
}

// ---------------------------------------------------------------------------
// Angle lifting
// ---------------------------------------------------------------------------

int lifted_dim(const std::vector<Topology>& topo) {
  int w = 0;
  for (Topology t : topo) w += t == Topology::kCircular ? 2 : 1;
  return w;
}

ad::Var angle_to_vec(const ad::Var& x, const std::vector<Topology>& topo) {
  const bool vec = x->value.rank() == 1;
  ad::Var m = vec ? ad::reshape(x, {1, static_cast<int>(x->value.numel())}) : x;
  if (m->value.dim(1) != static_cast<int>(topo.size())) {
    throw std::invalid_argument("angle_to_vec dim mismatch");
  }
  std::vector<ad::Var> cols;
  for (size_t j = 0; j < topo.size(); ++j) {
    ad::Var c = ad::select_col(m, static_cast<int>(j));
    if (topo[j] == Topology::kCircular) {
      cols.push_back(ad::cos(c));
      cols.push_back(ad::sin(c));
    } else {
      cols.push_back(c);
    }
  }
  ad::Var out = ad::stack_cols(cols);
  return vec ? ad::reshape(out, {lifted_dim(topo)}) : out;
}

ad::Var vec_to_angle(const ad::Var& v, const std::vector<Topology>& topo) {
  const bool vec = v->value.rank() == 1;
  ad::Var m = vec ? ad::reshape(v, {1, static_cast<int>(v->value.numel())}) : v;
  if (m->value.dim(1) != lifted_dim(topo)) throw std::invalid_argument("vec_to_angle dim mismatch");
  std::vector<ad::Var> cols;
  int col = 0;
  for (size_t j = 0; j < topo.size(); ++j) {
    if (topo[j] == Topology::kCircular) {
      ad::Var c = ad::select_col(m, col);
      ad::Var s = ad::select_col(m, col + 1);
      for (int i = 0; i < m->value.dim(0); ++i) {
        if (c->value[i] == 0.0 && s->value[i] == 0.0) {
          throw std::invalid_argument("vec_to_angle: zero (cos, sin) pair");
        }
      }
      cols.push_back(ad::wrap_angle(ad::atan2(s, c)));
      col += 2;
    } else {
      cols.push_back(ad::select_col(m, col));
      col += 1;
    }
  }
  ad::Var out = ad::stack_cols(cols);
  return vec ? ad::reshape(out, {static_cast<int>(topo.size())}) : out;
}

// ---------------------------------------------------------------------------
// DynamicsModel
// ---------------------------------------------------------------------------

DynamicsModel DynamicsModel::make(const std::string& name, const std::vector<Topology>& topo,
                                  int action_dim, RngStream& rng, bool position_invariant,
                                  int hidden, double scale) {
  const int d = static_cast<int>(topo.size());
  const int lift = lifted_dim(topo);
  DynamicsModel dyn;
  dyn.dim_topology = topo;
  dyn.noise_dim = d;
  dyn.position_invariant = position_invariant;
  dyn.output_scale = Tensor({d}, scale);
  dyn.particle_encoder = Mlp::make(name + ".penc", {lift, hidden, hidden}, Activation::kRelu, rng);
  int feat = hidden + dyn.noise_dim;
  if (action_dim > 0) {
    dyn.action_encoder =
        Mlp::make(name + ".aenc", {action_dim, hidden, hidden}, Activation::kRelu, rng);
    feat += hidden;
  }
  dyn.residual_net =
      Mlp::make(name + ".res", {feat, hidden, hidden, hidden, d}, Activation::kRelu, rng,
                /*zero_final=*/true);
  return dyn;
}

ParticleSet DynamicsModel::propose(Ctx& ctx, const ParticleSet& ps,
                                   const std::optional<Tensor>& action, RngStream& rng) const {
  const int n = ps.n(), d = ps.d();
  if (d != static_cast<int>(dim_topology.size())) {
    throw std::invalid_argument("propose: particle dim mismatch");
  }

  ad::Var lifted = angle_to_vec(ps.particles, dim_topology);
  if (position_invariant) {
    // zero the translational (linear) columns; headings stay visible
    Tensor mask({lifted_dim(dim_topology)}, 0.0);
    int col = 0;
    for (Topology t : dim_topology) {
      if (t == Topology::kCircular) {
        mask[col] = 1.0;
        mask[col + 1] = 1.0;
        col += 2;
      } else {
        col += 1;
      }
    }
    lifted = ad::mul(lifted, ad::constant(std::move(mask)));
  }

  std::vector<ad::Var> feats = {particle_encoder.forward(ctx, lifted)};
  if (action_encoder) {
    if (!action) throw std::invalid_argument("propose: model expects an action");
    ad::Var row = ad::constant(*action);
    ad::Var enc = action_encoder->forward(
        ctx, ad::reshape(row, {1, static_cast<int>(action->numel())}));
    // broadcast the single encoded action down the particle axis
    feats.push_back(ad::matmul(ad::constant(Tensor({n, 1}, 1.0)), enc));
  }
  Tensor eta({n, noise_dim});
  for (std::int64_t i = 0; i < eta.numel(); ++i) eta[i] = rng.gaussian();
  feats.push_back(ad::constant(std::move(eta)));

  ad::Var raw = residual_net.forward(ctx, ad::concat(feats, 1));
  ad::Var delta = ad::mul(ad::tanh(raw), ad::constant(output_scale));

  std::vector<ad::Var> cols;
  for (int j = 0; j < d; ++j) {
    ad::Var c = ad::add(ad::select_col(ps.particles, j), ad::select_col(delta, j));
    if (dim_topology[static_cast<size_t>(j)] == Topology::kCircular) c = ad::wrap_angle(c);
    cols.push_back(c);
  }
  return ParticleSet{ad::stack_cols(cols), ps.weights, ps.resampling_weights, ps.dim_topology};
}

void DynamicsModel::collect_params(std::vector<Parameter*>& out) {
  particle_encoder.collect_params(out);
  if (action_encoder) action_encoder->collect_params(out);
  residual_net.collect_params(out);
}

void DynamicsModel::collect_params(std::vector<const Parameter*>& out) const {
  particle_encoder.collect_params(out);
  if (action_encoder) action_encoder->collect_params(out);
  residual_net.collect_params(out);
}

// ---------------------------------------------------------------------------
// MeasurementModel
// ---------------------------------------------------------------------------

MeasurementModel MeasurementModel::make(const std::string& name,
                                        const std::vector<Topology>& state_topo,
                                        const std::vector<Topology>& obs_topo, RngStream& rng,
                                        int hidden) {
  MeasurementModel m;
  m.state_topology = state_topo;
  m.obs_topology = obs_topo;
  m.particle_encoder =
      Mlp::make(name + ".penc", {lifted_dim(state_topo), hidden, hidden}, Activation::kRelu, rng);
  m.observation_encoder =
      Mlp::make(name + ".oenc", {lifted_dim(obs_topo), hidden, hidden}, Activation::kRelu, rng);
  m.weight_net = Mlp::make(name + ".wnet", {2 * hidden, hidden, hidden, 1}, Activation::kRelu, rng);
  return m;
}

ad::Var MeasurementModel::log_likelihood(Ctx& ctx, const ad::Var& particles,
                                         const Tensor& obs) const {
  const int n = particles->value.dim(0);
  ad::Var enc_p = particle_encoder.forward(ctx, angle_to_vec(particles, state_topology));
  ad::Var obs_row = ad::reshape(ad::constant(obs), {1, static_cast<int>(obs.numel())});
  ad::Var enc_o = observation_encoder.forward(ctx, angle_to_vec(obs_row, obs_topology));
  ad::Var enc_o_tiled = ad::matmul(ad::constant(Tensor({n, 1}, 1.0)), enc_o);
  ad::Var logits = weight_net.forward(ctx, ad::concat({enc_p, enc_o_tiled}, 1));
  return ad::reshape(logits, {n});
}

ParticleSet MeasurementModel::weigh(Ctx& ctx, const ParticleSet& ps, const Tensor& obs) const {
  ad::Var loglik = log_likelihood(ctx, ps.particles, obs);
  ad::Var logw = ad::add(loglik, ad::log(ad::clamp_min(ps.weights, 1e-300)));
  return ParticleSet{ps.particles, ad::softmax(logw), ps.resampling_weights, ps.dim_topology};
}

void MeasurementModel::collect_params(std::vector<Parameter*>& out) {
  particle_encoder.collect_params(out);
  observation_encoder.collect_params(out);
  weight_net.collect_params(out);
}

void MeasurementModel::collect_params(std::vector<const Parameter*>& out) const {
  particle_encoder.collect_params(out);
  observation_encoder.collect_params(out);
  weight_net.collect_params(out);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const std::vector<const Parameter*>& params) {
  std::ofstream bin(path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot open checkpoint file '" + path + "'");
  nlohmann::json manifest = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const Parameter* p : params) {
    const Tensor& t = p->raw();
    bin.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
    manifest.push_back({{"name", p->name()},
                        {"shape", t.shape()},
                        {"offset", offset},
                        {"count", t.numel()}});
    offset += t.numel();
  }
  if (!bin) throw std::runtime_error("checkpoint write failed for '" + path + "'");
  bin.close();
  std::ofstream mf(path + ".json", std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot open checkpoint manifest for '" + path + "'");
  mf << manifest.dump(2) << "\n";
}

void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
  std::ifstream mf(path + ".json");
  if (!mf) throw std::runtime_error("cannot open checkpoint manifest for '" + path + "'");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open checkpoint file '" + path + "'");

  std::unordered_map<std::string, nlohmann::json> by_name;
  for (const auto& e : manifest) by_name[e.at("name").get<std::string>()] = e;

  for (Parameter* p : params) {
    auto it = by_name.find(p->name());
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint is missing parameter '" + p->name() + "'");
    }
    const auto shape = it->second.at("shape").get<std::vector<int>>();
    if (shape != p->raw().shape()) {
      throw std::runtime_error("checkpoint shape mismatch for '" + p->name() + "'");
    }
    const auto offset = it->second.at("offset").get<std::int64_t>();
    bin.seekg(static_cast<std::streamoff>(offset) * static_cast<std::streamoff>(sizeof(double)));
    bin.read(reinterpret_cast<char*>(p->raw().data()),
             static_cast<std::streamsize>(p->raw().numel() * sizeof(double)));
    if (!bin) throw std::runtime_error("checkpoint read failed for '" + p->name() + "'");
  }
}

}  // namespace mdpf
