#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "klflow/rng.hpp"
#include "klflow/tape.hpp"
#include "klflow/tensor.hpp"

namespace klflow {

/// Isotropic Gaussian N(mean, variance * I) used as the flow's reference measure.
struct BaseDistribution {
  std::vector<double> mean;
  double variance = 1.0;

  static BaseDistribution isotropic(std::size_t dim, double variance);

  std::size_t dim() const { return mean.size(); }
  double log_density(std::span<const double> x) const;
  /// (count x d) draws.
  Tensor sample(std::size_t count, Rng& rng) const;
  /// Per-row log-density of a (M x d) node, returned as (M x 1).
  ad::Var log_density(ad::Tape& tape, ad::Var x) const;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

/// tanh MLP; the last layer is linear.
struct Mlp {
  std::vector<Linear> layers;

  std::size_t input_dim() const { return layers.front().weight.rows(); }
  std::size_t output_dim() const { return layers.back().weight.cols(); }
  std::size_t width() const { return layers.size() > 1 ? layers.front().weight.cols() : 0; }
  std::size_t hidden_layers() const { return layers.size() - 1; }
};

/// Affine coupling block: y_A = x_A, y_B = x_B * exp(s(x_A)) + t(x_A).
/// For d = 1 the pass-through set is empty and s, t reduce to learned constants.
struct CouplingBlock {
  std::size_t dim = 0;
  std::uint32_t parity = 0;
  std::vector<std::size_t> pass;
  std::vector<std::size_t> transform;
  Mlp scale_net;
  Mlp shift_net;

  std::size_t width() const { return scale_net.width(); }
  std::size_t hidden_layers() const { return scale_net.hidden_layers(); }
  std::size_t parameter_count() const { return 2 * (scale_net.layers.size() + shift_net.layers.size()); }
};

/// Coordinates transformed by a block of the given parity: alternating by index.
void coupling_masks(std::size_t dim, std::uint32_t parity, std::vector<std::size_t>& pass,
                    std::vector<std::size_t>& transform);

/// `blocks` coupling blocks whose s and t nets have zero output layers, so the
/// composed map is exactly the identity. Hidden layers get the usual uniform
/// fan-in initialisation. Block i uses mask parity (parity_offset + i) % 2.
std::vector<CouplingBlock> identity_init(std::size_t dim, std::size_t blocks, std::size_t width,
                                         Rng& rng, std::size_t parity_offset = 0,
                                         std::size_t hidden_layers = 2);

struct FlowPass {
  ad::Var out;
  ad::Var logdet;  // (M x 1)
};

/// Variables bound to a flow's parameters on one tape.
struct BoundFlow {
  std::vector<ad::Var> params;       // every parameter, canonical order
  std::vector<ad::Var> trainable;    // the subset that carries gradients
};

/// T = T_L o ... o T_1 over a Gaussian base. The first `frozen_prefix()` blocks
/// never receive gradients.
class FlowModel {
 public:
  static constexpr double kDefaultScaleRange = 5.0;

  FlowModel() = default;
  FlowModel(BaseDistribution base, std::vector<CouplingBlock> blocks,
            double scale_range = kDefaultScaleRange);

  std::size_t dim() const { return base_.dim(); }
  std::size_t size() const { return blocks_.size(); }
  const BaseDistribution& base() const { return base_; }
  const std::vector<CouplingBlock>& blocks() const { return blocks_; }
  std::vector<CouplingBlock>& blocks() { return blocks_; }
  double scale_range() const { return scale_range_; }

  std::size_t frozen_prefix() const { return frozen_prefix_; }
  void freeze_prefix(std::size_t blocks);

  std::vector<Tensor*> trainable_parameters();
  std::vector<const Tensor*> parameters() const;

  /// Binds parameters as tape leaves; with freeze_all every parameter is a constant.
  BoundFlow bind(ad::Tape& tape, bool freeze_all = false) const;

  /// Blocks [first, last) applied in order; logdet sums s over those blocks.
  FlowPass forward(ad::Tape& tape, const BoundFlow& bound, ad::Var x, std::size_t first = 0,
                   std::size_t last = static_cast<std::size_t>(-1)) const;
  /// Inverse of the whole flow; logdet is log|det J_{T^-1}| = -sum s.
  FlowPass inverse(ad::Tape& tape, const BoundFlow& bound, ad::Var y) const;

  Tensor forward(const Tensor& x, std::vector<double>* logdet = nullptr) const;
  Tensor inverse(const Tensor& y, std::vector<double>* logdet_inverse = nullptr) const;
  /// log rho(theta) = log rho_0(T^-1 theta) + log|det J_{T^-1}(theta)|.
  std::vector<double> log_density(const Tensor& theta) const;

 private:
  std::size_t param_offset(std::size_t block) const;

  BaseDistribution base_;
  std::vector<CouplingBlock> blocks_;
  double scale_range_ = kDefaultScaleRange;
  std::size_t frozen_prefix_ = 0;
};

/// Single-block evaluation with explicit parameter variables (s, t nets in
/// canonical order: scale layers W,b..., shift layers W,b...).
FlowPass block_forward(ad::Tape& tape, const CouplingBlock& block, std::span<const ad::Var> params,
                       ad::Var x, double scale_range);
FlowPass block_inverse(ad::Tape& tape, const CouplingBlock& block, std::span<const ad::Var> params,
                       ad::Var y, double scale_range);

/// Particles pushed through a flow with base draws retained for reuse.
struct ParticleBatch {
  Tensor base;
  Tensor points;
  std::vector<double> logdet;
  std::vector<double> log_density;  // log rho_0(base) - logdet
};

ParticleBatch push_forward(const FlowModel& flow, Tensor base);
ParticleBatch sample(const FlowModel& flow, std::size_t count, Rng& rng);

/// front then back. The result freezes every block of `front`.
FlowModel compose(const FlowModel& front, std::vector<CouplingBlock> back);

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize(const FlowModel& flow);
FlowModel deserialize(std::span<const std::uint8_t> bytes);
void save_checkpoint(const FlowModel& flow, const std::filesystem::path& path);
FlowModel load_checkpoint(const std::filesystem::path& path);

}  // namespace klflow
