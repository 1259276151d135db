#include "klflow/flow.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include "klflow/error.hpp"

namespace klflow {

namespace {

constexpr std::size_t kEvalChunk = 4096;

Tensor selector(std::size_t dim, const std::vector<std::size_t>& coords, bool transpose) {
  Tensor s = transpose ? Tensor(coords.size(), dim, 0.0) : Tensor(dim, coords.size(), 0.0);
  for (std::size_t k = 0; k < coords.size(); ++k) {
    if (transpose) {
      s(k, coords[k]) = 1.0;
    } else {
      s(coords[k], k) = 1.0;
    }
  }
  return s;
}

ad::Var apply_mlp(ad::Tape& tape, const Mlp& net, std::span<const ad::Var> params, ad::Var x) {
  ad::Var h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    h = tape.matmul(h, params[2 * l]) + params[2 * l + 1];
    if (l + 1 < net.layers.size()) h = ad::tanh(h);
  }
  return h;
}

Linear make_linear(std::size_t in, std::size_t out, Rng* rng) {
  Linear lin{Tensor(in, out, 0.0), Tensor(1, out, 0.0)};
  if (rng != nullptr) {
    const double bound = in > 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : 1.0;
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& w : lin.weight.values()) w = u(*rng);
    for (double& b : lin.bias.values()) b = u(*rng);
  }
  return lin;
}

Mlp make_identity_mlp(std::size_t in, std::size_t out, std::size_t width, std::size_t hidden,
                      Rng& rng) {
  Mlp net;
  std::size_t fan_in = in;
  for (std::size_t h = 0; h < hidden; ++h) {
    net.layers.push_back(make_linear(fan_in, width, &rng));
    fan_in = width;
  }
  net.layers.push_back(make_linear(fan_in, out, nullptr));
  return net;
}

template <typename Fn>
auto with_block_context(std::size_t index, Fn&& fn) {
  try {
    return fn();
  } catch (const DomainError& e) {
    throw DomainError("coupling block " + std::to_string(index) + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// BaseDistribution

BaseDistribution BaseDistribution::isotropic(std::size_t dim, double variance) {
  KLFLOW_REQUIRE(variance > 0.0, "base variance must be positive");
  return BaseDistribution{std::vector<double>(dim, 0.0), variance};
}

double BaseDistribution::log_density(std::span<const double> x) const {
  KLFLOW_REQUIRE(x.size() == dim(), "base log_density: dimension mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - mean[i]) * (x[i] - mean[i]);
  const double d = static_cast<double>(dim());
  return -0.5 * d * std::log(2.0 * std::numbers::pi * variance) - 0.5 * sq / variance;
}

Tensor BaseDistribution::sample(std::size_t count, Rng& rng) const {
  Tensor out(count, dim());
  const double sd = std::sqrt(variance);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < dim(); ++j) out(i, j) = mean[j] + sd * standard_normal(rng);
  }
  return out;
}

ad::Var BaseDistribution::log_density(ad::Tape& tape, ad::Var x) const {
  KLFLOW_REQUIRE(x.cols() == dim(), "base log_density: dimension mismatch");
  const double d = static_cast<double>(dim());
  const double c = -0.5 * d * std::log(2.0 * std::numbers::pi * variance);
  ad::Var centred = x - tape.constant(Tensor::row(mean));
  ad::Var quad = ad::sum_cols(ad::square(centred));
  return (-0.5 / variance) * quad + tape.constant(1, 1, c);
}

// ---------------------------------------------------------------------------
// Blocks

void coupling_masks(std::size_t dim, std::uint32_t parity, std::vector<std::size_t>& pass,
                    std::vector<std::size_t>& transform) {
  pass.clear();
  transform.clear();
  if (dim == 1) {
    transform.push_back(0);
    return;
  }
  for (std::size_t i = 0; i < dim; ++i) {
    (i % 2 == parity % 2 ? pass : transform).push_back(i);
  }
}

std::vector<CouplingBlock> identity_init(std::size_t dim, std::size_t blocks, std::size_t width,
                                         Rng& rng, std::size_t parity_offset,
                                         std::size_t hidden_layers) {
  KLFLOW_REQUIRE(dim >= 1, "identity_init: dim must be >= 1");
  KLFLOW_REQUIRE(width >= 1, "identity_init: width must be >= 1");
  std::vector<CouplingBlock> out;
  out.reserve(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    CouplingBlock blk;
    blk.dim = dim;
    blk.parity = static_cast<std::uint32_t>((parity_offset + b) % 2);
    coupling_masks(dim, blk.parity, blk.pass, blk.transform);
    blk.scale_net = make_identity_mlp(blk.pass.size(), blk.transform.size(), width, hidden_layers, rng);
    blk.shift_net = make_identity_mlp(blk.pass.size(), blk.transform.size(), width, hidden_layers, rng);
    out.push_back(std::move(blk));
  }
  return out;
}

namespace {

struct BlockNets {
  ad::Var s;
  ad::Var t;
};

BlockNets conditioner(ad::Tape& tape, const CouplingBlock& block, std::span<const ad::Var> params,
                      ad::Var x_pass, double scale_range) {
  const std::size_t ns = 2 * block.scale_net.layers.size();
  ad::Var raw = apply_mlp(tape, block.scale_net, params.first(ns), x_pass);
  ad::Var s = scale_range * ad::tanh((1.0 / scale_range) * raw);
  ad::Var t = apply_mlp(tape, block.shift_net, params.subspan(ns), x_pass);
  return {s, t};
}

}  // namespace

FlowPass block_forward(ad::Tape& tape, const CouplingBlock& block, std::span<const ad::Var> params,
                       ad::Var x, double scale_range) {
  KLFLOW_REQUIRE(x.cols() == block.dim, "block_forward: dimension mismatch");
  KLFLOW_REQUIRE(params.size() == block.parameter_count(), "block_forward: parameter count mismatch");
  ad::Var xa = tape.matmul(x, tape.constant(selector(block.dim, block.pass, false)));
  ad::Var xb = tape.matmul(x, tape.constant(selector(block.dim, block.transform, false)));
  BlockNets nets = conditioner(tape, block, params, xa, scale_range);
  ad::Var yb = xb * ad::exp(nets.s) + nets.t;
  ad::Var y = tape.matmul(xa, tape.constant(selector(block.dim, block.pass, true))) +
              tape.matmul(yb, tape.constant(selector(block.dim, block.transform, true)));
  return {y, ad::sum_cols(nets.s)};
}

FlowPass block_inverse(ad::Tape& tape, const CouplingBlock& block, std::span<const ad::Var> params,
                       ad::Var y, double scale_range) {
  KLFLOW_REQUIRE(y.cols() == block.dim, "block_inverse: dimension mismatch");
  KLFLOW_REQUIRE(params.size() == block.parameter_count(), "block_inverse: parameter count mismatch");
  ad::Var ya = tape.matmul(y, tape.constant(selector(block.dim, block.pass, false)));
  ad::Var yb = tape.matmul(y, tape.constant(selector(block.dim, block.transform, false)));
  BlockNets nets = conditioner(tape, block, params, ya, scale_range);
  ad::Var xb = (yb - nets.t) * ad::exp(-nets.s);
  ad::Var x = tape.matmul(ya, tape.constant(selector(block.dim, block.pass, true))) +
              tape.matmul(xb, tape.constant(selector(block.dim, block.transform, true)));
  return {x, -ad::sum_cols(nets.s)};
}

// ---------------------------------------------------------------------------
// FlowModel

FlowModel::FlowModel(BaseDistribution base, std::vector<CouplingBlock> blocks, double scale_range)
    : base_(std::move(base)), blocks_(std::move(blocks)), scale_range_(scale_range) {
  KLFLOW_REQUIRE(base_.variance > 0.0, "base variance must be positive");
  KLFLOW_REQUIRE(scale_range_ > 0.0, "scale range must be positive");
  for (const CouplingBlock& b : blocks_) {
    KLFLOW_REQUIRE(b.dim == base_.dim(), "all blocks must share the base dimension");
  }
}

void FlowModel::freeze_prefix(std::size_t blocks) {
  KLFLOW_REQUIRE(blocks <= blocks_.size(), "freeze_prefix beyond flow length");
  frozen_prefix_ = blocks;
}

std::size_t FlowModel::param_offset(std::size_t block) const {
  std::size_t off = 0;
  for (std::size_t b = 0; b < block; ++b) off += blocks_[b].parameter_count();
  return off;
}

namespace {

template <typename BlockT, typename Visit>
void visit_block_params(BlockT& block, Visit&& visit) {
  for (auto& l : block.scale_net.layers) {
    visit(l.weight);
    visit(l.bias);
  }
  for (auto& l : block.shift_net.layers) {
    visit(l.weight);
    visit(l.bias);
  }
}

}  // namespace

std::vector<Tensor*> FlowModel::trainable_parameters() {
  std::vector<Tensor*> out;
  for (std::size_t b = frozen_prefix_; b < blocks_.size(); ++b) {
    visit_block_params(blocks_[b], [&](Tensor& t) { out.push_back(&t); });
  }
  return out;
}

std::vector<const Tensor*> FlowModel::parameters() const {
  std::vector<const Tensor*> out;
  for (const CouplingBlock& b : blocks_) {
    visit_block_params(b, [&](const Tensor& t) { out.push_back(&t); });
  }
  return out;
}

BoundFlow FlowModel::bind(ad::Tape& tape, bool freeze_all) const {
  BoundFlow bound;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const bool frozen = freeze_all || b < frozen_prefix_;
    visit_block_params(blocks_[b], [&](const Tensor& t) {
      ad::Var v = frozen ? tape.constant(t) : tape.parameter(t);
      bound.params.push_back(v);
      if (!frozen) bound.trainable.push_back(v);
    });
  }
  return bound;
}

FlowPass FlowModel::forward(ad::Tape& tape, const BoundFlow& bound, ad::Var x, std::size_t first,
                            std::size_t last) const {
  KLFLOW_REQUIRE(x.cols() == dim(), "flow forward: dimension mismatch");
  last = std::min(last, blocks_.size());
  KLFLOW_REQUIRE(first <= last, "flow forward: bad block range");
  ad::Var y = x;
  ad::Var logdet = tape.constant(x.rows(), 1, 0.0);
  std::size_t off = param_offset(first);
  for (std::size_t b = first; b < last; ++b) {
    const std::size_t n = blocks_[b].parameter_count();
    std::span<const ad::Var> p(bound.params.data() + off, n);
    FlowPass step = with_block_context(b, [&] { return block_forward(tape, blocks_[b], p, y, scale_range_); });
    y = step.out;
    logdet = logdet + step.logdet;
    off += n;
  }
  return {y, logdet};
}

FlowPass FlowModel::inverse(ad::Tape& tape, const BoundFlow& bound, ad::Var y) const {
  KLFLOW_REQUIRE(y.cols() == dim(), "flow inverse: dimension mismatch");
  ad::Var x = y;
  ad::Var logdet = tape.constant(y.rows(), 1, 0.0);
  std::size_t off = param_offset(blocks_.size());
  for (std::size_t b = blocks_.size(); b-- > 0;) {
    const std::size_t n = blocks_[b].parameter_count();
    off -= n;
    std::span<const ad::Var> p(bound.params.data() + off, n);
    FlowPass step = with_block_context(b, [&] { return block_inverse(tape, blocks_[b], p, x, scale_range_); });
    x = step.out;
    logdet = logdet + step.logdet;
  }
  return {x, logdet};
}

namespace {

template <typename PassFn>
Tensor chunked(const FlowModel& flow, const Tensor& in, std::vector<double>* logdet, PassFn pass) {
  KLFLOW_REQUIRE(in.cols() == flow.dim(), "flow evaluation: dimension mismatch");
  Tensor out(in.rows(), in.cols());
  if (logdet != nullptr) logdet->assign(in.rows(), 0.0);
  ad::Tape tape;
  for (std::size_t start = 0; start < in.rows(); start += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, in.rows() - start);
    Tensor chunk(n, in.cols());
    std::copy_n(in.values().begin() + start * in.cols(), n * in.cols(), chunk.values().begin());
    tape.clear();
    BoundFlow bound = flow.bind(tape, true);
    FlowPass r = pass(tape, bound, tape.constant(chunk));
    const Tensor& v = r.out.value();
    std::copy(v.values().begin(), v.values().end(), out.values().begin() + start * in.cols());
    if (logdet != nullptr) {
      const Tensor& ld = r.logdet.value();
      std::copy(ld.values().begin(), ld.values().end(), logdet->begin() + start);
    }
  }
  return out;
}

}  // namespace

Tensor FlowModel::forward(const Tensor& x, std::vector<double>* logdet) const {
  return chunked(*this, x, logdet, [this](ad::Tape& t, const BoundFlow& b, ad::Var v) {
    return forward(t, b, v);
  });
}

Tensor FlowModel::inverse(const Tensor& y, std::vector<double>* logdet_inverse) const {
  return chunked(*this, y, logdet_inverse, [this](ad::Tape& t, const BoundFlow& b, ad::Var v) {
    return inverse(t, b, v);
  });
}

std::vector<double> FlowModel::log_density(const Tensor& theta) const {
  std::vector<double> ld;
  Tensor x = inverse(theta, &ld);
  std::vector<double> out(theta.rows());
  for (std::size_t i = 0; i < theta.rows(); ++i) {
    out[i] = base_.log_density(x.row_span(i)) + ld[i];
    if (!std::isfinite(out[i])) {
      throw DomainError("log_density: non-finite value at point " + std::to_string(i));
    }
  }
  return out;
}

ParticleBatch push_forward(const FlowModel& flow, Tensor base) {
  ParticleBatch batch;
  batch.points = flow.forward(base, &batch.logdet);
  batch.log_density.resize(base.rows());
  for (std::size_t i = 0; i < base.rows(); ++i) {
    batch.log_density[i] = flow.base().log_density(base.row_span(i)) - batch.logdet[i];
  }
  batch.base = std::move(base);
  return batch;
}

ParticleBatch sample(const FlowModel& flow, std::size_t count, Rng& rng) {
  KLFLOW_REQUIRE(count >= 1, "sample: particle count must be >= 1");
  return push_forward(flow, flow.base().sample(count, rng));
}

FlowModel compose(const FlowModel& front, std::vector<CouplingBlock> back) {
  std::vector<CouplingBlock> blocks = front.blocks();
  for (CouplingBlock& b : back) {
    KLFLOW_REQUIRE(b.dim == front.dim(), "compose: dimension mismatch");
    blocks.push_back(std::move(b));
  }
  FlowModel out(front.base(), std::move(blocks), front.scale_range());
  out.freeze_prefix(front.size());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian, header then float64 payload.

namespace {

constexpr char kMagic[8] = {'K', 'L', 'F', 'L', 'O', 'W', 'C', 'K'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                       std::to_string(pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const FlowModel& flow) {
  Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(flow.dim()));
  w.u32(static_cast<std::uint32_t>(flow.size()));
  for (const CouplingBlock& b : flow.blocks()) {
    w.u32(static_cast<std::uint32_t>(b.width()));
    w.u32(static_cast<std::uint32_t>(b.hidden_layers()));
    w.u32(b.parity);
  }
  w.u32(static_cast<std::uint32_t>(flow.frozen_prefix()));
  w.f64(flow.scale_range());
  w.f64(flow.base().variance);
  for (double m : flow.base().mean) w.f64(m);
  for (const Tensor* t : flow.parameters()) {
    for (double v : t->values()) w.f64(v);
  }
  return std::move(w.bytes);
}

FlowModel deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(sizeof(kMagic), "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) {
    throw ParseError("checkpoint has wrong magic bytes");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t dim = r.u32("dimension");
  const std::uint32_t count = r.u32("block count");
  if (dim == 0 || dim > 4096 || count > 100000) throw ParseError("checkpoint header out of range");
  struct Shape {
    std::uint32_t width, hidden, parity;
  };
  std::vector<Shape> shapes(count);
  for (Shape& s : shapes) {
    s.width = r.u32("block width");
    s.hidden = r.u32("hidden layers");
    s.parity = r.u32("parity");
    if (s.width == 0 || s.width > (1u << 16) || s.hidden > 64 || s.parity > 1) {
      throw ParseError("checkpoint block header out of range");
    }
  }
  const std::uint32_t frozen = r.u32("frozen prefix");
  if (frozen > count) throw ParseError("checkpoint frozen prefix exceeds block count");
  const double scale_range = r.f64("scale range");
  BaseDistribution base;
  base.variance = r.f64("base variance");
  base.mean.resize(dim);
  for (double& m : base.mean) m = r.f64("base mean");
  if (!(base.variance > 0.0) || !(scale_range > 0.0)) throw ParseError("checkpoint has invalid base");

  std::vector<CouplingBlock> blocks;
  Rng dummy(0);
  for (const Shape& s : shapes) {
    // Shapes only; every parameter is overwritten from the payload below.
    CouplingBlock b = identity_init(dim, 1, s.width, dummy, s.parity, s.hidden).front();
    blocks.push_back(std::move(b));
  }
  FlowModel flow(std::move(base), std::move(blocks), scale_range);
  flow.freeze_prefix(0);
  for (Tensor* t : flow.trainable_parameters()) {
    for (double& v : t->values()) v = r.f64("parameters");
  }
  if (!r.done()) throw ParseError("checkpoint has trailing bytes");
  flow.freeze_prefix(frozen);
  return flow;
}

void save_checkpoint(const FlowModel& flow, const std::filesystem::path& path) {
  const auto bytes = serialize(flow);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

FlowModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace klflow
