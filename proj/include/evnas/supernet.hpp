#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "evnas/nn_ops.hpp"
#include "evnas/rng.hpp"
#include "evnas/search_space.hpp"
#include "evnas/tensor.hpp"

namespace evnas {

/// Kaiming-uniform fan-in initialization (ReLU gain).
inline Tensor kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / fan_in);
  for (float& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

// ---------------------------------------------------------------------------
// Candidate operations
// ---------------------------------------------------------------------------

/// One concrete operation on one edge: an operation kind plus its learnable
/// kernels. Channel count is preserved (C -> C); stride 2 halves the spatial
/// size for every kind, including zero (strided zeros) and skip_connect
/// (learnable 1x1 strided projection).
class OpInstance {
 public:
  OpInstance(OpKind kind, int channels, int stride, Rng& rng) : kind_(kind), stride_(stride), channels_(channels) {
    auto dw = [&](int k) { return Param(kaiming_uniform({channels, 1, k, k}, k * k, rng)); };
    auto pw = [&] { return Param(kaiming_uniform({channels, channels, 1, 1}, channels, rng)); };
    switch (kind) {
      case OpKind::sep_conv_3x3:
      case OpKind::sep_conv_5x5: {
        const int k = kind == OpKind::sep_conv_3x3 ? 3 : 5;
        params_.reserve(4);
        params_.push_back(dw(k));
        params_.push_back(pw());
        params_.push_back(dw(k));
        params_.push_back(pw());
        break;
      }
      case OpKind::dil_conv_3x3:
      case OpKind::dil_conv_5x5: {
        const int k = kind == OpKind::dil_conv_3x3 ? 3 : 5;
        params_.reserve(2);
        params_.push_back(dw(k));
        params_.push_back(pw());
        break;
      }
      case OpKind::skip_connect:
        if (stride != 1) params_.push_back(pw());
        break;
      case OpKind::max_pool_3x3:
      case OpKind::avg_pool_3x3:
      case OpKind::zero:
        break;
    }
  }

  OpKind kind() const { return kind_; }
  int stride() const { return stride_; }

  int apply(Tape& t, int x) {
    switch (kind_) {
      case OpKind::sep_conv_3x3:
        return sep(t, x, 3);
      case OpKind::sep_conv_5x5:
        return sep(t, x, 5);
      case OpKind::dil_conv_3x3:
        return dil(t, x, 3);
      case OpKind::dil_conv_5x5:
        return dil(t, x, 5);
      case OpKind::max_pool_3x3:
        return max_pool2d(t, x, 3, stride_, 1);
      case OpKind::avg_pool_3x3:
        return avg_pool2d(t, x, 3, stride_, 1);
      case OpKind::skip_connect:
        if (stride_ == 1) return x;
        return conv2d(t, relu(t, x), params_[0], {stride_, 0, 1, 1});
      case OpKind::zero:
        return strided_zeros(t, x, stride_);
    }
    throw std::logic_error("OpInstance: unknown kind");
  }

  void collect_params(std::vector<Param*>& out) {
    for (Param& p : params_) out.push_back(&p);
  }
  void collect_params(std::vector<const Param*>& out) const {
    for (const Param& p : params_) out.push_back(&p);
  }

 private:
  // Depthwise-then-pointwise, applied twice; the first depthwise carries the
  // stride. ReLU precedes each depthwise stage.
  int sep(Tape& t, int x, int k) {
    const int pad = k / 2;
    int y = conv2d(t, relu(t, x), params_[0], {stride_, pad, 1, channels_});
    y = conv2d(t, y, params_[1], {1, 0, 1, 1});
    y = conv2d(t, relu(t, y), params_[2], {1, pad, 1, channels_});
    return conv2d(t, y, params_[3], {1, 0, 1, 1});
  }

  // Dilated depthwise (dilation 2) then pointwise, applied once.
  int dil(Tape& t, int x, int k) {
    const int pad = k - 1;  // dilation 2 keeps the stride-1 spatial size
    int y = conv2d(t, relu(t, x), params_[0], {stride_, pad, 2, channels_});
    return conv2d(t, y, params_[1], {1, 0, 1, 1});
  }

  OpKind kind_;
  int stride_;
  int channels_;
  std::vector<Param> params_;
};

// ---------------------------------------------------------------------------
// Mixed edge (softmax-weighted mixture of all candidate operations)
// ---------------------------------------------------------------------------

/// Softmax-weighted sum of every candidate operation's output. The softmax is
/// computed here, so callers pass raw parameter rows (alpha or decoded).
template <typename OpRange>
int mixed_edge_forward_with(Tape& t, int x, OpRange&& ops, std::span<const float> weights_row) {
  const size_t count = std::size(ops);
  if (count != weights_row.size())
    throw std::invalid_argument("mixed_edge_forward: weights row length does not match operation count");
  const std::vector<double> w = softmax_row(weights_row);
  std::vector<int> outs;
  outs.reserve(count);
  for (auto&& op : ops) outs.push_back(op(t, x));
  return weighted_sum(t, outs, w);
}

using EdgeOpFn = std::function<int(Tape&, int)>;

inline int mixed_edge_forward(Tape& t, int x, std::span<const EdgeOpFn> ops, std::span<const float> weights_row) {
  return mixed_edge_forward_with(t, x, ops, weights_row);
}

class MixedOp {
 public:
  MixedOp(const OperationSpace& space, int channels, int stride, Rng& rng) {
    ops_.reserve(space.ops.size());
    for (OpKind k : space.ops) ops_.emplace_back(k, channels, stride, rng);
  }

  int apply(Tape& t, int x, std::span<const float> weights_row) {
    auto callables = std::span<OpInstance>(ops_);
    struct Wrap {
      OpInstance* op;
      int operator()(Tape& t, int x) const { return op->apply(t, x); }
    };
    std::vector<Wrap> wraps;
    wraps.reserve(callables.size());
    for (OpInstance& op : callables) wraps.push_back({&op});
    return mixed_edge_forward_with(t, x, wraps, weights_row);
  }

  OpInstance& op(int i) { return ops_[static_cast<size_t>(i)]; }

  void collect_params(std::vector<Param*>& out) {
    for (OpInstance& op : ops_) op.collect_params(out);
  }
  void collect_params(std::vector<const Param*>& out) const {
    for (const OpInstance& op : ops_) op.collect_params(out);
  }

 private:
  std::vector<OpInstance> ops_;
};

// ---------------------------------------------------------------------------
// Cells and the supernet
// ---------------------------------------------------------------------------

namespace detail {

/// ReLU + 1x1 convolution; aligns channel count (and spatial size, via
/// stride 2) of a cell input.
class Preprocess {
 public:
  Preprocess(int in_channels, int out_channels, int stride, Rng& rng)
      : stride_(stride), w_(kaiming_uniform({out_channels, in_channels, 1, 1}, in_channels, rng)) {}

  int apply(Tape& t, int x) { return conv2d(t, relu(t, x), w_, {stride_, 0, 1, 1}); }

  void collect_params(std::vector<Param*>& out) { out.push_back(&w_); }
  void collect_params(std::vector<const Param*>& out) const { out.push_back(&w_); }

 private:
  int stride_;
  Param w_;
};

}  // namespace detail

class Cell {
 public:
  Cell(const CellTopology& topo, const OperationSpace& space, int c_prev_prev, int c_prev, int channels,
       bool reduction, bool prev_reduction, Rng& rng)
      : topo_(topo),
        reduction_(reduction),
        pre0_(c_prev_prev, channels, prev_reduction ? 2 : 1, rng),
        pre1_(c_prev, channels, 1, rng) {
    edges_.reserve(topo.num_edges());
    for (const Edge& e : topo.edges) {
      const int stride = (reduction && e.src < topo.num_input_nodes) ? 2 : 1;
      edges_.emplace_back(space, channels, stride, rng);
    }
  }

  bool reduction() const { return reduction_; }

  /// s0/s1 are the two previous cell outputs. Node t sums its incoming mixed
  /// edges; the cell output concatenates all intermediate nodes on channels.
  int apply(Tape& t, int s0, int s1, const Matrix& cell_params) {
    if (cell_params.rows != topo_.num_edges())
      throw std::invalid_argument("cell forward: parameter matrix row count does not match edge count");
    std::vector<int> nodes = {pre0_.apply(t, s0), pre1_.apply(t, s1)};
    for (int node = 0; node < topo_.num_intermediate_nodes; ++node) {
      const auto [first, count] = topo_.candidate_range(node);
      int acc = -1;
      for (int e = first; e < first + count; ++e) {
        const int msg = edges_[e].apply(t, nodes[topo_.edges[e].src], cell_params.row(e));
        acc = (acc < 0) ? msg : add(t, acc, msg);
      }
      nodes.push_back(acc);
    }
    const std::vector<int> intermediates(nodes.begin() + topo_.num_input_nodes, nodes.end());
    return concat_channels(t, intermediates);
  }

  MixedOp& edge(int i) { return edges_[static_cast<size_t>(i)]; }

  void collect_params(std::vector<Param*>& out) {
    pre0_.collect_params(out);
    pre1_.collect_params(out);
    for (MixedOp& e : edges_) e.collect_params(out);
  }
  void collect_params(std::vector<const Param*>& out) const {
    pre0_.collect_params(out);
    pre1_.collect_params(out);
    for (const MixedOp& e : edges_) e.collect_params(out);
  }

 private:
  CellTopology topo_;
  bool reduction_;
  detail::Preprocess pre0_;
  detail::Preprocess pre1_;
  std::vector<MixedOp> edges_;
};

struct SupernetConfig {
  int cells = 4;
  int init_channels = 8;
  int input_channels = 1;
  int input_hw = 16;
  int num_classes = 4;
  CellTopology topology = CellTopology::make();
  OperationSpace ops = OperationSpace::canonical();

  /// Reduction cells sit at floor(L/3) and floor(2L/3).
  std::vector<int> reduction_positions() const {
    std::vector<int> pos;
    for (int p : {cells / 3, 2 * cells / 3})
      if (pos.empty() || pos.back() != p) pos.push_back(p);
    return pos;
  }

  bool is_reduction(int cell_index) const {
    for (int p : reduction_positions())
      if (p == cell_index) return true;
    return false;
  }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'E', 'V', 'N', 'S'};

/// The one-shot model: stem convolution, stacked cells whose edges all
/// evaluate the full operation mixture, and a global-pool + linear head.
/// All individuals share this single weight set.
class Supernet {
 public:
  Supernet(SupernetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.ops.validate();
    stem_ = Param(kaiming_uniform({cfg_.init_channels, cfg_.input_channels, 3, 3}, cfg_.input_channels * 9, rng));
    int c_prev_prev = cfg_.init_channels, c_prev = cfg_.init_channels, channels = cfg_.init_channels;
    bool prev_reduction = false;
    cells_.reserve(cfg_.cells);
    for (int i = 0; i < cfg_.cells; ++i) {
      const bool reduction = cfg_.is_reduction(i);
      if (reduction) channels *= 2;
      cells_.emplace_back(cfg_.topology, cfg_.ops, c_prev_prev, c_prev, channels, reduction, prev_reduction, rng);
      c_prev_prev = c_prev;
      c_prev = channels * cfg_.topology.num_intermediate_nodes;
      prev_reduction = reduction;
    }
    classifier_w_ = Param(kaiming_uniform({cfg_.num_classes, c_prev}, c_prev, rng));
    classifier_b_ = Param(Tensor({cfg_.num_classes}));  // zero bias
  }

  const SupernetConfig& config() const { return cfg_; }

  /// Inference-only forward; no gradients are recorded.
  Tensor forward(const Tensor& batch, const CellParams& params) {
    Tape t(false);
    return t.value(build_forward(t, batch, params));
  }

  /// Recorded forward for training; returns the logits node id on the
  /// internal tape.
  int forward_train(const Tensor& batch, const CellParams& params) {
    tape_.clear();
    tape_ = Tape(true);
    return build_forward(tape_, batch, params);
  }

  Tape& tape() { return tape_; }

  /// Reverse pass from a scalar loss node on the internal tape; accumulates
  /// into parameter gradients.
  void backward(int loss_id) { tape_.backward(loss_id); }

  void clear_tape() { tape_.clear(); }

  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    out.push_back(&stem_);
    for (Cell& c : cells_) c.collect_params(out);
    out.push_back(&classifier_w_);
    out.push_back(&classifier_b_);
    return out;
  }

  std::vector<const Param*> parameters() const {
    std::vector<const Param*> out;
    out.push_back(&stem_);
    for (const Cell& c : cells_) c.collect_params(out);
    out.push_back(&classifier_w_);
    out.push_back(&classifier_b_);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Param* p : parameters()) n += p->value.numel();
    return n;
  }

  Cell& cell(int i) { return cells_[static_cast<size_t>(i)]; }
  Param& classifier_weight() { return classifier_w_; }
  Param& classifier_bias() { return classifier_b_; }

  // -- checkpoint io --------------------------------------------------------

  void save(std::ostream& os) const {
    os.write(kCheckpointMagic, 4);
    write_u32(os, kCheckpointVersion);
    nlohmann::json meta;
    meta["cells"] = cfg_.cells;
    meta["init_channels"] = cfg_.init_channels;
    meta["input_channels"] = cfg_.input_channels;
    meta["input_hw"] = cfg_.input_hw;
    meta["num_classes"] = cfg_.num_classes;
    meta["topology"] = {{"inputs", cfg_.topology.num_input_nodes},
                        {"intermediates", cfg_.topology.num_intermediate_nodes}};
    nlohmann::json ops = nlohmann::json::array();
    for (OpKind k : cfg_.ops.ops) ops.push_back(op_name(k));
    meta["ops"] = ops;
    const auto params = parameters();
    nlohmann::json sizes = nlohmann::json::array();
    for (const Param* p : params) sizes.push_back(p->value.numel());
    meta["param_sizes"] = sizes;
    const std::string meta_str = meta.dump();
    write_u32(os, static_cast<std::uint32_t>(meta_str.size()));
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    for (const Param* p : params)
      for (float v : p->value.data) write_f32(os, v);
    if (!os) throw std::runtime_error("checkpoint save: write failed");
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint save: cannot open " + path.string());
    save(os);
  }

  static Supernet load(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kCheckpointMagic, 4))
      throw std::runtime_error("checkpoint load: magic mismatch, not a supernet checkpoint");
    const std::uint32_t version = read_u32(is, "version");
    if (version != kCheckpointVersion)
      throw std::runtime_error("checkpoint load: unsupported version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
    const std::uint32_t meta_len = read_u32(is, "metadata length");
    std::string meta_str(meta_len, '\0');
    if (!is.read(meta_str.data(), meta_len)) throw std::runtime_error("checkpoint load: truncated metadata block");
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(std::string("checkpoint load: bad metadata: ") + e.what());
    }
    SupernetConfig cfg;
    cfg.cells = meta.at("cells").get<int>();
    cfg.init_channels = meta.at("init_channels").get<int>();
    cfg.input_channels = meta.at("input_channels").get<int>();
    cfg.input_hw = meta.at("input_hw").get<int>();
    cfg.num_classes = meta.at("num_classes").get<int>();
    cfg.topology = CellTopology::make(meta.at("topology").at("inputs").get<int>(),
                                      meta.at("topology").at("intermediates").get<int>());
    cfg.ops.ops.clear();
    for (const auto& name : meta.at("ops")) cfg.ops.ops.push_back(op_from_name(name.get<std::string>()));

    Rng dummy(0);
    Supernet net(cfg, dummy);
    const auto params = net.parameters();
    const auto& sizes = meta.at("param_sizes");
    if (sizes.size() != params.size())
      throw std::runtime_error("checkpoint load: parameter table size mismatch (metadata " +
                               std::to_string(sizes.size()) + ", model " + std::to_string(params.size()) + ")");
    for (size_t i = 0; i < params.size(); ++i) {
      if (sizes[i].get<size_t>() != params[i]->value.numel())
        throw std::runtime_error("checkpoint load: parameter " + std::to_string(i) +
                                 " shape mismatch between metadata and model");
      for (float& v : params[i]->value.data) v = read_f32(is);
      if (!is)
        throw std::runtime_error("checkpoint load: truncated weight data at parameter " + std::to_string(i) +
                                 " (expected " + std::to_string(params[i]->value.numel() * 4) + " more bytes)");
    }
    is.peek();
    if (!is.eof()) throw std::runtime_error("checkpoint load: trailing bytes after weight data");
    return net;
  }

  static Supernet load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint load: cannot open " + path.string());
    return load(is);
  }

 private:
  int build_forward(Tape& t, const Tensor& batch, const CellParams& params) {
    if (batch.shape.size() != 4 || batch.dim(1) != cfg_.input_channels || batch.dim(2) != cfg_.input_hw ||
        batch.dim(3) != cfg_.input_hw)
      throw std::invalid_argument("supernet forward: batch shape " + Tensor::shape_str(batch.shape) +
                                  " does not match configured input (N," + std::to_string(cfg_.input_channels) + "," +
                                  std::to_string(cfg_.input_hw) + "," + std::to_string(cfg_.input_hw) + ")");
    if (!params.normal || !params.reduce) throw std::invalid_argument("supernet forward: null parameter matrices");
    const int expected_cols = cfg_.ops.size();
    for (const Matrix* m : {params.normal, params.reduce})
      if (m->rows != cfg_.topology.num_edges() || m->cols != expected_cols)
        throw std::invalid_argument("supernet forward: parameter matrix shape mismatch");

    const int x = input(t, batch);
    const int stem_out = conv2d(t, x, stem_, {1, 1, 1, 1});
    int s0 = stem_out, s1 = stem_out;
    for (Cell& cell : cells_) {
      const int next = cell.apply(t, s0, s1, cell.reduction() ? *params.reduce : *params.normal);
      s0 = s1;
      s1 = next;
    }
    const int pooled = global_avg_pool(t, s1);
    const int logits = linear(t, pooled, classifier_w_, classifier_b_);
    if (!t.value(logits).all_finite()) throw std::runtime_error("supernet forward: non-finite activation in logits");
    return logits;
  }

  static void write_u32(std::ostream& os, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                           static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(bytes, 4);
  }

  static std::uint32_t read_u32(std::istream& is, const char* what) {
    unsigned char bytes[4];
    if (!is.read(reinterpret_cast<char*>(bytes), 4))
      throw std::runtime_error(std::string("checkpoint load: truncated ") + what);
    return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
           (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
  }

  static void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

  static float read_f32(std::istream& is) {
    unsigned char bytes[4];
    is.read(reinterpret_cast<char*>(bytes), 4);
    const std::uint32_t u = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                            (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
    return std::bit_cast<float>(u);
  }

  SupernetConfig cfg_;
  Param stem_;
  std::vector<Cell> cells_;
  Param classifier_w_;
  Param classifier_b_;
  Tape tape_{true};
};

}  // namespace evnas
