#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "evnas/supernet.hpp"
#include "gradcheck.hpp"

using namespace evnas;

namespace {

SupernetConfig tiny_config(int cells = 2, int channels = 4, int hw = 8, int classes = 3) {
  SupernetConfig cfg;
  cfg.cells = cells;
  cfg.init_channels = channels;
  cfg.input_channels = 1;
  cfg.input_hw = hw;
  cfg.num_classes = classes;
  return cfg;
}

ArchParam random_alpha(const SupernetConfig& cfg, Rng& rng) {
  return init_arch_param(cfg.topology, cfg.ops, rng);
}

}  // namespace

TEST_CASE("mixed edge saturates to the dominant operation") {
  Rng rng(3);
  Tape t(false);
  Param w1(gradcheck::random_tensor({2, 2, 1, 1}, rng, -0.5, 0.5));
  Param w2(gradcheck::random_tensor({2, 2, 1, 1}, rng, -0.5, 0.5));
  const std::vector<EdgeOpFn> ops = {
      [&](Tape& tp, int x) { return conv2d(tp, x, w1, {1, 0, 1, 1}); },
      [&](Tape& tp, int x) { return conv2d(tp, x, w2, {1, 0, 1, 1}); },
  };
  const int x = input(t, gradcheck::random_tensor({1, 2, 4, 4}, rng));
  const std::vector<float> row = {50.0f, 0.0f};
  const int mixed = mixed_edge_forward(t, x, ops, row);
  const int direct = conv2d(t, x, w1, {1, 0, 1, 1});
  const Tensor& a = t.value(mixed);
  const Tensor& b = t.value(direct);
  for (size_t i = 0; i < a.data.size(); ++i)
    CHECK(std::abs(a.data[i] - b.data[i]) <= 1e-4 * std::max(1e-6f, std::abs(b.data[i])));
}

TEST_CASE("mixed edge over identity stubs returns the input") {
  Tape t(false);
  Rng rng(5);
  const int x = input(t, gradcheck::random_tensor({1, 2, 3, 3}, rng));
  const std::vector<EdgeOpFn> ops(4, [](Tape&, int v) { return v; });
  const std::vector<float> row = {0.3f, -1.2f, 2.0f, 0.0f};
  const int mixed = mixed_edge_forward(t, x, ops, row);
  for (size_t i = 0; i < t.value(x).data.size(); ++i)
    CHECK(t.value(mixed).data[i] == doctest::Approx(t.value(x).data[i]).epsilon(1e-6));
}

TEST_CASE("mixed edge with equal weights averages constant stubs: (1+2+4)/3") {
  Tape t(false);
  const int x = input(t, Tensor({1}, 0.0f));
  auto constant = [](float c) {
    return EdgeOpFn([c](Tape& tp, int) { return input(tp, Tensor({1}, c)); });
  };
  const std::vector<EdgeOpFn> ops = {constant(1.0f), constant(2.0f), constant(4.0f)};
  const std::vector<float> row = {0.0f, 0.0f, 0.0f};
  const int mixed = mixed_edge_forward(t, x, ops, row);
  CHECK(t.value(mixed).data[0] == doctest::Approx(7.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("mixed edge output stays in the convex hull of op outputs") {
  Tape t(false);
  Rng rng(17);
  const int x = input(t, Tensor({1}, 0.0f));
  std::vector<float> consts = {-2.0f, 0.5f, 3.0f, 7.0f};
  std::vector<EdgeOpFn> ops;
  for (float c : consts) ops.push_back([c](Tape& tp, int) { return input(tp, Tensor({1}, c)); });
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> row(4);
    for (float& v : row) v = static_cast<float>(rng.uniform(-4.0, 4.0));
    const float out = t.value(mixed_edge_forward(t, x, ops, row)).data[0];
    CHECK(out >= -2.0f - 1e-5f);
    CHECK(out <= 7.0f + 1e-5f);
  }
}

TEST_CASE("mixed edge rejects a weights row of the wrong length") {
  Tape t(false);
  const int x = input(t, Tensor({1}, 0.0f));
  const std::vector<EdgeOpFn> ops = {[](Tape&, int v) { return v; }};
  const std::vector<float> row = {1.0f, 2.0f};
  CHECK_THROWS_AS(mixed_edge_forward(t, x, ops, row), std::invalid_argument);
}

TEST_CASE("decoded row softmax weights: e/(e+7) selected, 1/(e+7) elsewhere") {
  std::vector<float> row(8, 0.0f);
  row[3] = 1.0f;  // k = 1
  const auto w = softmax_row(row);
  const double e = std::numbers::e;
  for (int i = 0; i < 8; ++i) {
    const double expected = i == 3 ? e / (e + 7.0) : 1.0 / (e + 7.0);
    CHECK(std::abs(w[static_cast<size_t>(i)] - expected) < 1e-6);
  }
  CHECK(std::abs(e / (e + 7.0) - 0.27971) < 5e-6);
  CHECK(std::abs(1.0 / (e + 7.0) - 0.10290) < 5e-6);
}

TEST_CASE("supernet forward: hand-traced shapes for a 2-cell 4-channel net on 8x8") {
  // Trace: stem 1->4ch @8x8; both cells are reduction cells (floor(2/3)=0,
  // floor(4/3)=1). Cell 0: C=8, out (32,4,4). Cell 1: C=16, out (64,2,2).
  // Classifier input is therefore 64 features.
  auto cfg = tiny_config(2, 4, 8, 3);
  CHECK(cfg.reduction_positions() == std::vector<int>{0, 1});
  Rng rng(1);
  Supernet net(cfg, rng);
  CHECK(net.classifier_weight().value.shape == std::vector<int>{3, 64});

  const ArchParam alpha = random_alpha(cfg, rng);
  const Tensor batch = gradcheck::random_tensor({5, 1, 8, 8}, rng, 0.0, 1.0);
  const Tensor logits = net.forward(batch, view(alpha));
  CHECK(logits.shape == std::vector<int>{5, 3});

  // Odd input sizes reduce 9 -> 5 -> 3; every op shares the ceil(H/2)
  // convention, so the mixture stays consistent.
  auto odd_cfg = tiny_config(2, 4, 9, 3);
  Supernet odd_net(odd_cfg, rng);
  const ArchParam odd_alpha = random_alpha(odd_cfg, rng);
  const Tensor odd_logits = odd_net.forward(gradcheck::random_tensor({2, 1, 9, 9}, rng, 0.0, 1.0), view(odd_alpha));
  CHECK(odd_logits.shape == std::vector<int>{2, 3});
  CHECK(odd_logits.all_finite());
}

TEST_CASE("supernet forward: zero batch gives finite logits; bad shapes rejected") {
  auto cfg = tiny_config();
  Rng rng(2);
  Supernet net(cfg, rng);
  const ArchParam alpha = random_alpha(cfg, rng);
  const Tensor zeros({2, 1, 8, 8});
  CHECK(net.forward(zeros, view(alpha)).all_finite());

  CHECK_THROWS_AS(net.forward(Tensor({2, 1, 9, 9}), view(alpha)), std::invalid_argument);
  CHECK_THROWS_AS(net.forward(Tensor({2, 3, 8, 8}), view(alpha)), std::invalid_argument);
  ArchParam bad = alpha;
  bad.normal = Matrix(13, 8);
  CHECK_THROWS_AS(net.forward(zeros, view(bad)), std::invalid_argument);
}

TEST_CASE("forward under raw alpha vs decoded alpha: same shape, different values") {
  auto cfg = tiny_config();
  Rng rng(4);
  Supernet net(cfg, rng);
  const ArchParam alpha = random_alpha(cfg, rng);
  const DecodedParam decoded = decode(alpha, 1.0f, cfg.topology, cfg.ops);
  const Tensor batch = gradcheck::random_tensor({3, 1, 8, 8}, rng, 0.0, 1.0);
  const Tensor a = net.forward(batch, view(alpha));
  const Tensor b = net.forward(batch, view(decoded));
  CHECK(a.shape == b.shape);
  bool any_diff = false;
  for (size_t i = 0; i < a.data.size(); ++i) any_diff |= (a.data[i] != b.data[i]);
  CHECK(any_diff);
}

TEST_CASE("weight sharing: parameter storage is independent of the evaluated alpha") {
  auto cfg = tiny_config();
  Rng rng(6);
  Supernet net(cfg, rng);
  const auto before = net.parameters();
  const size_t count_before = net.param_count();
  const Tensor batch = gradcheck::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
  for (int i = 0; i < 3; ++i) {
    const ArchParam alpha = random_alpha(cfg, rng);
    net.forward(batch, view(alpha));
  }
  const auto after = net.parameters();
  CHECK(before == after);  // same Param addresses in the same order
  CHECK(net.param_count() == count_before);
}

TEST_CASE("supernet backward: tape lifecycle and gradient doubling") {
  auto cfg = tiny_config(1, 4, 8, 3);
  Rng rng(8);
  Supernet net(cfg, rng);
  CHECK_THROWS_AS(net.backward(0), std::logic_error);  // no recorded forward

  const ArchParam alpha = random_alpha(cfg, rng);
  const Tensor batch = gradcheck::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
  const int logits = net.forward_train(batch, view(alpha));
  const int loss = softmax_cross_entropy(net.tape(), logits, {0, 1});
  net.backward(loss);
  Param& w = net.classifier_weight();
  const std::vector<float> once = w.grad.data;
  bool any_nonzero = false;
  for (float g : once) any_nonzero |= (g != 0.0f);
  CHECK(any_nonzero);
  net.backward(loss);
  for (size_t i = 0; i < once.size(); ++i) CHECK(w.grad.data[i] == doctest::Approx(2.0f * once[i]));

  net.clear_tape();
  CHECK_THROWS_AS(net.backward(loss), std::logic_error);
}

TEST_CASE("every learnable parameter receives a gradient after one step") {
  auto cfg = tiny_config(2, 4, 8, 3);
  Rng rng(9);
  Supernet net(cfg, rng);
  const ArchParam alpha = random_alpha(cfg, rng);
  const Tensor batch = gradcheck::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
  const int logits = net.forward_train(batch, view(alpha));
  const int loss = softmax_cross_entropy(net.tape(), logits, {0, 2});
  net.backward(loss);
  for (const Param* p : net.parameters()) CHECK(p->grad_live);
}

TEST_CASE("selected-op parameters receive systematically larger gradients under decode") {
  auto cfg = tiny_config(1, 4, 8, 3);
  Rng rng(10);
  Supernet net(cfg, rng);

  // Force a genotype whose selected operations are all sep_conv_3x3 (column 0).
  ArchParam alpha{Matrix(14, 8), Matrix(14, 8)};
  for (Matrix* m : {&alpha.normal, &alpha.reduce})
    for (int r = 0; r < 14; ++r) m->at(r, 0) = 10.0f;
  const DecodedParam decoded = decode(alpha, 1.0f, cfg.topology, cfg.ops);

  const Tensor batch = gradcheck::random_tensor({8, 1, 8, 8}, rng, 0.0, 1.0);
  const int logits = net.forward_train(batch, view(decoded));
  const int loss = softmax_cross_entropy(net.tape(), logits, {0, 1, 2, 0, 1, 2, 0, 1});
  net.backward(loss);

  // Selected rows carry k=1 on sep_conv_3x3: weight e/(e+7) vs 1/(e+7) for
  // the non-selected conv ops on the same edges.
  const Genotype g = derive_genotype(alpha, cfg.topology, cfg.ops);
  double sel_sum = 0.0, other_sum = 0.0;
  long sel_n = 0, other_n = 0;
  auto accumulate = [&](OpInstance& op, bool selected) {
    std::vector<Param*> params;
    op.collect_params(params);
    for (const Param* p : params)
      for (float v : p->grad.data) {
        if (selected) {
          sel_sum += std::abs(v);
          ++sel_n;
        } else {
          other_sum += std::abs(v);
          ++other_n;
        }
      }
  };
  Cell& cell = net.cell(0);
  const auto& cell_choices = cell.reduction() ? g.reduce : g.normal;
  for (int node = 0; node < 4; ++node)
    for (const auto& choice : cell_choices[node]) {
      const int e = cfg.topology.edge_index(choice.pred, node);
      for (int c = 0; c < 8; ++c) {
        const OpKind kind = cfg.ops.ops[static_cast<size_t>(c)];
        if (kind == OpKind::max_pool_3x3 || kind == OpKind::avg_pool_3x3 || kind == OpKind::zero ||
            kind == OpKind::skip_connect)
          continue;
        accumulate(cell.edge(e).op(c), kind == choice.op);
      }
    }
  REQUIRE(sel_n > 0);
  REQUIRE(other_n > 0);
  const double ratio = (sel_sum / sel_n) / (other_sum / other_n);
  CHECK(ratio > 1.2);
}

TEST_CASE("single-op networks pass gradient checks for every operation kind") {
  Rng rng(12);
  const int channels = 4;
  for (OpKind kind :
       {OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3, OpKind::dil_conv_5x5, OpKind::max_pool_3x3,
        OpKind::avg_pool_3x3, OpKind::skip_connect, OpKind::zero}) {
    for (int stride : {1, 2}) {
      OpInstance op(kind, channels, stride, rng);
      std::vector<Param*> params;
      op.collect_params(params);
      auto build = [&](Tape& t, int x) { return op.apply(t, x); };
      const auto r = gradcheck::run(build, gradcheck::random_tensor({2, channels, 6, 6}, rng), params, rng,
                                    params.empty() ? 20 : 10, true);
      INFO("kind ", op_name(kind), " stride ", stride);
      CHECK(r.max_rel_err < 1e-3);
    }
  }
}

TEST_CASE("checkpoint round-trip: bitwise-identical forward, magic header") {
  auto cfg = tiny_config();
  Rng rng(13);
  Supernet net(cfg, rng);
  const ArchParam alpha = random_alpha(cfg, rng);
  const Tensor batch = gradcheck::random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
  const Tensor before = net.forward(batch, view(alpha));

  std::stringstream buf;
  net.save(buf);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "EVNS");
  const std::uint32_t version = static_cast<unsigned char>(bytes[4]) | (static_cast<unsigned char>(bytes[5]) << 8) |
                                (static_cast<unsigned char>(bytes[6]) << 16) |
                                (static_cast<unsigned char>(bytes[7]) << 24);
  CHECK(version == kCheckpointVersion);

  std::stringstream in(bytes);
  Supernet loaded = Supernet::load(in);
  const Tensor after = loaded.forward(batch, view(alpha));
  CHECK(before.data == after.data);
}

TEST_CASE("checkpoint load failure modes") {
  auto cfg = tiny_config();
  Rng rng(14);
  Supernet net(cfg, rng);
  std::stringstream buf;
  net.save(buf);
  const std::string bytes = buf.str();

  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    std::stringstream in(bad);
    CHECK_THROWS_WITH_AS(Supernet::load(in), doctest::Contains("magic"), std::runtime_error);
  }
  SUBCASE("bad version") {
    std::string bad = bytes;
    bad[4] = 42;
    std::stringstream in(bad);
    CHECK_THROWS_WITH_AS(Supernet::load(in), doctest::Contains("version"), std::runtime_error);
  }
  SUBCASE("truncated weights") {
    std::stringstream in(bytes.substr(0, bytes.size() - 100));
    CHECK_THROWS_WITH_AS(Supernet::load(in), doctest::Contains("truncated"), std::runtime_error);
  }
  SUBCASE("trailing junk") {
    std::stringstream in(bytes + "junk");
    CHECK_THROWS_WITH_AS(Supernet::load(in), doctest::Contains("trailing"), std::runtime_error);
  }
  SUBCASE("tampered channel metadata yields an explicit shape error") {
    // Rewrite the metadata block with a different channel count.
    const std::uint32_t meta_len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8) |
                                   (static_cast<unsigned char>(bytes[10]) << 16) |
                                   (static_cast<unsigned char>(bytes[11]) << 24);
    std::string meta = bytes.substr(12, meta_len);
    const auto pos = meta.find("\"init_channels\":4");
    REQUIRE(pos != std::string::npos);
    meta.replace(pos, 17, "\"init_channels\":8");
    std::string bad = bytes.substr(0, 8);
    const std::uint32_t new_len = static_cast<std::uint32_t>(meta.size());
    for (int i = 0; i < 4; ++i) bad.push_back(static_cast<char>((new_len >> (8 * i)) & 0xff));
    bad += meta + bytes.substr(12 + meta_len);
    std::stringstream in(bad);
    CHECK_THROWS_WITH_AS(Supernet::load(in), doctest::Contains("shape mismatch"), std::runtime_error);
  }
}
