#include <doctest.h>

#include <cmath>

#include "ipf/error.hpp"
#include "ipf/model.hpp"
#include "ipf/nn/gradcheck.hpp"
#include "ipf/random.hpp"

using namespace ipf;
using namespace ipf::nn;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.image_size = 16;
  c.gate_channels = 2;
  c.cnn_channels = {3, 4};
  c.vit = {8, 2, 1, 8};
  c.clinical = {2, 4, 5, 1.3};
  c.fusion_hidden_dim = 6;
  return c;
}

template <typename T>
ModelInput<T> random_input(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  ModelInput<T> in{Tensor<T>({1, c.image_size, c.image_size}),
                   Tensor<T>({1, c.image_size, c.image_size}),
                   Tensor<T>({1, kClinicalFeatures})};
  for (auto& v : in.image.data) v = static_cast<T>(rng.uniform());
  for (auto& v : in.mask.data) v = rng.uniform() < 0.5 ? T{1} : T{0};
  in.clinical.data = {static_cast<T>(0.4), T{1}, T{0}, T{1}};
  return in;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("forward shapes follow the branch switches") {
  for (int bits = 1; bits < 8; ++bits) {
    auto c = tiny();
    c.parallel_branch = bits & 1;
    c.sequential_branch = bits & 2;
    c.clinical_enrichment = bits & 4;
    if (!c.parallel_branch && !c.sequential_branch) continue;
    const HybridModel model(c);
    const auto params = model.init_params<double>(1);
    Tape<double> tape(&params);
    const auto tr = model.forward(tape, random_input<double>(c, 2));
    CAPTURE(bits);
    CHECK(tape.value(tr.gated).shape == Shape{2, 16, 16});
    CHECK(tape.value(tr.fused).shape == Shape{1, c.fusion_input_dim()});
    CHECK(tape.value(tr.output).shape == Shape{1, 1});
    CHECK(tr.local.has_value() == c.parallel_branch);
    CHECK(tr.global.has_value() == c.sequential_branch);
    CHECK(tape.value(tr.clinical).shape == Shape{1, c.clinical_dim()});
    CHECK(tr.attention.size() == (c.sequential_branch ? 2u : 0u));
    CHECK(tr.feature_masks.size() == (c.clinical_enrichment ? 2u : 0u));
    CHECK(params.find("par.conv0.w").has_value() == c.parallel_branch);
    CHECK(params.find("vit.pos").has_value() == c.sequential_branch);
  }
}

TEST_CASE("fusion width adds the enabled branches") {
  auto c = tiny();
  CHECK(c.token_grid() == 4);
  CHECK(c.fusion_input_dim() == 4 + 8 + 5);
  c.clinical_enrichment = false;
  CHECK(c.fusion_input_dim() == 4 + 8 + kClinicalFeatures);
  c.parallel_branch = false;
  CHECK(c.fusion_input_dim() == 8 + kClinicalFeatures);
  c.sequential_branch = false;
  CHECK_THROWS_AS(c.validate(), UsageError);
  auto odd = tiny();
  odd.image_size = 18;
  CHECK_THROWS_AS(odd.validate(), UsageError);
}

TEST_CASE("attention rows and feature masks are distributions") {
  const auto c = tiny();
  const HybridModel model(c);
  const auto params = model.init_params<double>(3);
  Tape<double> tape(&params);
  const auto tr = model.forward(tape, random_input<double>(c, 4));
  for (const auto& a : tr.attention) {
    const auto& t = tape.value(a);
    REQUIRE(t.shape == Shape{16, 16});
    for (std::size_t r = 0; r < 16; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 16; ++k) s += t.data[r * 16 + k];
      CHECK(s == doctest::Approx(1.0));
    }
  }
  for (const auto& m : tr.feature_masks) {
    double s = 0.0;
    for (double v : tape.value(m).data) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0));
  }
}

TEST_CASE("attention has query and value biases only") {
  const auto params = HybridModel(tiny()).init_params<float>(0);
  CHECK(params.value("vit.block0.attn.qkv.w").shape == Shape{8, 24});
  CHECK(params.find("vit.block0.attn.q.b").has_value());
  CHECK(params.find("vit.block0.attn.v.b").has_value());
  CHECK_FALSE(params.find("vit.block0.attn.k.b").has_value());
}

TEST_CASE("initialisation is seeded") {
  const HybridModel model(tiny());
  const auto a = model.init_params<float>(5);
  const auto b = model.init_params<float>(5);
  const auto c = model.init_params<float>(6);
  REQUIRE(a.size() == c.size());
  bool same_ab = true;
  bool same_ac = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same_ab = same_ab && a.value(i).data == b.value(i).data;
    same_ac = same_ac && a.value(i).data == c.value(i).data;
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);
}

TEST_CASE("whole model gradients match finite differences in double") {
  const auto c = tiny();
  const HybridModel model(c);
  auto params = model.init_params<double>(7);
  const auto input = random_input<double>(c, 8);
  const LossBuilder<double> loss = [&](Tape<double>& t) {
    return t.abs(t.add_scalar(model.forward(t, input).output, -0.3));
  };
  GradCheckOptions opts;
  opts.epsilon = 1e-5;
  opts.max_per_param = 6;
  opts.seed = 9;
  const auto r = finite_difference_check(loss, params, opts);
  CAPTURE(r.worst()->param);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("slope predictions are de-standardised") {
  const auto c = tiny();
  const HybridModel model(c);
  const auto params = model.init_params<double>(2);
  const auto input = random_input<double>(c, 3);
  Tape<double> tape(&params);
  const double z = tape.scalar(model.forward(tape, input).output);
  const auto p = predict_slope(model, params, TargetStats{-5.0, 3.0}, input);
  CHECK(p.value == doctest::Approx(-5.0 + 3.0 * z));
}

TEST_CASE("config survives JSON") {
  auto c = tiny();
  c.sequential_branch = false;
  const auto back = ModelConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.cnn_channels == c.cnn_channels);
  CHECK_FALSE(back.sequential_branch);
}

}  // TEST_SUITE
