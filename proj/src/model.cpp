#include "ipf/model.hpp"

#include <cmath>
#include <string>

#include "ipf/error.hpp"
#include "ipf/random.hpp"

namespace ipf {

using nn::ParamStore;
using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void ModelConfig::validate() const {
  if (image_size == 0 || gate_channels == 0) throw UsageError("model: zero image size or gate width");
  if (cnn_channels.empty()) throw UsageError("model: need at least one CNN stage");
  const std::size_t down = std::size_t{1} << cnn_channels.size();
  if (image_size % down != 0) {
    throw UsageError("model: image_size " + std::to_string(image_size) +
                     " not divisible by CNN downsampling " + std::to_string(down));
  }
  if (vit.heads == 0 || vit.embed_dim % vit.heads != 0) {
    throw UsageError("model: embed_dim must be divisible by heads");
  }
  if (vit.depth == 0 || vit.mlp_dim == 0) throw UsageError("model: empty transformer");
  if (clinical.steps == 0 || clinical.hidden_dim == 0 || clinical.out_dim == 0) {
    throw UsageError("model: empty clinical encoder");
  }
  if (fusion_hidden_dim == 0) throw UsageError("model: zero fusion width");
  if (!parallel_branch && !sequential_branch) {
    throw UsageError("model: at least one image branch must be enabled");
  }
}

std::size_t ModelConfig::token_grid() const { return image_size >> cnn_channels.size(); }

nlohmann::json ModelConfig::to_json() const {
  return {{"image_size", image_size},
          {"gate_channels", gate_channels},
          {"cnn_channels", cnn_channels},
          {"vit",
           {{"embed_dim", vit.embed_dim},
            {"heads", vit.heads},
            {"depth", vit.depth},
            {"mlp_dim", vit.mlp_dim},
            {"tokens_grid", token_grid()}}},
          {"clinical",
           {{"steps", clinical.steps},
            {"hidden_dim", clinical.hidden_dim},
            {"out_dim", clinical.out_dim},
            {"relaxation", clinical.relaxation}}},
          {"fusion_hidden_dim", fusion_hidden_dim},
          {"parallel_branch", parallel_branch},
          {"sequential_branch", sequential_branch},
          {"clinical_enrichment", clinical_enrichment}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.gate_channels = j.value("gate_channels", c.gate_channels);
  c.cnn_channels = j.value("cnn_channels", c.cnn_channels);
  if (j.contains("vit")) {
    const auto& v = j["vit"];
    c.vit.embed_dim = v.value("embed_dim", c.vit.embed_dim);
    c.vit.heads = v.value("heads", c.vit.heads);
    c.vit.depth = v.value("depth", c.vit.depth);
    c.vit.mlp_dim = v.value("mlp_dim", c.vit.mlp_dim);
  }
  if (j.contains("clinical")) {
    const auto& v = j["clinical"];
    c.clinical.steps = v.value("steps", c.clinical.steps);
    c.clinical.hidden_dim = v.value("hidden_dim", c.clinical.hidden_dim);
    c.clinical.out_dim = v.value("out_dim", c.clinical.out_dim);
    c.clinical.relaxation = v.value("relaxation", c.clinical.relaxation);
  }
  c.fusion_hidden_dim = j.value("fusion_hidden_dim", c.fusion_hidden_dim);
  c.parallel_branch = j.value("parallel_branch", c.parallel_branch);
  c.sequential_branch = j.value("sequential_branch", c.sequential_branch);
  c.clinical_enrichment = j.value("clinical_enrichment", c.clinical_enrichment);
  c.validate();
  return c;
}

HybridModel::HybridModel(ModelConfig config) : config_(std::move(config)) { config_.validate(); }

namespace {

template <typename T>
class Initializer {
 public:
  Initializer(ParamStore<T>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void normal(const std::string& name, Shape shape, double sd) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng_.normal(0.0, sd));
    store_.add(name, std::move(t));
  }
  void fill(const std::string& name, Shape shape, double value) {
    store_.add(name, Tensor<T>(std::move(shape), static_cast<T>(value)));
  }
  void conv(const std::string& prefix, std::size_t out, std::size_t in, std::size_t k) {
    normal(prefix + ".w", {out, in, k, k}, std::sqrt(2.0 / static_cast<double>(in * k * k)));
    fill(prefix + ".b", {out}, 0.0);
  }
  void linear(const std::string& prefix, std::size_t in, std::size_t out) {
    normal(prefix + ".w", {in, out}, std::sqrt(1.0 / static_cast<double>(in)));
    fill(prefix + ".b", {out}, 0.0);
  }
  void norm(const std::string& prefix, std::size_t dim) {
    fill(prefix + ".g", {dim}, 1.0);
    fill(prefix + ".b", {dim}, 0.0);
  }
  void glu(const std::string& prefix, std::size_t in, std::size_t out) {
    linear(prefix + ".value", in, out);
    linear(prefix + ".gate", in, out);
  }

 private:
  ParamStore<T>& store_;
  Rng rng_;
};

std::string stage(const char* prefix, std::size_t i) {
  return std::string(prefix) + ".conv" + std::to_string(i);
}

template <typename T>
Var linear(Tape<T>& tape, Var x, const std::string& prefix) {
  return tape.linear(x, tape.param(prefix + ".w"), tape.param(prefix + ".b"));
}

template <typename T>
Var glu(Tape<T>& tape, Var x, const std::string& prefix) {
  return tape.mul(linear(tape, x, prefix + ".value"), tape.sigmoid(linear(tape, x, prefix + ".gate")));
}

}  // namespace

template <typename T>
ParamStore<T> HybridModel::init_params(std::uint64_t seed) const {
  const auto& c = config_;
  ParamStore<T> store;
  Initializer<T> init(store, seed);

  init.conv("gate.img", c.gate_channels, 1, 3);
  init.conv("gate.mask", c.gate_channels, 1, 3);

  for (const char* branch : {"par", "seq"}) {
    const bool enabled = std::string(branch) == "par" ? c.parallel_branch : c.sequential_branch;
    if (!enabled) continue;
    std::size_t in = c.gate_channels;
    for (std::size_t i = 0; i < c.cnn_channels.size(); ++i) {
      init.conv(stage(branch, i), c.cnn_channels[i], in, 3);
      in = c.cnn_channels[i];
    }
  }

  if (c.sequential_branch) {
    const std::size_t E = c.vit.embed_dim;
    init.linear("vit.patch", c.cnn_channels.back(), E);
    init.normal("vit.pos", {c.token_count(), E}, 0.02);
    for (std::size_t d = 0; d < c.vit.depth; ++d) {
      const std::string b = "vit.block" + std::to_string(d);
      init.norm(b + ".ln1", E);
      // No key bias.
      init.normal(b + ".attn.qkv.w", {E, 3 * E}, std::sqrt(1.0 / static_cast<double>(E)));
      init.fill(b + ".attn.q.b", {E}, 0.0);
      init.fill(b + ".attn.v.b", {E}, 0.0);
      init.linear(b + ".attn.proj", E, E);
      init.norm(b + ".ln2", E);
      init.linear(b + ".mlp.fc1", E, c.vit.mlp_dim);
      init.linear(b + ".mlp.fc2", c.vit.mlp_dim, E);
    }
    init.norm("vit.ln", E);
  }

  if (c.clinical_enrichment) {
    const auto& k = c.clinical;
    init.glu("clin.initial", kClinicalFeatures, k.hidden_dim);
    for (std::size_t s = 0; s < k.steps; ++s) {
      const std::string p = "clin.step" + std::to_string(s);
      init.linear(p + ".att", k.hidden_dim, kClinicalFeatures);
      init.glu(p + ".ft", kClinicalFeatures, k.hidden_dim);
      init.linear(p + ".dec", k.hidden_dim, k.out_dim);
    }
  }

  init.linear("fuse.fc1", c.fusion_input_dim(), c.fusion_hidden_dim);
  init.linear("fuse.fc2", c.fusion_hidden_dim, 1);
  return store;
}

template <typename T>
Var HybridModel::context_gate(Tape<T>& tape, Var image, Var mask) const {
  const auto& is = tape.value(image).shape;
  if (is != tape.value(mask).shape) throw ShapeError("context_gate: image/mask shape mismatch");
  const Shape expected{1, config_.image_size, config_.image_size};
  if (is != expected) {
    throw ShapeError("context_gate: expected input " + nn::shape_str(expected) + ", got " +
                     nn::shape_str(is));
  }
  const Var img = tape.conv2d(image, tape.param("gate.img.w"), tape.param("gate.img.b"), 1, 1);
  const Var msk = tape.conv2d(mask, tape.param("gate.mask.w"), tape.param("gate.mask.b"), 1, 1);
  return tape.mul(img, msk);
}

template <typename T>
Var HybridModel::cnn_stack(Tape<T>& tape, Var x, const char* prefix) const {
  for (std::size_t i = 0; i < config_.cnn_channels.size(); ++i) {
    const std::string p = stage(prefix, i);
    x = tape.gelu(tape.conv2d(x, tape.param(p + ".w"), tape.param(p + ".b"), 2, 1));
  }
  return x;
}

template <typename T>
Var HybridModel::multi_head_attention(Tape<T>& tape, Var x, const std::string& prefix,
                                      std::vector<Var>* attention) const {
  const std::size_t E = config_.vit.embed_dim;
  const std::size_t H = config_.vit.heads;
  const std::size_t dh = E / H;
  const Var qkv = tape.matmul(x, tape.param(prefix + ".qkv.w"));
  const Var Q = tape.add_row_bias(tape.slice_cols(qkv, 0, E), tape.param(prefix + ".q.b"));
  const Var K = tape.slice_cols(qkv, E, 2 * E);
  const Var V = tape.add_row_bias(tape.slice_cols(qkv, 2 * E, 3 * E), tape.param(prefix + ".v.b"));
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Var> heads;
  heads.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    const Var q = tape.slice_cols(Q, h * dh, (h + 1) * dh);
    const Var k = tape.slice_cols(K, h * dh, (h + 1) * dh);
    const Var v = tape.slice_cols(V, h * dh, (h + 1) * dh);
    const Var weights = tape.softmax_rows(tape.scale(tape.matmul(q, tape.transpose(k)), scale));
    if (attention) attention->push_back(weights);
    heads.push_back(tape.matmul(weights, v));
  }
  return linear(tape, tape.concat_cols(heads), prefix + ".proj");
}

template <typename T>
Var HybridModel::vit_encode(Tape<T>& tape, Var tokens, std::vector<Var>* attention) const {
  const Shape expected{config_.token_count(), config_.cnn_channels.back()};
  if (tape.value(tokens).shape != expected) {
    throw ShapeError("vit_encode: expected tokens " + nn::shape_str(expected) + ", got " +
                     nn::shape_str(tape.value(tokens).shape));
  }
  Var x = tape.add(linear(tape, tokens, "vit.patch"), tape.param("vit.pos"));
  for (std::size_t d = 0; d < config_.vit.depth; ++d) {
    const std::string b = "vit.block" + std::to_string(d);
    Var h = tape.layer_norm(x, tape.param(b + ".ln1.g"), tape.param(b + ".ln1.b"));
    x = tape.add(x, multi_head_attention(tape, h, b + ".attn", attention));
    h = tape.layer_norm(x, tape.param(b + ".ln2.g"), tape.param(b + ".ln2.b"));
    h = linear(tape, tape.gelu(linear(tape, h, b + ".mlp.fc1")), b + ".mlp.fc2");
    x = tape.add(x, h);
  }
  x = tape.layer_norm(x, tape.param("vit.ln.g"), tape.param("vit.ln.b"));
  return tape.mean_rows(x);
}

template <typename T>
Var HybridModel::enrich_clinical(Tape<T>& tape, Var clinical,
                                 std::vector<Var>* feature_masks) const {
  if (tape.value(clinical).shape != Shape{1, kClinicalFeatures}) {
    throw ShapeError("enrich_clinical: expected [1,4] input, got " +
                     nn::shape_str(tape.value(clinical).shape));
  }
  const auto& k = config_.clinical;
  Var attended = glu(tape, clinical, std::string("clin.initial"));
  Var prior = tape.constant(Tensor<T>({1, kClinicalFeatures}, T{1}));
  std::optional<Var> out;
  for (std::size_t s = 0; s < k.steps; ++s) {
    const std::string p = "clin.step" + std::to_string(s);
    const Var logits = linear(tape, attended, p + ".att");
    const Var mask = tape.sparsemax_rows(tape.mul(logits, prior));
    if (feature_masks) feature_masks->push_back(mask);
    prior = tape.mul(prior, tape.add_scalar(tape.scale(mask, T{-1}), static_cast<T>(k.relaxation)));
    const Var hidden = glu(tape, tape.mul(mask, clinical), p + ".ft");
    const Var decision = tape.gelu(linear(tape, hidden, p + ".dec"));
    out = out ? tape.add(*out, decision) : decision;
    attended = hidden;
  }
  return *out;
}

template <typename T>
ForwardTrace HybridModel::forward(Tape<T>& tape, const ModelInput<T>& input) const {
  ForwardTrace tr;
  const Var image = tape.constant(input.image);
  const Var mask = tape.constant(input.mask);
  const Var clin = tape.constant(input.clinical);
  tr.gated = context_gate(tape, image, mask);

  std::vector<Var> parts;
  if (config_.parallel_branch) {
    tr.local = tape.global_avg_pool(cnn_stack(tape, tr.gated, "par"));
    parts.push_back(*tr.local);
  }
  if (config_.sequential_branch) {
    const Var tokens = tape.map_to_tokens(cnn_stack(tape, tr.gated, "seq"));
    tr.global = vit_encode(tape, tokens, &tr.attention);
    parts.push_back(*tr.global);
  }
  tr.clinical = config_.clinical_enrichment ? enrich_clinical(tape, clin, &tr.feature_masks) : clin;
  parts.push_back(tr.clinical);

  tr.fused = tape.concat_cols(parts);
  const Var hidden = tape.gelu(linear(tape, tr.fused, std::string("fuse.fc1")));
  tr.output = linear(tape, hidden, std::string("fuse.fc2"));
  return tr;
}

template <typename T>
SlopePrediction predict_slope(const HybridModel& model, const ParamStore<T>& params,
                              const TargetStats& stats, const ModelInput<T>& input) {
  Tape<T> tape(&params);
  const auto tr = model.forward(tape, input);
  const double z = static_cast<double>(tape.scalar(tr.output));
  const double value = stats.mean + stats.sd * z;
  if (!std::isfinite(value)) throw NumericalError("non-finite slope prediction");
  return {value};
}

#define IPF_INSTANTIATE_MODEL(T)                                                              \
  template ParamStore<T> HybridModel::init_params<T>(std::uint64_t) const;                    \
  template Var HybridModel::context_gate<T>(Tape<T>&, Var, Var) const;                        \
  template Var HybridModel::cnn_stack<T>(Tape<T>&, Var, const char*) const;                   \
  template Var HybridModel::vit_encode<T>(Tape<T>&, Var, std::vector<Var>*) const;            \
  template Var HybridModel::multi_head_attention<T>(Tape<T>&, Var, const std::string&,        \
                                                    std::vector<Var>*) const;                 \
  template Var HybridModel::enrich_clinical<T>(Tape<T>&, Var, std::vector<Var>*) const;       \
  template ForwardTrace HybridModel::forward<T>(Tape<T>&, const ModelInput<T>&) const;        \
  template SlopePrediction predict_slope<T>(const HybridModel&, const ParamStore<T>&,         \
                                            const TargetStats&, const ModelInput<T>&);

IPF_INSTANTIATE_MODEL(float)
IPF_INSTANTIATE_MODEL(double)

#undef IPF_INSTANTIATE_MODEL

}  // namespace ipf
