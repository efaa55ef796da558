#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "ipf/nn/tape.hpp"

namespace ipf {

struct VitConfig {
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t mlp_dim = 128;
};

// Attentive tabular encoder (sparsemax feature masks, gated linear units).
struct ClinicalEncoderConfig {
  std::size_t steps = 2;
  std::size_t hidden_dim = 16;
  std::size_t out_dim = 32;
  double relaxation = 1.3;
};

inline constexpr std::size_t kClinicalFeatures = 4;

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t gate_channels = 8;
  // Stride-2 3x3 stages; both image branches use the same widths.
  std::vector<std::size_t> cnn_channels{16, 32, 64};
  VitConfig vit;
  ClinicalEncoderConfig clinical;
  std::size_t fusion_hidden_dim = 64;

  // Ablation switches. With clinical_enrichment off the raw clinical vector
  // is fused directly.
  bool parallel_branch = true;
  bool sequential_branch = true;
  bool clinical_enrichment = true;

  void validate() const;
  std::size_t token_grid() const;  // image_size / 2^stages
  std::size_t token_count() const { return token_grid() * token_grid(); }
  std::size_t local_dim() const { return parallel_branch ? cnn_channels.back() : 0; }
  std::size_t global_dim() const { return sequential_branch ? vit.embed_dim : 0; }
  std::size_t clinical_dim() const {
    return clinical_enrichment ? clinical.out_dim : kClinicalFeatures;
  }
  std::size_t fusion_input_dim() const { return local_dim() + global_dim() + clinical_dim(); }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Per-slice model input: image and mask are [1, S, S] in [0, 1]; clinical is
// [1, 4].
template <typename T>
struct ModelInput {
  nn::Tensor<T> image;
  nn::Tensor<T> mask;
  nn::Tensor<T> clinical;
};

// Intermediate nodes of one forward pass. Branch outputs are absent when the
// branch is ablated.
struct ForwardTrace {
  nn::Var gated;
  std::optional<nn::Var> local;
  std::optional<nn::Var> global;
  nn::Var clinical;
  nn::Var fused;
  nn::Var output;  // [1,1] standardised slope
  std::vector<nn::Var> attention;       // [T,T] per block and head
  std::vector<nn::Var> feature_masks;   // [1,4] per decision step
};

// Standardisation of slope targets over a training fold.
struct TargetStats {
  double mean = 0.0;
  double sd = 1.0;
};

struct SlopePrediction {
  double value = 0.0;  // mL/week
};

// Context-aware sequential-parallel hybrid transformer with attentive
// clinical enrichment and an MLP regression head. Stateless apart from its
// configuration; parameters live in a ParamStore.
class HybridModel {
 public:
  explicit HybridModel(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }

  template <typename T>
  nn::ParamStore<T> init_params(std::uint64_t seed) const;

  // Conv_img(image) * Conv_mask(mask), [gate_channels, S, S].
  template <typename T>
  nn::Var context_gate(nn::Tape<T>& tape, nn::Var image, nn::Var mask) const;

  // Stride-2 conv stack with GELU; `prefix` selects the branch parameters.
  template <typename T>
  nn::Var cnn_stack(nn::Tape<T>& tape, nn::Var x, const char* prefix) const;

  // Tokens [T, C_last] -> patch projection + positional embedding ->
  // pre-norm transformer blocks -> final norm -> mean over tokens [1, E].
  template <typename T>
  nn::Var vit_encode(nn::Tape<T>& tape, nn::Var tokens,
                     std::vector<nn::Var>* attention = nullptr) const;

  template <typename T>
  nn::Var multi_head_attention(nn::Tape<T>& tape, nn::Var x, const std::string& prefix,
                               std::vector<nn::Var>* attention = nullptr) const;

  // [1,4] -> [1, clinical.out_dim].
  template <typename T>
  nn::Var enrich_clinical(nn::Tape<T>& tape, nn::Var clinical,
                          std::vector<nn::Var>* feature_masks = nullptr) const;

  template <typename T>
  ForwardTrace forward(nn::Tape<T>& tape, const ModelInput<T>& input) const;

 private:
  ModelConfig config_;
};

template <typename T>
SlopePrediction predict_slope(const HybridModel& model, const nn::ParamStore<T>& params,
                              const TargetStats& stats, const ModelInput<T>& input);

}  // namespace ipf
