#pragma once

#include "paln/backbone.hpp"

#include <vector>

namespace paln {

/// Shape of the minimal pre-norm patch transformer.
struct ToyEncoderConfig {
  int layers = 2;
  int heads = 4;
  int dim = 64;
  int side = 4;
  int patch_dim = 12;
  int mlp_hidden = 128;
  int lora_rank = 4;
  double lora_alpha = 4.0;
  double lora_dropout = 0.0;
};

struct EncoderLayer {
  Matrix wq, wk, wv, wo;  ///< d x d
  Matrix w1;              ///< hidden x d
  Vector b1;
  Matrix w2;              ///< d x hidden
  Vector b2;
};

/// Frozen encoder weights plus LoRA adapters on each layer's query and value
/// projections. adapters[2 * l] targets layer l's query, adapters[2 * l + 1] its value.
struct ToyEncoderParams {
  Matrix patch_embed;  ///< d x patch_dim
  Vector cls_token;
  Matrix pos_embed;    ///< (1 + s*s) x d
  std::vector<EncoderLayer> layers;
  AdapterSet adapters;
  int side = 0;
  int heads = 1;

  int dim() const { return static_cast<int>(cls_token.size()); }
  int patch_dim() const { return static_cast<int>(patch_embed.cols()); }
  void validate() const;
};

ToyEncoderParams init_toy_encoder(const ToyEncoderConfig& config, std::uint64_t seed);

/// Evaluation-mode forward pass on an (s*s) x patch_dim grid of flattened patches.
/// CLS and patch tokens come from the final layer after the closing normalization.
FeatureBundle encode(const ToyEncoderParams& params, const Matrix& input);

/// Training-mode forward pass recording what the adapter gradients need.
/// The returned pullback reads `params` at call time, so keep it alive and unmodified.
Traced encode_traced(const ToyEncoderParams& params, const Matrix& input, Rng* dropout_rng);

/// Backbone over raw patch grids held in an EmbeddingStore (record.patch is the input;
/// the store's d is the patch dimension and its s the grid side).
class EncoderBackbone final : public Backbone {
 public:
  EncoderBackbone(ToyEncoderParams params, const EmbeddingStore& inputs);

  FeatureBundle extract(const std::string& id) const override;
  Traced trace(const std::string& id, Rng* dropout_rng) const override;
  AdapterSet& adapters() override { return params_.adapters; }
  const AdapterSet& adapters() const override { return params_.adapters; }
  bool has_id(const std::string& id) const override { return inputs_->contains(id); }

  const ToyEncoderParams& params() const { return params_; }

 private:
  ToyEncoderParams params_;
  const EmbeddingStore* inputs_;
};

}  // namespace paln
