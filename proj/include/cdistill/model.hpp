// SPDX-License-Identifier: Apache-2.0
//
// Small decoder-only transformer with LoRA adapters on the attention
// projections. The frozen base doubles as the teacher; base plus adapters is
// the student.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdistill/tensor.hpp"

namespace cdistill {

struct ContextWindowExceeded : std::runtime_error {
  ContextWindowExceeded(std::size_t length, std::size_t limit);
  std::size_t length;
  std::size_t limit;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 1024;
  double dropout_p = 0.1;
  double init_std = 0.02;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Toy size family S/M/L/XL standing in for a four-point model-size sweep.
ModelConfig model_config_for_size(std::string_view tag, std::size_t vocab_size);
const std::vector<std::string>& model_size_tags();
// Position of a tag in the S < M < L < XL order; unknown tags sort last.
std::size_t model_size_rank(std::string_view tag);

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;  // [d_out, d_in] weights
  Tensor ln2_gain, ln2_bias;
  Tensor w_fc, b_fc, w_proj, b_proj;
};

struct TransformerWeights {
  ModelConfig config;
  Tensor token_embedding;     // [vocab, d]; also the tied output head
  Tensor position_embedding;  // [max_seq_len, d]
  std::vector<LayerWeights> layers;
  Tensor lnf_gain, lnf_bias;

  static TransformerWeights initialize(const ModelConfig& config, std::uint64_t seed);

  // Stable (name, tensor) listing used for checkpoints and comparisons.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::size_t parameter_count() const;
  TransformerWeights deep_copy(bool requires_grad = false) const;
};

enum class LoraTarget { query, key, value, output };

std::string_view to_string(LoraTarget target);
LoraTarget lora_target_from_string(std::string_view name);

struct LoraConfig {
  std::size_t rank = 4;
  double alpha = 0.0;  // 0 means "same as rank", i.e. scaling 1
  std::vector<LoraTarget> targets{LoraTarget::query, LoraTarget::value};
  double init_std = 0.02;

  double effective_alpha() const { return alpha > 0.0 ? alpha : static_cast<double>(rank); }
  bool operator==(const LoraConfig&) const = default;
};

void to_json(nlohmann::json& j, const LoraConfig& c);
void from_json(const nlohmann::json& j, LoraConfig& c);

struct LoraAdapter {
  std::size_t layer = 0;
  LoraTarget target = LoraTarget::query;
  Tensor a;  // [r, d_in]
  Tensor b;  // [d_out, r]
  std::size_t rank = 0;
  double alpha = 0.0;

  double scaling() const { return alpha / static_cast<double>(rank); }
  std::string name() const;
};

/// Frozen base weights plus trainable low-rank pairs. B starts at zero so a
/// fresh adapted model reproduces the base exactly.
class AdaptedModel {
 public:
  AdaptedModel(std::shared_ptr<const TransformerWeights> base, const LoraConfig& lora, std::uint64_t seed);

  const TransformerWeights& base() const { return *base_; }
  std::shared_ptr<const TransformerWeights> base_ptr() const { return base_; }
  const std::vector<LoraAdapter>& adapters() const { return adapters_; }
  std::vector<LoraAdapter>& adapters() { return adapters_; }

  // A and B of every adapter, in adapter order.
  std::vector<Tensor> trainable_parameters() const;
  std::size_t trainable_parameter_count() const;

 private:
  std::shared_ptr<const TransformerWeights> base_;
  std::vector<LoraAdapter> adapters_;
};

struct ForwardOptions {
  bool train = false;
  std::uint64_t dropout_seed = 0;
};

/// Logits [T, vocab]. Throws ContextWindowExceeded for sequences longer than
/// max_seq_len.
Tensor forward(const TransformerWeights& weights, std::span<const std::int64_t> tokens,
               const ForwardOptions& options = {});
Tensor forward(const AdaptedModel& model, std::span<const std::int64_t> tokens,
               const ForwardOptions& options = {});

// Final-position logits [vocab] without projecting the other rows through the
// output head. Same values as last_token_logits(forward(...)).
Tensor forward_last(const TransformerWeights& weights, std::span<const std::int64_t> tokens,
                    const ForwardOptions& options = {});
Tensor forward_last(const AdaptedModel& model, std::span<const std::int64_t> tokens,
                    const ForwardOptions& options = {});

Tensor last_token_logits(const Tensor& logits);

// W' = W + (alpha/r)·B·A for every wrapped projection; the input is untouched.
TransformerWeights merge_adapters(const AdaptedModel& model);

// ---- checkpoints ----
//
// Binary container: "CDWT" magic, u32 version, u64 header length, JSON header
// {"kind", "config", "tensors": [{"name", "shape"}]}, then every tensor's
// values as little-endian float64 in header order.

std::string serialize_weights(const TransformerWeights& weights);
TransformerWeights deserialize_weights(std::string_view bytes);
void save_weights(const std::filesystem::path& path, const TransformerWeights& weights);
TransformerWeights load_weights(const std::filesystem::path& path);

std::string serialize_adapters(const AdaptedModel& model);
void save_adapters(const std::filesystem::path& path, const AdaptedModel& model);
// Replaces the adapter values of `model` with those stored in `bytes`.
void load_adapters_into(AdaptedModel& model, std::string_view bytes);

}  // namespace cdistill
