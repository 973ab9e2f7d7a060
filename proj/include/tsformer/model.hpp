#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tsformer/autodiff.hpp"

namespace tsf::model {

/// How token fusion treats rows that are not augmented.
///  - literal: every row is halved, selected rows also receive half the
///    other view's token.
///  - average_selected: only selected rows change, to the mean of the two.
enum class FuseVariant { literal, average_selected };

enum class Mode { pretrain, adapted };

enum class Group { pretrainable, adapter };

struct ModelConfig {
  std::size_t channels = 64;
  std::size_t samples = 250;
  std::size_t scales = 20;
  std::size_t slice_len = 5;
  std::size_t dim = 128;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;  // 0 selects heads * dim
  std::size_t classes = 2;
  std::size_t fusion_kernels = 16;
  std::size_t contrast_kernels = 4;
  std::size_t conv_rows = 16;  // capped at the token count
  double ln_eps = 1e-5;
  FuseVariant fuse_variant = FuseVariant::literal;

  std::size_t tokens() const { return samples / slice_len; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t hidden() const { return ffn_hidden ? ffn_hidden : heads * dim; }
  std::size_t kernel_rows() const { return std::min(conv_rows, tokens()); }
  std::size_t kernel_cols() const { return dim / 8; }
  std::size_t conv_out_rows() const { return (tokens() - kernel_rows()) / kernel_rows() + 1; }
  std::size_t conv_out_cols() const { return (dim - kernel_cols()) / kernel_cols() + 1; }
  std::size_t fusion_feature_dim() const {
    return fusion_kernels * conv_out_rows() * conv_out_cols();
  }
  std::size_t contrast_feature_dim() const {
    return contrast_kernels * conv_out_rows() * conv_out_cols();
  }
  std::size_t temporal_slice_size() const { return channels * slice_len; }
  std::size_t spectral_slice_size() const { return scales * channels * slice_len; }

  /// Throws ConfigError on inconsistent geometry.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class Init { fan_in_uniform, zeros, ones };

struct ParamSpec {
  std::string name;
  ad::Shape shape;
  Group group;
  Init init;
  std::size_t fan_in;
};

/// Every learnable tensor of the network, in a fixed order.
std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg);

/// Named, partitioned parameter store.
template <typename T>
class ModelParams {
 public:
  struct Entry {
    ad::Shape shape;
    Group group;
    std::vector<T> values;

    bool operator==(const Entry&) const = default;
  };

  ModelParams() = default;
  explicit ModelParams(ModelConfig cfg);

  /// Fan-in uniform weights, zero biases and positional matrices, unit
  /// layer-norm gains. The subject-specific classifier block starts at zero
  /// so that enabling the adapter leaves predictions unchanged.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  const Entry& at(const std::string& name) const;
  Entry& at(const std::string& name);
  bool contains(const std::string& name) const { return entries_.contains(name); }

  std::vector<std::string> names(Group g) const;
  std::set<std::string> name_set(Group g) const;
  std::size_t count(Group g) const;
  std::size_t count() const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out(cfg_);
    for (const auto& [name, e] : entries_) {
      auto& dst = out.at(name);
      dst.values.assign(e.values.begin(), e.values.end());
    }
    return out;
  }

  bool operator==(const ModelParams&) const = default;

 private:
  ModelConfig cfg_;
  std::map<std::string, Entry> entries_;
};

/// Parameters bound into one gradient graph. Names in `trainable` become
/// gradient-accumulating leaves, all others constants.
template <typename T>
class GraphParams {
 public:
  /// A nonempty `subset` restricts the graph to those tensors.
  GraphParams(const ModelParams<T>& params, const std::set<std::string>& trainable,
              const std::set<std::string>& subset = {});

  const ad::Tensor<T>& operator[](const std::string& name) const;
  const ModelConfig& config() const { return cfg_; }
  /// Accumulated gradients of the trainable leaves.
  std::map<std::string, std::vector<T>> grads() const;

 private:
  ModelConfig cfg_;
  std::map<std::string, ad::Tensor<T>> tensors_;
  std::set<std::string> trainable_;
};

template <typename T>
struct ViewTokens {
  ad::Tensor<T> temporal;  // n x d
  ad::Tensor<T> spectral;  // n x d
};

/// One trial's two views. `temporal` is channels x samples, `spectral` is
/// scales x channels x samples.
struct TrialView {
  std::span<const float> temporal;
  std::span<const float> spectral;
};

template <typename T>
struct AttentionOutput {
  ad::Tensor<T> out;
  std::vector<ad::Tensor<T>> weights;  // one (rows x keys) matrix per head
};

/// Records intermediate activations when passed to the stage functions.
template <typename T>
struct Trace {
  std::vector<ad::Tensor<T>> attention;
  std::vector<T> scores_temporal;
  std::vector<T> scores_spectral;
  std::vector<T> mask_temporal;  // per token, 1 if augmented
  std::vector<T> mask_spectral;
  std::optional<ViewTokens<T>> embedded, encoded, crossed, fused, attended;
  std::optional<ad::Tensor<T>> fusion_tokens;
};

template <typename T>
struct ForwardOutput {
  ad::Tensor<T> logits;  // R
  ad::Tensor<T> z_fus;
  std::optional<ad::Tensor<T>> z_sub;
  ad::Tensor<T> z_tem;
  ad::Tensor<T> z_spe;
};

/// Multi-head scaled dot-product attention; `w_out` may be undefined.
template <typename T>
AttentionOutput<T> multi_head_attention(const ad::Tensor<T>& queries, const ad::Tensor<T>& keys,
                                        const ad::Tensor<T>& w_q, const ad::Tensor<T>& w_k,
                                        const ad::Tensor<T>& w_v, const ad::Tensor<T>& w_out,
                                        std::size_t heads);

template <typename T>
ViewTokens<T> slice_embed(const TrialView& trial, const GraphParams<T>& p);

template <typename T>
ViewTokens<T> encode(const ViewTokens<T>& tokens, const GraphParams<T>& p, Trace<T>* trace = nullptr);

template <typename T>
ViewTokens<T> cross_attend(const ViewTokens<T>& tokens, const GraphParams<T>& p,
                           Trace<T>* trace = nullptr);

/// Attention received by each token from the others:
/// score(i) = sum_{j != i} softmax_rows(X W X^T / sqrt(d))[j, i]. Values only.
template <typename T>
std::vector<T> token_score(const ad::Tensor<T>& tokens, const ad::Tensor<T>& w_score);

/// Median of an even-length list is the mean of the two central values.
template <typename T>
T median(std::vector<T> values);

/// Per-token indicator: own score strictly below own median and the other
/// view's score strictly above its median.
template <typename T>
std::vector<T> fusion_mask(std::span<const T> own_scores, std::span<const T> other_scores);

template <typename T>
ViewTokens<T> token_fuse(const ViewTokens<T>& tokens, std::span<const T> scores_tem,
                         std::span<const T> scores_spe, FuseVariant variant,
                         Trace<T>* trace = nullptr);

template <typename T>
ViewTokens<T> post_fuse_self_attend(const ViewTokens<T>& tokens, const GraphParams<T>& p,
                                    Trace<T>* trace = nullptr);

/// Contrastive features from the token-fusion outputs (shared 4-kernel conv).
template <typename T>
std::pair<ad::Tensor<T>, ad::Tensor<T>> contrastive_heads(const ViewTokens<T>& tokens,
                                                          const GraphParams<T>& p);

template <typename T>
struct FusionOutput {
  ad::Tensor<T> fusion_tokens;  // n x d
  ad::Tensor<T> z_fus;
};

template <typename T>
FusionOutput<T> fuse(const ViewTokens<T>& tokens, const GraphParams<T>& p,
                     Trace<T>* trace = nullptr);

template <typename T>
ad::Tensor<T> adapt(const ad::Tensor<T>& fusion_tokens, const GraphParams<T>& p, Mode mode);

template <typename T>
ad::Tensor<T> classify(const ad::Tensor<T>& z_fus, const std::optional<ad::Tensor<T>>& z_sub,
                       const GraphParams<T>& p);

template <typename T>
ForwardOutput<T> forward(const TrialView& trial, const GraphParams<T>& p, Mode mode,
                         Trace<T>* trace = nullptr);

}  // namespace tsf::model
