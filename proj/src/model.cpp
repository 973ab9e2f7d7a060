#include "tsformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tsformer/error.hpp"
#include "tsformer/random.hpp"

namespace tsf::model {

using ad::Tensor;

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (channels == 0 || samples == 0 || scales == 0 || slice_len == 0 || dim == 0 || heads == 0)
    fail("all dimensions must be positive");
  if (samples % slice_len != 0) {
    std::ostringstream os;
    os << "samples (" << samples << ") must be divisible by the slice length (" << slice_len << ")";
    fail(os.str());
  }
  if (tokens() < 2) fail("need at least two tokens");
  if (dim % heads != 0) fail("embedding dimension must be divisible by the head count");
  if (dim % 8 != 0) fail("embedding dimension must be divisible by 8");
  if (classes < 2) fail("need at least two classes");
  if (fusion_kernels == 0 || contrast_kernels == 0 || conv_rows == 0)
    fail("convolution sizes must be positive");
  if (!(ln_eps > 0.0)) fail("layer-norm epsilon must be positive");
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  const std::size_t n = cfg.tokens();
  const std::size_t kh = cfg.kernel_rows();
  const std::size_t kw = cfg.kernel_cols();
  const std::size_t zf = cfg.fusion_feature_dim();
  const std::size_t r = cfg.classes;
  const auto P = Group::pretrainable;
  const auto A = Group::adapter;
  const auto U = Init::fan_in_uniform;
  const auto Z = Init::zeros;
  const auto O = Init::ones;

  std::vector<ParamSpec> specs = {
      {"embed.tem.weight", {cfg.temporal_slice_size(), d}, P, U, cfg.temporal_slice_size()},
      {"embed.tem.pos", {n, d}, P, Z, 0},
      {"embed.spe.weight", {cfg.spectral_slice_size(), d}, P, U, cfg.spectral_slice_size()},
      {"embed.spe.pos", {n, d}, P, Z, 0},
  };
  auto attention = [&](const std::string& prefix, bool with_out) {
    for (const char* m : {"q", "k", "v"}) specs.push_back({prefix + "." + m, {d, d}, P, U, d});
    if (with_out) specs.push_back({prefix + ".o", {d, d}, P, U, d});
  };
  auto norm = [&](const std::string& prefix) {
    specs.push_back({prefix + ".gain", {d}, P, O, 0});
    specs.push_back({prefix + ".bias", {d}, P, Z, 0});
  };
  attention("encoder.attn", true);
  norm("encoder.norm1");
  specs.push_back({"encoder.ffn.w1", {d, cfg.hidden()}, P, U, d});
  specs.push_back({"encoder.ffn.b1", {cfg.hidden()}, P, Z, 0});
  specs.push_back({"encoder.ffn.w2", {cfg.hidden(), d}, P, U, cfg.hidden()});
  specs.push_back({"encoder.ffn.b2", {d}, P, Z, 0});
  norm("encoder.norm2");
  attention("cross.tem", false);
  attention("cross.spe", false);
  specs.push_back({"score.tem", {d, d}, P, U, d});
  specs.push_back({"score.spe", {d, d}, P, U, d});
  attention("post.attn", true);
  norm("post.norm");
  specs.push_back({"fusion.proj.weight", {2 * d, d}, P, U, 2 * d});
  specs.push_back({"fusion.proj.bias", {d}, P, Z, 0});
  attention("fusion.attn", false);
  specs.push_back({"fusion.conv", {cfg.fusion_kernels, kh, kw}, P, U, kh * kw});
  specs.push_back({"contrast.conv", {cfg.contrast_kernels, kh, kw}, P, U, kh * kw});
  specs.push_back({"classifier.fus", {zf, r}, P, U, zf});
  specs.push_back({"adapter.conv", {cfg.fusion_kernels, kh, kw}, A, U, kh * kw});
  specs.push_back({"classifier.sub", {zf, r}, A, Z, 0});
  specs.push_back({"classifier.bias", {r}, A, Z, 0});
  return specs;
}

template <typename T>
ModelParams<T>::ModelParams(ModelConfig cfg) : cfg_(cfg) {
  for (const ParamSpec& s : parameter_layout(cfg_)) {
    entries_.emplace(s.name, Entry{s.shape, s.group, std::vector<T>(ad::numel(s.shape), T{0})});
  }
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams out(cfg);
  Rng rng(seed);
  for (const ParamSpec& s : parameter_layout(cfg)) {
    auto& values = out.at(s.name).values;
    switch (s.init) {
      case Init::zeros: std::fill(values.begin(), values.end(), T{0}); break;
      case Init::ones: std::fill(values.begin(), values.end(), T{1}); break;
      case Init::fan_in_uniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
        for (T& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
    }
  }
  return out;
}

template <typename T>
const typename ModelParams<T>::Entry& ModelParams<T>::at(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
typename ModelParams<T>::Entry& ModelParams<T>::at(const std::string& name) {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::vector<std::string> ModelParams<T>::names(Group g) const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_)
    if (e.group == g) out.push_back(name);
  return out;
}

template <typename T>
std::set<std::string> ModelParams<T>::name_set(Group g) const {
  const auto v = names(g);
  return {v.begin(), v.end()};
}

template <typename T>
std::size_t ModelParams<T>::count(Group g) const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_)
    if (e.group == g) n += e.values.size();
  return n;
}

template <typename T>
std::size_t ModelParams<T>::count() const {
  return count(Group::pretrainable) + count(Group::adapter);
}

template <typename T>
GraphParams<T>::GraphParams(const ModelParams<T>& params, const std::set<std::string>& trainable,
                            const std::set<std::string>& subset)
    : cfg_(params.config()), trainable_(trainable) {
  for (const std::string& name : trainable) {
    if (!params.contains(name)) throw ConfigError("unknown trainable parameter '" + name + "'");
    if (!subset.empty() && !subset.contains(name))
      throw ConfigError("trainable parameter '" + name + "' is outside the graph subset");
  }
  for (const auto& [name, e] : params.entries()) {
    if (!subset.empty() && !subset.contains(name)) continue;
    tensors_.emplace(name, trainable.contains(name) ? Tensor<T>::parameter(e.shape, e.values)
                                                    : Tensor<T>::constant(e.shape, e.values));
  }
}

template <typename T>
const Tensor<T>& GraphParams<T>::operator[](const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::map<std::string, std::vector<T>> GraphParams<T>::grads() const {
  std::map<std::string, std::vector<T>> out;
  for (const std::string& name : trainable_) out.emplace(name, tensors_.at(name).grad());
  return out;
}

template <typename T>
AttentionOutput<T> multi_head_attention(const Tensor<T>& queries, const Tensor<T>& keys,
                                        const Tensor<T>& w_q, const Tensor<T>& w_k,
                                        const Tensor<T>& w_v, const Tensor<T>& w_out,
                                        std::size_t heads) {
  const std::size_t d = w_q.dim(1);
  if (heads == 0 || d % heads != 0) throw ConfigError("attention: bad head count");
  const std::size_t dk = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dk));
  const Tensor<T> q = ad::matmul(queries, w_q);
  const Tensor<T> k = ad::matmul(keys, w_k);
  const Tensor<T> v = ad::matmul(keys, w_v);

  AttentionOutput<T> res;
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t b = h * dk, e = b + dk;
    const Tensor<T> qh = heads == 1 ? q : ad::slice_cols(q, b, e);
    const Tensor<T> kh = heads == 1 ? k : ad::slice_cols(k, b, e);
    const Tensor<T> vh = heads == 1 ? v : ad::slice_cols(v, b, e);
    const Tensor<T> a =
        ad::softmax_rows(ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), scale));
    res.weights.push_back(a);
    outs.push_back(ad::matmul(a, vh));
  }
  res.out = heads == 1 ? outs.front() : ad::concat_last_dim<T>(outs);
  if (w_out.defined()) res.out = ad::matmul(res.out, w_out);
  return res;
}

namespace {

template <typename T>
void record(Trace<T>* trace, const AttentionOutput<T>& a) {
  if (trace) trace->attention.insert(trace->attention.end(), a.weights.begin(), a.weights.end());
}

template <typename T>
Tensor<T> attention_block(const Tensor<T>& q, const Tensor<T>& kv, const GraphParams<T>& p,
                          const std::string& prefix, bool with_out, Trace<T>* trace) {
  const AttentionOutput<T> a =
      multi_head_attention(q, kv, p[prefix + ".q"], p[prefix + ".k"], p[prefix + ".v"],
                           with_out ? p[prefix + ".o"] : Tensor<T>{}, p.config().heads);
  record(trace, a);
  return a.out;
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const GraphParams<T>& p, const std::string& prefix) {
  return ad::layernorm(x, p[prefix + ".gain"], p[prefix + ".bias"],
                       static_cast<T>(p.config().ln_eps));
}

template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& x, const GraphParams<T>& p, Trace<T>* trace) {
  const Tensor<T> y =
      norm(ad::add(x, attention_block(x, x, p, "encoder.attn", true, trace)), p, "encoder.norm1");
  const Tensor<T> hidden =
      ad::gelu(ad::add_rowwise(ad::matmul(y, p["encoder.ffn.w1"]), p["encoder.ffn.b1"]));
  const Tensor<T> ffn = ad::add_rowwise(ad::matmul(hidden, p["encoder.ffn.w2"]), p["encoder.ffn.b2"]);
  return norm(ad::add(y, ffn), p, "encoder.norm2");
}

template <typename T>
Tensor<T> flat_conv(const Tensor<T>& x, const Tensor<T>& kernels, const ModelConfig& cfg) {
  const Tensor<T> c = ad::conv2d_valid(x, kernels, cfg.kernel_rows(), cfg.kernel_cols());
  return ad::reshape(c, {c.size()});
}

template <typename T>
std::vector<T> row_mask(std::span<const T> per_token, std::size_t d, T scale) {
  std::vector<T> m(per_token.size() * d);
  for (std::size_t i = 0; i < per_token.size(); ++i)
    std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(i * d), d, per_token[i] * scale);
  return m;
}

}  // namespace

template <typename T>
ViewTokens<T> slice_embed(const TrialView& trial, const GraphParams<T>& p) {
  const ModelConfig& cfg = p.config();
  const std::size_t n = cfg.tokens(), t = cfg.slice_len, len = cfg.samples;
  const std::size_t c_count = cfg.channels, s_count = cfg.scales;
  if (trial.temporal.size() != c_count * len) throw ShapeError("slice_embed: temporal trial size");
  if (trial.spectral.size() != s_count * c_count * len)
    throw ShapeError("slice_embed: spectral trial size");

  const std::size_t wt = cfg.temporal_slice_size();
  std::vector<T> tem(n * wt);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < c_count; ++c)
      for (std::size_t k = 0; k < t; ++k)
        tem[i * wt + c * t + k] = static_cast<T>(trial.temporal[c * len + i * t + k]);

  const std::size_t ws = cfg.spectral_slice_size();
  std::vector<T> spe(n * ws);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t sc = 0; sc < s_count * c_count; ++sc)
      for (std::size_t k = 0; k < t; ++k)
        spe[i * ws + sc * t + k] = static_cast<T>(trial.spectral[sc * len + i * t + k]);

  const Tensor<T> st = Tensor<T>::constant({n, wt}, std::move(tem));
  const Tensor<T> ss = Tensor<T>::constant({n, ws}, std::move(spe));
  return {ad::add(ad::matmul(st, p["embed.tem.weight"]), p["embed.tem.pos"]),
          ad::add(ad::matmul(ss, p["embed.spe.weight"]), p["embed.spe.pos"])};
}

template <typename T>
ViewTokens<T> encode(const ViewTokens<T>& tokens, const GraphParams<T>& p, Trace<T>* trace) {
  return {encoder_layer(tokens.temporal, p, trace), encoder_layer(tokens.spectral, p, trace)};
}

template <typename T>
ViewTokens<T> cross_attend(const ViewTokens<T>& tokens, const GraphParams<T>& p, Trace<T>* trace) {
  const Tensor<T>& xt = tokens.temporal;
  const Tensor<T>& xs = tokens.spectral;
  return {ad::add(xt, attention_block(xt, xs, p, "cross.tem", false, trace)),
          ad::add(xs, attention_block(xs, xt, p, "cross.spe", false, trace))};
}

template <typename T>
std::vector<T> token_score(const Tensor<T>& tokens, const Tensor<T>& w_score) {
  if (tokens.rank() != 2 || tokens.dim(0) < 2) throw ShapeError("token_score: need n >= 2 tokens");
  const std::size_t n = tokens.dim(0), d = tokens.dim(1);
  const Tensor<T> x = Tensor<T>::constant(tokens.shape(), {tokens.values().begin(), tokens.values().end()});
  const Tensor<T> w = Tensor<T>::constant(w_score.shape(), {w_score.values().begin(), w_score.values().end()});
  const Tensor<T> a = ad::softmax_rows(ad::mul_scalar(
      ad::matmul(ad::matmul(x, w), ad::transpose(x)), T{1} / std::sqrt(static_cast<T>(d))));
  std::vector<T> scores(n, T{0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) scores[i] += a.values()[j * n + i];
  return scores;
}

template <typename T>
T median(std::vector<T> values) {
  if (values.empty()) throw DataError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  return values.size() % 2 ? values[m] : (values[m - 1] + values[m]) / T{2};
}

template <typename T>
std::vector<T> fusion_mask(std::span<const T> own_scores, std::span<const T> other_scores) {
  if (own_scores.size() != other_scores.size()) throw ShapeError("fusion_mask: score lengths differ");
  const T own_theta = median(std::vector<T>(own_scores.begin(), own_scores.end()));
  const T other_theta = median(std::vector<T>(other_scores.begin(), other_scores.end()));
  std::vector<T> m(own_scores.size());
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = (own_scores[i] < own_theta && other_scores[i] > other_theta) ? T{1} : T{0};
  return m;
}

template <typename T>
ViewTokens<T> token_fuse(const ViewTokens<T>& tokens, std::span<const T> scores_tem,
                         std::span<const T> scores_spe, FuseVariant variant, Trace<T>* trace) {
  const std::size_t n = tokens.temporal.dim(0), d = tokens.temporal.dim(1);
  if (scores_tem.size() != n || scores_spe.size() != n) throw ShapeError("token_fuse: score length");
  const std::vector<T> m_tem = fusion_mask(scores_tem, scores_spe);
  const std::vector<T> m_spe = fusion_mask(scores_spe, scores_tem);
  if (trace) {
    trace->scores_temporal.assign(scores_tem.begin(), scores_tem.end());
    trace->scores_spectral.assign(scores_spe.begin(), scores_spe.end());
    trace->mask_temporal = m_tem;
    trace->mask_spectral = m_spe;
  }

  auto combine = [&](const Tensor<T>& self, const Tensor<T>& other, const std::vector<T>& m) {
    if (variant == FuseVariant::literal) {
      const std::vector<T> mask = row_mask<T>(m, d, T{1});
      return ad::mul_scalar(ad::add(self, ad::mask_mul<T>(other, mask)), T{0.5});
    }
    std::vector<T> keep(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) keep[i] = T{1} - T{0.5} * m[i];
    const std::vector<T> self_mask = row_mask<T>(keep, d, T{1});
    const std::vector<T> other_mask = row_mask<T>(m, d, T{0.5});
    return ad::add(ad::mask_mul<T>(self, self_mask), ad::mask_mul<T>(other, other_mask));
  };
  return {combine(tokens.temporal, tokens.spectral, m_tem),
          combine(tokens.spectral, tokens.temporal, m_spe)};
}

template <typename T>
ViewTokens<T> post_fuse_self_attend(const ViewTokens<T>& tokens, const GraphParams<T>& p,
                                    Trace<T>* trace) {
  auto layer = [&](const Tensor<T>& x) {
    return norm(ad::add(x, attention_block(x, x, p, "post.attn", true, trace)), p, "post.norm");
  };
  return {layer(tokens.temporal), layer(tokens.spectral)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> contrastive_heads(const ViewTokens<T>& tokens,
                                                  const GraphParams<T>& p) {
  const Tensor<T>& k = p["contrast.conv"];
  return {flat_conv(tokens.temporal, k, p.config()), flat_conv(tokens.spectral, k, p.config())};
}

template <typename T>
FusionOutput<T> fuse(const ViewTokens<T>& tokens, const GraphParams<T>& p, Trace<T>* trace) {
  const std::vector<Tensor<T>> pair{tokens.temporal, tokens.spectral};
  const Tensor<T> queries = ad::add_rowwise(
      ad::matmul(ad::concat_last_dim<T>(pair), p["fusion.proj.weight"]), p["fusion.proj.bias"]);
  const Tensor<T> keys = ad::concat_rows<T>(pair);
  const Tensor<T> fused = ad::add(queries, attention_block(queries, keys, p, "fusion.attn", false, trace));
  return {fused, flat_conv(fused, p["fusion.conv"], p.config())};
}

template <typename T>
Tensor<T> adapt(const Tensor<T>& fusion_tokens, const GraphParams<T>& p, Mode mode) {
  if (mode != Mode::adapted) throw ConfigError("adapt: subject-specific adapter is disabled");
  return flat_conv(fusion_tokens, p["adapter.conv"], p.config());
}

template <typename T>
Tensor<T> classify(const Tensor<T>& z_fus, const std::optional<Tensor<T>>& z_sub,
                   const GraphParams<T>& p) {
  const std::size_t r = p.config().classes;
  Tensor<T> logits = ad::matmul(ad::reshape(z_fus, {1, z_fus.size()}), p["classifier.fus"]);
  if (z_sub) {
    logits = ad::add(logits, ad::matmul(ad::reshape(*z_sub, {1, z_sub->size()}), p["classifier.sub"]));
  }
  return ad::add(ad::reshape(logits, {r}), p["classifier.bias"]);
}

template <typename T>
ForwardOutput<T> forward(const TrialView& trial, const GraphParams<T>& p, Mode mode,
                         Trace<T>* trace) {
  const ViewTokens<T> embedded = slice_embed(trial, p);
  const ViewTokens<T> encoded = encode(embedded, p, trace);
  const ViewTokens<T> crossed = cross_attend(encoded, p, trace);
  const std::vector<T> st = token_score(crossed.temporal, p["score.tem"]);
  const std::vector<T> ss = token_score(crossed.spectral, p["score.spe"]);
  const ViewTokens<T> fused_views = token_fuse<T>(crossed, st, ss, p.config().fuse_variant, trace);
  const ViewTokens<T> attended = post_fuse_self_attend(fused_views, p, trace);
  auto [z_tem, z_spe] = contrastive_heads(fused_views, p);
  FusionOutput<T> fusion = fuse(attended, p, trace);

  ForwardOutput<T> out;
  out.z_fus = fusion.z_fus;
  out.z_tem = z_tem;
  out.z_spe = z_spe;
  if (mode == Mode::adapted) out.z_sub = adapt(fusion.fusion_tokens, p, mode);
  out.logits = classify(out.z_fus, out.z_sub, p);
  if (trace) {
    trace->embedded = embedded;
    trace->encoded = encoded;
    trace->crossed = crossed;
    trace->fused = fused_views;
    trace->attended = attended;
    trace->fusion_tokens = fusion.fusion_tokens;
  }
  return out;
}

#define TSF_INSTANTIATE_MODEL(T)                                                                  \
  template class ModelParams<T>;                                                                  \
  template class GraphParams<T>;                                                                  \
  template AttentionOutput<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&,         \
                                                      const Tensor<T>&, const Tensor<T>&,         \
                                                      const Tensor<T>&, const Tensor<T>&,         \
                                                      std::size_t);                               \
  template ViewTokens<T> slice_embed<T>(const TrialView&, const GraphParams<T>&);                 \
  template ViewTokens<T> encode<T>(const ViewTokens<T>&, const GraphParams<T>&, Trace<T>*);       \
  template ViewTokens<T> cross_attend<T>(const ViewTokens<T>&, const GraphParams<T>&, Trace<T>*); \
  template std::vector<T> token_score<T>(const Tensor<T>&, const Tensor<T>&);                     \
  template T median<T>(std::vector<T>);                                                           \
  template std::vector<T> fusion_mask<T>(std::span<const T>, std::span<const T>);                 \
  template ViewTokens<T> token_fuse<T>(const ViewTokens<T>&, std::span<const T>,                  \
                                       std::span<const T>, FuseVariant, Trace<T>*);               \
  template ViewTokens<T> post_fuse_self_attend<T>(const ViewTokens<T>&, const GraphParams<T>&,    \
                                                  Trace<T>*);                                     \
  template std::pair<Tensor<T>, Tensor<T>> contrastive_heads<T>(const ViewTokens<T>&,             \
                                                                const GraphParams<T>&);           \
  template FusionOutput<T> fuse<T>(const ViewTokens<T>&, const GraphParams<T>&, Trace<T>*);       \
  template Tensor<T> adapt<T>(const Tensor<T>&, const GraphParams<T>&, Mode);                     \
  template Tensor<T> classify<T>(const Tensor<T>&, const std::optional<Tensor<T>>&,               \
                                 const GraphParams<T>&);                                          \
  template ForwardOutput<T> forward<T>(const TrialView&, const GraphParams<T>&, Mode, Trace<T>*);

TSF_INSTANTIATE_MODEL(float)
TSF_INSTANTIATE_MODEL(double)

#undef TSF_INSTANTIATE_MODEL

}  // namespace tsf::model
