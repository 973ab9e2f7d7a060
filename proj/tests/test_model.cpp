#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support.hpp"
#include "tsformer/error.hpp"
#include "tsformer/model.hpp"
#include "tsformer/pipeline.hpp"

using namespace tsf;
using namespace tsf::model;
using T64 = ad::Tensor<double>;

namespace {

struct Inputs {
  std::vector<float> temporal, spectral;
  TrialView view() const { return {temporal, spectral}; }
};

Inputs random_inputs(const ModelConfig& cfg, std::uint64_t seed) {
  Rng r(seed);
  Inputs in;
  in.temporal.resize(cfg.channels * cfg.samples);
  in.spectral.resize(cfg.scales * cfg.channels * cfg.samples);
  for (float& v : in.temporal) v = static_cast<float>(r.normal());
  for (float& v : in.spectral) v = static_cast<float>(r.normal());
  return in;
}

std::vector<double> vals(const T64& t) { return {t.values().begin(), t.values().end()}; }

T64 rows_of(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return T64::constant({rows.size(), rows.front().size()}, flat);
}

T64 permute_rows(const T64& x, const std::vector<std::size_t>& perm) {
  const std::size_t d = x.dim(1);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] = x.values()[perm[i] * d + c];
  return T64::constant(x.shape(), out);
}

}  // namespace

TEST_CASE("default configuration shapes") {
  const ModelConfig cfg;
  CHECK(cfg.tokens() == 50);
  CHECK(cfg.fusion_feature_dim() == 384);
  CHECK(cfg.contrast_feature_dim() == 96);
  CHECK(cfg.kernel_rows() == 16);
  CHECK(cfg.kernel_cols() == 16);

  const auto params = ModelParams<float>::init(cfg, 1);
  const GraphParams<float> g(params, {});
  std::vector<float> tem(cfg.channels * cfg.samples, 0.1f), spe(cfg.scales * cfg.channels * cfg.samples, 0.2f);
  for (std::size_t i = 0; i < tem.size(); ++i) tem[i] = static_cast<float>(std::sin(0.01 * i));
  for (std::size_t i = 0; i < spe.size(); ++i) spe[i] = static_cast<float>(std::cos(0.003 * i));
  Trace<float> trace;
  const auto out = forward<float>({tem, spe}, g, Mode::adapted, &trace);
  CHECK(trace.embedded->temporal.shape() == ad::Shape{50, 128});
  CHECK(trace.embedded->spectral.shape() == ad::Shape{50, 128});
  CHECK(trace.fusion_tokens->shape() == ad::Shape{50, 128});
  CHECK(out.z_fus.size() == 384);
  CHECK(out.z_sub->size() == 384);
  CHECK(out.z_tem.size() == 96);
  CHECK(out.z_spe.size() == 96);
  CHECK(out.logits.shape() == ad::Shape{2});
}

TEST_CASE("tiny configuration follows the scaled shape arithmetic") {
  const auto cfg = pipeline::tiny_config();
  CHECK(cfg.tokens() == 4);
  CHECK(cfg.kernel_rows() == 4);
  const auto params = ModelParams<double>::init(cfg, 3);
  const auto in = random_inputs(cfg, 4);
  const auto out = forward(in.view(), GraphParams<double>(params, {}), Mode::adapted);
  CHECK(out.z_fus.size() == cfg.fusion_feature_dim());
  CHECK(out.z_tem.size() == cfg.contrast_feature_dim());

  ModelConfig big;
  big.samples = 400;  // 80 tokens
  big.dim = 64;
  CHECK(big.fusion_feature_dim() == 16u * ((80 - 16) / 16 + 1) * ((64 - 8) / 8 + 1));
}

TEST_CASE("adapter parameter count at defaults") {
  const auto params = ModelParams<float>::init(ModelConfig{}, 1);
  CHECK(params.count(Group::adapter) == 16 * 16 * 16 + 384 * 2 + 2);
  CHECK(params.count() == params.count(Group::adapter) + params.count(Group::pretrainable));
  for (const auto& name : params.names(Group::adapter)) CHECK((name.starts_with("adapter.") || name.starts_with("classifier.")));
}

TEST_CASE("initialization follows the layout") {
  const ModelConfig cfg = pipeline::tiny_config();
  const auto p = ModelParams<double>::init(cfg, 5);
  for (const auto& spec : parameter_layout(cfg)) {
    const auto& e = p.at(spec.name);
    CHECK(e.values.size() == ad::numel(spec.shape));
    if (spec.init == Init::zeros)
      for (double v : e.values) CHECK(v == 0.0);
    if (spec.init == Init::ones)
      for (double v : e.values) CHECK(v == 1.0);
    if (spec.init == Init::fan_in_uniform) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (double v : e.values) CHECK(std::abs(v) <= bound);
    }
  }
  CHECK(ModelParams<double>::init(cfg, 5) == p);
  CHECK(!(ModelParams<double>::init(cfg, 6) == p));
  CHECK_THROWS_AS(p.at("nope"), ConfigError);
}

TEST_CASE("inconsistent geometry is rejected") {
  ModelConfig cfg;
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.samples = 251;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.dim = 12;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("every attention matrix is row-stochastic") {
  const auto cfg = pipeline::tiny_config();
  const auto p = ModelParams<double>::init(cfg, 9);
  const auto in = random_inputs(cfg, 10);
  Trace<double> trace;
  forward(in.view(), GraphParams<double>(p, {}), Mode::adapted, &trace);
  REQUIRE(!trace.attention.empty());
  for (const auto& w : trace.attention)
    for (std::size_t r = 0; r < w.dim(0); ++r) {
      double total = 0;
      for (std::size_t c = 0; c < w.dim(1); ++c) total += w.at({r, c});
      CHECK(std::abs(total - 1.0) <= 1e-5);
    }
}

TEST_CASE("forward is deterministic and the fresh adapter is neutral") {
  const auto cfg = pipeline::tiny_config();
  const auto p = ModelParams<double>::init(cfg, 11);
  const auto in = random_inputs(cfg, 12);
  const GraphParams<double> g(p, {});
  const auto a = forward(in.view(), g, Mode::adapted);
  const auto b = forward(in.view(), g, Mode::adapted);
  CHECK(vals(a.logits) == vals(b.logits));
  CHECK(vals(a.z_fus) == vals(b.z_fus));
  const auto c = forward(in.view(), g, Mode::pretrain);
  CHECK(!c.z_sub.has_value());
  CHECK(vals(c.logits) == vals(a.logits));
}

TEST_CASE("adapter stage throws in pretrain mode") {
  const auto cfg = pipeline::tiny_config();
  const auto p = ModelParams<double>::init(cfg, 1);
  const GraphParams<double> g(p, {});
  CHECK_THROWS_AS(adapt(T64::constant({cfg.tokens(), cfg.dim}, 1.0), g, Mode::pretrain), Error);
}

TEST_CASE("graph subset and trainable set") {
  const auto cfg = pipeline::tiny_config();
  const auto p = ModelParams<double>::init(cfg, 1);
  const std::set<std::string> subset{"adapter.conv", "classifier.sub", "classifier.bias", "classifier.fus"};
  const std::set<std::string> trainable{"adapter.conv", "classifier.sub", "classifier.bias"};
  const GraphParams<double> g(p, trainable, subset);
  CHECK(g["adapter.conv"].requires_grad());
  CHECK(!g["classifier.fus"].requires_grad());
  CHECK_THROWS(g["embed.tem.weight"]);
  CHECK_THROWS(GraphParams<double>(p, {"embed.tem.weight"}, subset));
  CHECK_THROWS(GraphParams<double>(p, {"bogus"}));
}

TEST_CASE("multi-head attention matches a direct evaluation") {
  const std::size_t n = 3, m = 4, d = 4, h = 2;
  const auto q = T64::constant({n, d}, test::random_vector(n * d, 1));
  const auto kv = T64::constant({m, d}, test::random_vector(m * d, 2));
  const auto wq = T64::constant({d, d}, test::random_vector(d * d, 3));
  const auto wk = T64::constant({d, d}, test::random_vector(d * d, 4));
  const auto wv = T64::constant({d, d}, test::random_vector(d * d, 5));
  const auto res = multi_head_attention(q, kv, wq, wk, wv, T64{}, h);
  CHECK(res.out.shape() == ad::Shape{n, d});
  CHECK(res.weights.size() == h);

  auto mm = [](const std::vector<double>& a, const std::vector<double>& b, std::size_t r, std::size_t k, std::size_t c) {
    std::vector<double> o(r * c, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t l = 0; l < k; ++l) o[i * c + j] += a[i * k + l] * b[l * c + j];
    return o;
  };
  const auto Q = mm(vals(q), vals(wq), n, d, d), K = mm(vals(kv), vals(wk), m, d, d), V = mm(vals(kv), vals(wv), m, d, d);
  const std::size_t dk = d / h;
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(m);
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t c = 0; c < dk; ++c) s[j] += Q[i * d + hh * dk + c] * K[j * d + hh * dk + c];
        s[j] /= std::sqrt(static_cast<double>(dk));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (double& v : s) z += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < dk; ++c) {
        double o = 0;
        for (std::size_t j = 0; j < m; ++j) o += s[j] / z * V[j * d + hh * dk + c];
        CHECK(res.out.at({i, hh * dk + c}) == doctest::Approx(o).epsilon(1e-12));
      }
    }
}

TEST_CASE("token scores are column sums of the attention map without the diagonal") {
  const std::size_t n = 5, d = 4;
  const auto x = T64::constant({n, d}, test::random_vector(n * d, 7));
  const auto w = T64::constant({d, d}, test::random_vector(d * d, 8));
  const auto scores = token_score(x, w);
  REQUIRE(scores.size() == n);
  std::vector<double> a(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t l = 0; l < d; ++l) s += x.at({i, k}) * w.at({k, l}) * x.at({j, l});
      a[i * n + j] = s / std::sqrt(static_cast<double>(d));
    }
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(a[i * n + j]);
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] = std::exp(a[i * n + j]) / z;
  }
  double all = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double expect = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) expect += a[j * n + i];
    CHECK(scores[i] == doctest::Approx(expect).epsilon(1e-12));
    all += scores[i];
  }
  double diag = 0;
  for (std::size_t i = 0; i < n; ++i) diag += a[i * n + i];
  CHECK(all + diag == doctest::Approx(static_cast<double>(n)));
}

TEST_CASE("median of odd and even lists") {
  CHECK(median<double>({3, 1, 2}) == 2.0);
  CHECK(median<double>({4, 1, 3, 2}) == 2.5);
  CHECK(median<double>({7}) == 7.0);
}

TEST_CASE("four-token fusion example") {
  const std::vector<double> st{1, 2, 3, 4}, ss{4, 3, 2, 1};
  CHECK(fusion_mask<double>(st, ss) == std::vector<double>{1, 1, 0, 0});
  CHECK(fusion_mask<double>(ss, st) == std::vector<double>{0, 0, 1, 1});

  const auto tem = rows_of({{1, 2}, {3, 4}, {5, 6}, {7, 8}});
  const auto spe = rows_of({{10, 20}, {30, 40}, {50, 60}, {70, 80}});
  Trace<double> trace;
  const auto out = token_fuse<double>({tem, spe}, st, ss, FuseVariant::literal, &trace);
  CHECK(vals(out.temporal) == std::vector<double>{5.5, 11, 16.5, 22, 2.5, 3, 3.5, 4});
  CHECK(vals(out.spectral) == std::vector<double>{5, 10, 15, 20, 27.5, 33, 38.5, 44});
  CHECK(trace.mask_temporal == std::vector<double>{1, 1, 0, 0});
  CHECK(trace.mask_spectral == std::vector<double>{0, 0, 1, 1});

  const auto avg = token_fuse<double>({tem, spe}, st, ss, FuseVariant::average_selected);
  CHECK(vals(avg.temporal) == std::vector<double>{5.5, 11, 16.5, 22, 5, 6, 7, 8});
  CHECK(vals(avg.spectral) == std::vector<double>{10, 20, 30, 40, 27.5, 33, 38.5, 44});
}

TEST_CASE("equal scores produce no replacement") {
  const std::vector<double> eq{0.5, 0.5, 0.5, 0.5};
  CHECK(fusion_mask<double>(eq, eq) == std::vector<double>(4, 0.0));
  const auto tem = rows_of({{1, 2}, {3, 4}, {5, 6}, {7, 8}});
  const auto spe = rows_of({{10, 20}, {30, 40}, {50, 60}, {70, 80}});
  const auto out = token_fuse<double>({tem, spe}, eq, eq, FuseVariant::average_selected);
  CHECK(vals(out.temporal) == vals(tem));
  CHECK(vals(out.spectral) == vals(spe));
}

TEST_CASE("with distinct scores at most half of each view is augmented") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng r(seed);
    const std::size_t n = 2 * (1 + r.below(10));
    std::vector<double> all(2 * n);
    std::iota(all.begin(), all.end(), 0.0);
    r.shuffle(all);
    const std::vector<double> st(all.begin(), all.begin() + static_cast<long>(n));
    const std::vector<double> ss(all.begin() + static_cast<long>(n), all.end());
    const auto mt = fusion_mask<double>(st, ss);
    const auto ms = fusion_mask<double>(ss, st);
    const double thr_t = median(st), thr_s = median(ss);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(mt[i] == ((st[i] < thr_t && ss[i] > thr_s) ? 1.0 : 0.0));
      CHECK(ms[i] == ((ss[i] < thr_s && st[i] > thr_t) ? 1.0 : 0.0));
    }
    CHECK(std::accumulate(mt.begin(), mt.end(), 0.0) <= static_cast<double>(n / 2));
    CHECK(std::accumulate(ms.begin(), ms.end(), 0.0) <= static_cast<double>(n / 2));
  }
}

TEST_CASE("encoder stack is permutation-equivariant over tokens") {
  auto cfg = pipeline::tiny_config();
  cfg.samples = 30;  // 6 tokens
  const auto p = ModelParams<double>::init(cfg, 21);
  const GraphParams<double> g(p, {});
  const std::size_t n = cfg.tokens(), d = cfg.dim;
  const auto tem = T64::constant({n, d}, test::random_vector(n * d, 1));
  const auto spe = T64::constant({n, d}, test::random_vector(n * d, 2));
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};

  const auto base = post_fuse_self_attend(cross_attend(encode<double>({tem, spe}, g), g), g);
  const auto moved = post_fuse_self_attend(
      cross_attend(encode<double>({permute_rows(tem, perm), permute_rows(spe, perm)}, g), g), g);
  CHECK(test::max_abs_diff(moved.temporal.values(), permute_rows(base.temporal, perm).values()) <= 1e-12);
  CHECK(test::max_abs_diff(moved.spectral.values(), permute_rows(base.spectral, perm).values()) <= 1e-12);
}

TEST_CASE("gradients reach every trainable tensor of the tiny model") {
  const auto cfg = pipeline::tiny_config();
  auto p = ModelParams<double>::init(cfg, 31);
  Rng r(4);
  for (const auto& name : p.names(Group::adapter))
    for (double& v : p.at(name).values) v = r.uniform(-0.3, 0.3);
  std::set<std::string> all;
  for (const auto& [name, _] : p.entries()) all.insert(name);
  const GraphParams<double> g(p, all);
  const auto in = random_inputs(cfg, 5);
  const auto out = forward(in.view(), g, Mode::adapted);
  ad::backward(ad::add(ad::sum(ad::mul(out.logits, out.logits)),
                       ad::add(ad::sum(ad::mul(out.z_tem, out.z_tem)), ad::sum(ad::mul(out.z_spe, out.z_spe)))));
  const auto grads = g.grads();
  CHECK(grads.size() == all.size());
  std::size_t nonzero = 0;
  for (const auto& [name, gv] : grads) {
    bool any = false;
    for (double v : gv) any = any || v != 0.0;
    nonzero += any;
  }
  // The positional matrices and score matrices only affect the output through
  // the fusion mask (score) or directly (pos); everything but score.* must move.
  CHECK(nonzero >= all.size() - 2);
}
