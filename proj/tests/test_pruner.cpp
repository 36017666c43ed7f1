#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "selfprune/engine.hpp"
#include "selfprune/model.hpp"
#include "selfprune/pruner.hpp"

using namespace selfprune;

namespace {

ActivationStats make_stats(const Model& m, std::mt19937& eng) {
  std::uniform_real_distribution<double> dist(0.1, 2.0);
  ActivationStats s;
  s.token_count = 1;
  s.layers.resize(m.layers.size());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    s.layers[l].attn_input_norms.resize(static_cast<std::size_t>(m.spec.d_model));
    s.layers[l].ffn_input_norms.resize(static_cast<std::size_t>(m.spec.d_model));
    s.layers[l].ffn_mid_norms.resize(static_cast<std::size_t>(m.layers[l].d_ff));
    for (double& v : s.layers[l].attn_input_norms) v = dist(eng);
    for (double& v : s.layers[l].ffn_input_norms) v = dist(eng);
    for (double& v : s.layers[l].ffn_mid_norms) v = dist(eng);
  }
  return s;
}

// Exhaustive best-sum subset of `keep` units; the optimum under additive
// scores is unique when all scores differ.
std::vector<int> brute_force_kept(const std::vector<double>& scores, int keep) {
  const int n = static_cast<int>(scores.size());
  std::vector<int> best;
  double best_sum = -1.0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (__builtin_popcount(mask) != keep) continue;
    double sum = 0.0;
    std::vector<int> members;
    for (int i = 0; i < n; ++i) {
      if (mask & (1u << i)) {
        sum += scores[static_cast<std::size_t>(i)];
        members.push_back(i);
      }
    }
    if (sum > best_sum) {
      best_sum = sum;
      best = members;
    }
  }
  return best;
}

std::vector<double> scores_of(const std::vector<UnitScore>& units, UnitKind kind) {
  std::vector<double> out;
  for (const UnitScore& u : units)
    if (u.kind == kind) out.push_back(u.score);
  return out;
}

}  // namespace

TEST_CASE("ffn channel score matches the worked example") {
  // d_model 2, one channel: w_up column (1, -2) against input norms (2, 1)
  // gives 4; w_down row (3, 0) against mid norm 0.5 gives 1.5; total 5.5.
  const ModelSpec spec = ModelSpec::create(1, 2, 1, 1, 3, 4);
  Model m = init_random_model(spec, 1);
  m.layers[0].w_up.at(0, 0) = 1.0f;
  m.layers[0].w_up.at(1, 0) = -2.0f;
  m.layers[0].w_down.at(0, 0) = 3.0f;
  m.layers[0].w_down.at(0, 1) = 0.0f;
  ActivationStats stats;
  stats.layers.resize(1);
  stats.layers[0].attn_input_norms = {1.0, 1.0};
  stats.layers[0].ffn_input_norms = {2.0, 1.0};
  stats.layers[0].ffn_mid_norms = {0.5};

  const auto units = wanda_sp_unit_scores(m, stats, 0);
  REQUIRE(units.size() == 2);  // one head, one channel
  CHECK(units[1].kind == UnitKind::ffn_channel);
  CHECK(units[1].unit_index == 0);
  CHECK(units[1].score == 5.5);
}

TEST_CASE("head score matches the worked example") {
  // one head over d_model 2: w_q contributes |1|*3 + |2|*1 = 5, w_k is zero,
  // w_v contributes |1|*3 + |1|*1 = 4, w_o rows contribute (1+1)*3 + (2+0)*1
  // = 8; total 17.
  const ModelSpec spec = ModelSpec::create(1, 2, 1, 1, 3, 4);
  Model m = init_random_model(spec, 1);
  LayerWeights& l = m.layers[0];
  l.w_q.at(0, 0) = 1.0f;  l.w_q.at(0, 1) = 0.0f;
  l.w_q.at(1, 0) = 0.0f;  l.w_q.at(1, 1) = 2.0f;
  std::fill(l.w_k.data.begin(), l.w_k.data.end(), 0.0f);
  l.w_v.at(0, 0) = 0.0f;  l.w_v.at(0, 1) = 1.0f;
  l.w_v.at(1, 0) = 1.0f;  l.w_v.at(1, 1) = 0.0f;
  l.w_o.at(0, 0) = 1.0f;  l.w_o.at(0, 1) = 1.0f;
  l.w_o.at(1, 0) = 2.0f;  l.w_o.at(1, 1) = 0.0f;
  ActivationStats stats;
  stats.layers.resize(1);
  stats.layers[0].attn_input_norms = {3.0, 1.0};
  stats.layers[0].ffn_input_norms = {1.0, 1.0};
  stats.layers[0].ffn_mid_norms = {1.0};

  const auto units = wanda_sp_unit_scores(m, stats, 0);
  REQUIRE(units.size() == 2);
  CHECK(units[0].kind == UnitKind::head);
  CHECK(units[0].score == 17.0);
}

TEST_CASE("unit scores reject mismatched stats shapes") {
  const ModelSpec spec = ModelSpec::create(2, 4, 2, 3, 5, 4);
  const Model m = init_random_model(spec, 1);
  ActivationStats stats;
  stats.layers.resize(1);  // wrong layer count
  CHECK_THROWS_AS(wanda_sp_unit_scores(m, stats, 0), std::invalid_argument);
  stats.layers.resize(2);
  for (auto& l : stats.layers) {
    l.attn_input_norms.assign(4, 1.0);
    l.ffn_input_norms.assign(4, 1.0);
    l.ffn_mid_norms.assign(2, 1.0);  // d_ff is 3
  }
  CHECK_THROWS_AS(wanda_sp_unit_scores(m, stats, 0), std::invalid_argument);
  stats.layers[0].ffn_mid_norms.assign(3, 1.0);
  stats.layers[1].ffn_mid_norms.assign(3, 1.0);
  CHECK_NOTHROW(wanda_sp_unit_scores(m, stats, 0));
  CHECK_THROWS_AS(wanda_sp_unit_scores(m, stats, 2), std::invalid_argument);
}

TEST_CASE("rate_to_counts rounds halves down") {
  CHECK(rate_to_counts(0.0, 4) == 0);
  CHECK(rate_to_counts(1.0, 4) == 4);
  CHECK(rate_to_counts(0.3, 4) == 1);    // 1.2 rounds to 1
  CHECK(rate_to_counts(0.5, 4) == 2);    // exact 2.0
  CHECK(rate_to_counts(0.625, 4) == 2);  // 2.5 rounds down
  CHECK(rate_to_counts(0.25, 2) == 0);   // 0.5 rounds down
  CHECK(rate_to_counts(0.75, 2) == 1);   // 1.5 rounds down
  CHECK(rate_to_counts(0.5, 1) == 0);    // 0.5 rounds down
  CHECK(rate_to_counts(0.51, 1) == 1);
  CHECK(rate_to_counts(0.3, 0) == 0);
  CHECK_THROWS_AS(rate_to_counts(-0.1, 4), std::invalid_argument);
  CHECK_THROWS_AS(rate_to_counts(1.1, 4), std::invalid_argument);
  CHECK_THROWS_AS(rate_to_counts(0.5, -1), std::invalid_argument);
}

TEST_CASE("equal scores remove the lower unit index first") {
  const ModelSpec spec = ModelSpec::create(1, 4, 2, 4, 5, 4);
  Model m = init_random_model(spec, 3);
  LayerWeights& l = m.layers[0];
  // make head 1's blocks a copy of head 0's so their scores tie
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 2; ++c) {
      l.w_q.at(r, 2 + c) = l.w_q.at(r, c);
      l.w_k.at(r, 2 + c) = l.w_k.at(r, c);
      l.w_v.at(r, 2 + c) = l.w_v.at(r, c);
    }
  }
  std::memcpy(l.w_o.row(2), l.w_o.row(0), 2 * 4 * sizeof(float));
  // make all four ffn channels identical
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 1; c < 4; ++c) l.w_up.at(r, c) = l.w_up.at(r, 0);
  for (std::size_t c = 1; c < 4; ++c)
    std::memcpy(l.w_down.row(c), l.w_down.row(0), 4 * sizeof(float));

  ActivationStats stats;
  stats.layers.resize(1);
  stats.layers[0].attn_input_norms.assign(4, 1.0);
  stats.layers[0].ffn_input_norms.assign(4, 1.0);
  stats.layers[0].ffn_mid_norms.assign(4, 1.0);

  const PrunePlan p = plan(m, stats, PruningConfig({0.5}, 0.5));
  CHECK(p.layers[0].kept_heads == std::vector<int>{1});
  CHECK(p.layers[0].kept_ffn_channels == std::vector<int>{2, 3});
}

TEST_CASE("plan keeps exactly the brute-force best subsets") {
  std::mt19937 eng(51);
  std::uniform_int_distribution<int> head_dist(1, 4);
  std::uniform_int_distribution<int> ff_dist(1, 6);
  std::uniform_real_distribution<double> rate_dist(0.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    const int heads = head_dist(eng);
    const int ff = ff_dist(eng);
    const ModelSpec spec = ModelSpec::create(1, 2 * heads, heads, ff, 5, 4);
    const Model m = init_random_model(spec, 1000 + static_cast<std::uint64_t>(trial));
    const ActivationStats stats = make_stats(m, eng);
    const double rate = rate_dist(eng);
    const PrunePlan p = plan(m, stats, PruningConfig({rate}, rate));

    const auto units = wanda_sp_unit_scores(m, stats, 0);
    const auto head_scores = scores_of(units, UnitKind::head);
    const auto ffn_scores = scores_of(units, UnitKind::ffn_channel);
    const int keep_heads = heads - rate_to_counts(rate, heads);
    const int keep_ffn = ff - rate_to_counts(rate, ff);
    CAPTURE(trial);
    CHECK(p.layers[0].kept_heads == brute_force_kept(head_scores, keep_heads));
    CHECK(p.layers[0].kept_ffn_channels == brute_force_kept(ffn_scores, keep_ffn));
  }
}

TEST_CASE("uniform stat scaling leaves the plan unchanged") {
  std::mt19937 eng(77);
  const ModelSpec spec = ModelSpec::create(2, 8, 4, 6, 9, 4);
  const Model m = init_random_model(spec, 4);
  ActivationStats stats = make_stats(m, eng);
  const PrunePlan p1 = plan(m, stats, PruningConfig({0.4, 0.6}, 0.5));
  for (auto& l : stats.layers) {
    for (double& v : l.attn_input_norms) v *= 7.25;
    for (double& v : l.ffn_input_norms) v *= 7.25;
    for (double& v : l.ffn_mid_norms) v *= 7.25;
  }
  const PrunePlan p2 = plan(m, stats, PruningConfig({0.4, 0.6}, 0.5));
  for (int l = 0; l < 2; ++l) {
    CHECK(p1.layers[l].kept_heads == p2.layers[l].kept_heads);
    CHECK(p1.layers[l].kept_ffn_channels == p2.layers[l].kept_ffn_channels);
  }
}

TEST_CASE("channel permutation permutes the scores with it") {
  std::mt19937 eng(78);
  const ModelSpec spec = ModelSpec::create(1, 4, 2, 5, 7, 4);
  const Model m = init_random_model(spec, 5);
  ActivationStats stats = make_stats(m, eng);
  const auto base_units = wanda_sp_unit_scores(m, stats, 0);
  const auto base_ffn = scores_of(base_units, UnitKind::ffn_channel);

  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Model pm = m;
  ActivationStats pstats = stats;
  for (std::size_t newc = 0; newc < perm.size(); ++newc) {
    const std::size_t oldc = perm[newc];
    for (std::size_t r = 0; r < 4; ++r) pm.layers[0].w_up.at(r, newc) = m.layers[0].w_up.at(r, oldc);
    std::memcpy(pm.layers[0].w_down.row(newc), m.layers[0].w_down.row(oldc), 4 * sizeof(float));
    pstats.layers[0].ffn_mid_norms[newc] = stats.layers[0].ffn_mid_norms[oldc];
  }
  const auto perm_units = wanda_sp_unit_scores(pm, pstats, 0);
  const auto perm_ffn = scores_of(perm_units, UnitKind::ffn_channel);
  for (std::size_t newc = 0; newc < perm.size(); ++newc)
    CHECK(perm_ffn[newc] == base_ffn[perm[newc]]);
}

TEST_CASE("apply slices the kept blocks verbatim") {
  std::mt19937 eng(79);
  const ModelSpec spec = ModelSpec::create(1, 8, 4, 6, 9, 4);
  const Model m = init_random_model(spec, 6);
  const ActivationStats stats = make_stats(m, eng);
  const PrunePlan p = plan(m, stats, PruningConfig({0.5}, 0.5));
  const Model pruned = apply(m, p);

  REQUIRE(p.layers[0].kept_heads.size() == 2);
  REQUIRE(p.layers[0].kept_ffn_channels.size() == 3);
  CHECK(pruned.layers[0].n_heads == 2);
  CHECK(pruned.layers[0].d_ff == 3);
  CHECK(pruned.token_embedding == m.token_embedding);
  CHECK(pruned.layers[0].attn_norm == m.layers[0].attn_norm);

  const std::size_t hd = 2;
  for (std::size_t slot = 0; slot < 2; ++slot) {
    const std::size_t h = static_cast<std::size_t>(p.layers[0].kept_heads[slot]);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t d = 0; d < hd; ++d) {
        CHECK(pruned.layers[0].w_q.at(r, slot * hd + d) == m.layers[0].w_q.at(r, h * hd + d));
        CHECK(pruned.layers[0].w_v.at(r, slot * hd + d) == m.layers[0].w_v.at(r, h * hd + d));
      }
    for (std::size_t d = 0; d < hd; ++d)
      for (std::size_t c = 0; c < 8; ++c)
        CHECK(pruned.layers[0].w_o.at(slot * hd + d, c) == m.layers[0].w_o.at(h * hd + d, c));
  }
  for (std::size_t slot = 0; slot < 3; ++slot) {
    const std::size_t c = static_cast<std::size_t>(p.layers[0].kept_ffn_channels[slot]);
    for (std::size_t r = 0; r < 8; ++r)
      CHECK(pruned.layers[0].w_up.at(r, slot) == m.layers[0].w_up.at(r, c));
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(pruned.layers[0].w_down.at(slot, j) == m.layers[0].w_down.at(c, j));
  }
}

TEST_CASE("rate zero is the identity and keeps logits bit-for-bit") {
  std::mt19937 eng(80);
  const ModelSpec spec = ModelSpec::create(2, 8, 2, 6, 9, 8);
  const Model m = init_random_model(spec, 7);
  const ActivationStats stats = make_stats(m, eng);
  const PrunePlan p = plan(m, stats, PruningConfig({0.0, 0.0}, 0.0));
  const Model pruned = apply(m, p);
  CHECK(pruned == m);
  const std::vector<std::uint32_t> toks{1, 4, 0, 8, 3, 2, 7, 5};
  const Matrix a = logits(m, toks);
  const Matrix b = logits(pruned, toks);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("rate one empties every layer and the model still runs") {
  std::mt19937 eng(81);
  const ModelSpec spec = ModelSpec::create(2, 8, 2, 6, 9, 8);
  const Model m = init_random_model(spec, 8);
  const ActivationStats stats = make_stats(m, eng);
  const Model pruned = apply(m, plan(m, stats, PruningConfig({1.0, 1.0}, 1.0)));
  CHECK(pruned.layers[0].n_heads == 0);
  CHECK(pruned.layers[0].d_ff == 0);
  CHECK(block_param_count(pruned) == 0);
  const Matrix lg = logits(pruned, std::vector<std::uint32_t>{1, 2});
  CHECK(lg.rows == 2);
}

TEST_CASE("plan and apply reject mismatched inputs") {
  std::mt19937 eng(82);
  const ModelSpec spec = ModelSpec::create(2, 8, 2, 6, 9, 4);
  const Model m = init_random_model(spec, 9);
  const ActivationStats stats = make_stats(m, eng);
  CHECK_THROWS_AS(plan(m, stats, PruningConfig({0.5}, 0.5)), std::invalid_argument);

  PrunePlan p = plan(m, stats, PruningConfig({0.5, 0.5}, 0.5));
  PrunePlan bad = p;
  bad.layers[0].kept_heads = {0, 5};
  CHECK_THROWS_AS(apply(m, bad), std::invalid_argument);
  bad = p;
  bad.layers[0].heads_before = 7;
  CHECK_THROWS_AS(apply(m, bad), std::invalid_argument);
  bad = p;
  bad.layers.pop_back();
  CHECK_THROWS_AS(apply(m, bad), std::invalid_argument);
}

TEST_CASE("plan_to_json carries the keep decisions") {
  std::mt19937 eng(83);
  const ModelSpec spec = ModelSpec::create(2, 8, 4, 6, 9, 4);
  const Model m = init_random_model(spec, 10);
  const ActivationStats stats = make_stats(m, eng);
  const PrunePlan p = plan(m, stats, PruningConfig({0.5, 0.25}, 0.375));
  const nlohmann::json j = plan_to_json(p);
  CHECK(j.at("schema_version") == "selfprune-plan-v1");
  REQUIRE(j.at("layers").size() == 2);
  CHECK(j.at("layers")[0].at("heads_before") == 4);
  CHECK(j.at("layers")[0].at("heads_removed") == 2);
  CHECK(j.at("layers")[1].at("heads_removed") == 1);
  const auto kept = j.at("layers")[0].at("kept_heads").get<std::vector<int>>();
  CHECK(kept == p.layers[0].kept_heads);
}
