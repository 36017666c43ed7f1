#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "selfprune/engine.hpp"
#include "selfprune/evolution.hpp"
#include "selfprune/model.hpp"
#include "selfprune/pruner.hpp"

using namespace selfprune;

namespace {

std::filesystem::path temp_file(const std::string& tag) {
  static std::atomic<int> counter{0};
  return std::filesystem::temp_directory_path() /
         ("selfprune_evo_" + tag + "_" + std::to_string(counter++));
}

struct Fixture {
  Model model;
  ActivationStats stats;
  TokenCorpus corpus;
};

const Fixture& fix() {
  static const Fixture f = [] {
    Fixture x;
    x.model = init_random_model(ModelSpec::create(2, 8, 2, 6, 16, 16), 3);
    x.corpus = generate_corpus(16, 96, 4, "fit");
    x.stats = collect_activation_stats(x.model, x.corpus, 8);
    return x;
  }();
  return f;
}

EvalContext ctx_for(const Fixture& f, int jobs = 1) {
  EvalContext c;
  c.dense = &f.model;
  c.stats = &f.stats;
  c.fitness_corpus = &f.corpus;
  c.seq_len = 8;
  c.jobs = jobs;
  return c;
}

// Returns pre-programmed config lists call by call and records how it was
// asked, mirroring the chat operator's origin mapping.
struct ScriptedOperator : Operator {
  std::vector<std::vector<PruningConfig>> scripts;
  std::size_t calls = 0;
  std::vector<OperatorKind> kinds;
  std::vector<std::size_t> parent_sizes;
  std::vector<int> counts;

  ProposeResult propose(OperatorKind kind, const std::vector<ScoredConfig>& parents, int count,
                        int, double, CountingRng&) override {
    kinds.push_back(kind);
    parent_sizes.push_back(parents.size());
    counts.push_back(count);
    ProposeResult r;
    if (calls < scripts.size()) r.configs = scripts[calls];
    ++calls;
    return r;
  }
  Origin origin_for(OperatorKind kind) const override {
    switch (kind) {
      case OperatorKind::init: return Origin::init;
      case OperatorKind::mutation: return Origin::mutation;
      case OperatorKind::crossover: return Origin::crossover;
    }
    return Origin::fallback;
  }
};

Hyper hyper(int K, int M, int S, int N, int n_layers, std::uint64_t seed, double beta = 0.3) {
  Hyper h;
  h.K = K;
  h.M = M;
  h.S = S;
  h.N = N;
  h.beta = beta;
  h.seed = seed;
  h.n_layers = n_layers;
  return h;
}

}  // namespace

TEST_CASE("counting rng replays from its draw count") {
  CountingRng a(7);
  CHECK(a.draws() == 0);
  for (int i = 0; i < 5; ++i) {
    const double u = a.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  (void)a.normal(0.05);
  CHECK(a.draws() == 7);  // five uniforms plus two draws for the normal
  const double next = a.uniform();
  CountingRng b = CountingRng::restore(7, 7);
  CHECK(b.uniform() == next);
  CHECK(b.draws() == 8);
}

TEST_CASE("fitness_of is prune-then-perplexity") {
  const Fixture& f = fix();
  const EvalContext ctx = ctx_for(f);
  const PruningConfig cfg({0.4, 0.6}, 0.5);
  const Model pruned = apply(f.model, plan(f.model, f.stats, cfg));
  const double expect = perplexity(pruned, f.corpus, 8).perplexity;
  CHECK(fitness_of(ctx, cfg) == expect);
}

TEST_CASE("fitness_of maps a broken model to the sentinel") {
  const Fixture& f = fix();
  Model broken = f.model;
  broken.token_embedding.at(0, 0) = std::numeric_limits<float>::quiet_NaN();
  EvalContext ctx = ctx_for(f);
  ctx.dense = &broken;
  CHECK(fitness_of(ctx, PruningConfig({0.0, 0.0}, 0.0)) == kWorstFitness);
}

TEST_CASE("initialize fills K distinct configs with the uniform baseline first") {
  SearchState state(hyper(6, 2, 2, 3, 3, 42));
  FallbackOperator fb;
  initialize(state, fb, fb);
  REQUIRE(state.population.size() == 6);
  CHECK(state.population[0].config.canonical() == uniform_config(3, 0.3).canonical());
  std::set<std::string> seen;
  for (const auto& ind : state.population) {
    CHECK(ind.origin == Origin::fallback);
    CHECK(ind.generation_born == 0);
    CHECK_FALSE(ind.fitness.has_value());
    CHECK(validate(ind.config.rates(), 0.3).ok);
    CHECK(seen.insert(ind.config.canonical()).second);
  }
  CHECK(state.pending.fallback_offspring == 6);
  CHECK(state.pending.llm_offspring == 0);

  SearchState again(hyper(6, 2, 2, 3, 3, 42));
  initialize(again, fb, fb);
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(again.population[i].config.canonical() == state.population[i].config.canonical());
}

TEST_CASE("initialize takes scripted proposals and tops up the shortfall") {
  ScriptedOperator op;
  op.scripts = {{
                    PruningConfig({0.3, 0.3, 0.3}, 0.3),  // duplicate of the baseline
                    PruningConfig({0.1, 0.3, 0.5}, 0.3),
                    PruningConfig({0.2, 0.3, 0.4}, 0.3),
                    PruningConfig({0.0, 0.4, 0.5}, 0.3),
                },
                {}};
  SearchState state(hyper(6, 2, 2, 3, 3, 1));
  FallbackOperator fb;
  initialize(state, op, fb);

  REQUIRE(state.population.size() == 6);
  CHECK(op.calls == 2);
  CHECK(op.kinds == std::vector<OperatorKind>{OperatorKind::init, OperatorKind::init});
  CHECK(op.counts == std::vector<int>{6, 2});
  CHECK(op.parent_sizes == std::vector<std::size_t>{0, 0});
  CHECK(state.population[0].origin == Origin::fallback);
  for (std::size_t i = 1; i <= 3; ++i) CHECK(state.population[i].origin == Origin::init);
  for (std::size_t i = 4; i <= 5; ++i) CHECK(state.population[i].origin == Origin::fallback);
  CHECK(state.population[1].config.canonical() == "[0.10000, 0.30000, 0.50000]");
  CHECK(state.pending.llm_offspring == 3);
  CHECK(state.pending.fallback_offspring == 3);
  std::set<std::string> seen;
  for (const auto& ind : state.population) CHECK(seen.insert(ind.config.canonical()).second);
}

TEST_CASE("initialize pads with baseline copies when distinctness runs out") {
  // a single layer admits exactly one feasible genome
  SearchState state(hyper(4, 1, 1, 1, 1, 2));
  FallbackOperator fb;
  initialize(state, fb, fb);
  REQUIRE(state.population.size() == 4);
  for (const auto& ind : state.population) {
    CHECK(ind.config.canonical() == "[0.30000]");
    CHECK(ind.origin == Origin::fallback);
  }
  CHECK(state.pending.fallback_offspring == 4);
}

TEST_CASE("initialize rejects bad hyperparameters") {
  FallbackOperator fb;
  SearchState a(hyper(0, 1, 1, 1, 2, 3));
  CHECK_THROWS_AS(initialize(a, fb, fb), std::invalid_argument);
  SearchState b(hyper(3, 1, 1, 1, 0, 3));
  CHECK_THROWS_AS(initialize(b, fb, fb), std::invalid_argument);
}

TEST_CASE("evaluate caches by canonical config and fills the history row") {
  const Fixture& f = fix();
  SearchState state(hyper(3, 1, 1, 1, 2, 5));
  state.population.push_back({PruningConfig({0.2, 0.4}, 0.3), std::nullopt, Origin::fallback, 0});
  state.population.push_back({PruningConfig({0.4, 0.2}, 0.3), std::nullopt, Origin::init, 0});
  state.population.push_back({PruningConfig({0.2, 0.4}, 0.3), std::nullopt, Origin::fallback, 0});
  state.pending.llm_offspring = 1;
  state.pending.fallback_offspring = 2;

  evaluate(state, ctx_for(f));
  REQUIRE(state.history.size() == 1);
  const GenRecord& rec = state.history[0];
  CHECK(rec.generation == 0);
  CHECK(rec.evaluations == 2);  // the duplicate rides the cache
  CHECK(rec.llm_offspring == 1);
  CHECK(rec.fallback_offspring == 2);
  CHECK(state.pending.llm_offspring == 0);

  const double fa = state.fitness_cache.at("[0.20000, 0.40000]");
  const double fb_ = state.fitness_cache.at("[0.40000, 0.20000]");
  CHECK(*state.population[0].fitness == fa);
  CHECK(*state.population[2].fitness == fa);
  CHECK(rec.best_fitness == std::min(fa, fb_));
  CHECK(rec.mean_fitness == (fa + fb_ + fa) / 3.0);

  for (auto& ind : state.population) ind.fitness.reset();
  evaluate(state, ctx_for(f));
  REQUIRE(state.history.size() == 2);
  CHECK(state.history[1].evaluations == 0);
}

TEST_CASE("evaluate results do not depend on the job count") {
  const Fixture& f = fix();
  SearchState base(hyper(8, 2, 2, 2, 2, 21));
  FallbackOperator fb;
  initialize(base, fb, fb);
  SearchState serial = base;
  SearchState threaded = base;
  evaluate(serial, ctx_for(f, 1));
  evaluate(threaded, ctx_for(f, 4));
  CHECK(states_equal(serial, threaded));
  CHECK(serial.fitness_cache == threaded.fitness_cache);
}

TEST_CASE("evaluate rejects an empty population or missing context") {
  const Fixture& f = fix();
  SearchState state(hyper(3, 1, 1, 1, 2, 5));
  CHECK_THROWS_AS(evaluate(state, ctx_for(f)), std::logic_error);
  state.population.push_back({PruningConfig({0.3, 0.3}, 0.3), std::nullopt, Origin::fallback, 0});
  EvalContext bad = ctx_for(f);
  bad.stats = nullptr;
  CHECK_THROWS_AS(evaluate(state, bad), std::invalid_argument);
}

TEST_CASE("select_top_k orders by fitness, then age, then canonical") {
  auto ind = [](std::vector<double> rates, double fit, int born) {
    Individual i;
    i.config = PruningConfig(std::move(rates), 0.3);
    i.fitness = fit;
    i.generation_born = born;
    return i;
  };
  std::vector<Individual> pop;
  pop.push_back(ind({0.4, 0.2}, 1.0, 1));
  pop.push_back(ind({0.3, 0.3}, 2.0, 0));
  pop.push_back(ind({0.2, 0.4}, 1.0, 0));
  pop.push_back(ind({0.1, 0.5}, 1.0, 1));

  const auto top = select_top_k(pop, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].config.canonical() == "[0.20000, 0.40000]");  // fit 1.0, born 0
  CHECK(top[1].config.canonical() == "[0.10000, 0.50000]");  // born 1, smaller text
  CHECK(top[2].config.canonical() == "[0.40000, 0.20000]");
  CHECK_THROWS_AS(select_top_k(pop, 0), std::invalid_argument);
  pop[0].fitness.reset();
  CHECK_THROWS_AS(select_top_k(pop, 2), std::logic_error);
}

TEST_CASE("step breeds scripted offspring with the right bookkeeping") {
  const Fixture& f = fix();
  SearchState state(hyper(4, 2, 2, 3, 2, 5));
  FallbackOperator fb;
  initialize(state, fb, fb);

  ScriptedOperator op;
  op.scripts = {{PruningConfig({0.05, 0.55}, 0.3), PruningConfig({0.15, 0.45}, 0.3)},
                {PruningConfig({0.25, 0.35}, 0.3), PruningConfig({0.02, 0.58}, 0.3)}};
  step(state, op, fb, ctx_for(f));

  CHECK(state.generation == 1);
  REQUIRE(state.population.size() == 8);
  CHECK(op.kinds ==
        std::vector<OperatorKind>{OperatorKind::mutation, OperatorKind::crossover});
  CHECK(op.counts == std::vector<int>{2, 2});
  CHECK(op.parent_sizes == std::vector<std::size_t>{4, 4});

  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(state.population[i].fitness.has_value());
    CHECK(state.population[i].generation_born == 0);
    if (i > 0) CHECK(*state.population[i - 1].fitness <= *state.population[i].fitness);
  }
  CHECK(state.population[4].origin == Origin::mutation);
  CHECK(state.population[5].origin == Origin::mutation);
  CHECK(state.population[6].origin == Origin::crossover);
  CHECK(state.population[7].origin == Origin::crossover);
  for (std::size_t i = 4; i < 8; ++i) {
    CHECK(state.population[i].generation_born == 1);
    CHECK_FALSE(state.population[i].fitness.has_value());
  }
  CHECK(state.pending.llm_offspring == 4);
  CHECK(state.pending.fallback_offspring == 0);

  // the next evaluate lands those counts in generation 1's history row
  evaluate(state, ctx_for(f));
  CHECK(state.history.back().generation == 1);
  CHECK(state.history.back().llm_offspring == 4);
  CHECK(state.history.back().evaluations == 4);
}

TEST_CASE("step tops up with fallback offspring when the operator goes quiet") {
  const Fixture& f = fix();
  SearchState state(hyper(4, 2, 2, 3, 2, 6));
  FallbackOperator fb;
  initialize(state, fb, fb);

  ScriptedOperator op;  // no scripts: every proposal comes back empty
  step(state, op, fb, ctx_for(f));
  REQUIRE(state.population.size() == 8);
  for (std::size_t i = 4; i < 8; ++i) CHECK(state.population[i].origin == Origin::fallback);
  CHECK(state.pending.llm_offspring == 0);
  CHECK(state.pending.fallback_offspring == 4);
  CHECK(op.calls == 2);
}

TEST_CASE("a full run keeps the best fitness non-increasing and bounded work") {
  const Fixture& f = fix();
  SearchState state(hyper(5, 3, 3, 4, 2, 9));
  FallbackOperator op;
  const RunResult res = run(state, op, ctx_for(f));

  REQUIRE(state.history.size() == 5);  // generations 0..4
  for (std::size_t g = 1; g < state.history.size(); ++g) {
    CHECK(state.history[g].best_fitness <= state.history[g - 1].best_fitness);
    CHECK(state.history[g].evaluations <= 3 + 3);
  }
  CHECK(state.history[0].evaluations <= 5);
  CHECK(*res.best.fitness == state.history.back().best_fitness);
  CHECK(res.best.fitness.has_value());
  CHECK(validate(res.best.config.rates(), 0.3).ok);
}

TEST_CASE("m and s at zero freeze the population after generation zero") {
  const Fixture& f = fix();
  SearchState state(hyper(4, 0, 0, 3, 2, 12));
  FallbackOperator op;
  run(state, op, ctx_for(f));
  REQUIRE(state.history.size() == 4);
  CHECK(state.population.size() == 4);
  for (std::size_t g = 1; g < state.history.size(); ++g) {
    CHECK(state.history[g].best_fitness == state.history[0].best_fitness);
    CHECK(state.history[g].llm_offspring == 0);
    CHECK(state.history[g].fallback_offspring == 0);
    CHECK(state.history[g].evaluations == 0);
  }
}

TEST_CASE("identical seeds give bitwise identical runs") {
  const Fixture& f = fix();
  SearchState a(hyper(5, 2, 2, 3, 2, 77));
  SearchState b(hyper(5, 2, 2, 3, 2, 77));
  FallbackOperator op;
  const RunResult ra = run(a, op, ctx_for(f));
  const RunResult rb = run(b, op, ctx_for(f));
  CHECK(states_equal(a, b));
  CHECK(ra.best.config.canonical() == rb.best.config.canonical());
  CHECK(*ra.best.fitness == *rb.best.fitness);
}

TEST_CASE("checkpoints round trip exactly") {
  const Fixture& f = fix();
  SearchState state(hyper(4, 2, 2, 5, 2, 31));
  FallbackOperator op;
  initialize(state, op, op);
  step(state, op, op, ctx_for(f));
  step(state, op, op, ctx_for(f));  // leaves pending counts and history rows behind

  const auto path = temp_file("ckpt");
  checkpoint_save(state, path);
  const SearchState loaded = checkpoint_load(path);
  CHECK(states_equal(state, loaded));
  CHECK(loaded.rng.draws() == state.rng.draws());
  CHECK(loaded.generation == 2);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint_load rejects a foreign schema version") {
  SearchState state(hyper(2, 1, 1, 1, 2, 1));
  FallbackOperator op;
  initialize(state, op, op);
  const auto path = temp_file("schema");
  checkpoint_save(state, path);
  nlohmann::json j;
  {
    std::ifstream is(path);
    is >> j;
  }
  j["schema_version"] = "selfprune-checkpoint-v0";
  {
    std::ofstream os(path);
    os << j.dump(2);
  }
  CHECK_THROWS_WITH_AS(checkpoint_load(path), doctest::Contains("schema"), std::runtime_error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(checkpoint_load(path), std::runtime_error);  // now missing entirely
}

TEST_CASE("resuming from a checkpoint matches the uninterrupted run") {
  const Fixture& f = fix();
  const Hyper h = hyper(5, 3, 3, 6, 2, 11);
  const auto path = temp_file("resume");

  SearchState full(h);
  FallbackOperator op;
  const StateHook hook = [&](const SearchState& s) {
    if (s.generation == 3) checkpoint_save(s, path);
  };
  const RunResult r_full = run(full, op, ctx_for(f), hook);

  SearchState resumed = checkpoint_load(path);
  FallbackOperator op2;
  const RunResult r_res = run(resumed, op2, ctx_for(f));

  CHECK(states_equal(full, resumed));
  CHECK(r_full.best.config.canonical() == r_res.best.config.canonical());
  CHECK(*r_full.best.fitness == *r_res.best.fitness);
  std::filesystem::remove(path);
}

TEST_CASE("a population of failed evaluations still finishes the run") {
  const Fixture& f = fix();
  Model broken = f.model;
  broken.token_embedding.at(0, 0) = std::numeric_limits<float>::quiet_NaN();
  EvalContext ctx = ctx_for(f);
  ctx.dense = &broken;

  SearchState state(hyper(3, 1, 1, 1, 2, 44));
  FallbackOperator op;
  const RunResult res = run(state, op, ctx);
  CHECK(*res.best.fitness == kWorstFitness);
  for (const auto& ind : state.population) CHECK(ind.eval_failed);
  CHECK(state.history.back().mean_fitness == kWorstFitness);
}
