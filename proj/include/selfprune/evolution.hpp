#pragma once
// The evolutionary search loop: evaluate the population, keep the top K,
// breed M mutants and S crossover offspring through the configured operator
// (shortfalls topped up by the deterministic fallback sampler), merge, and
// repeat for N generations. Fitness is pruned-model perplexity; lower is
// better. Parents always survive the merge, so the best fitness never
// regresses.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "selfprune/config_space.hpp"
#include "selfprune/engine.hpp"
#include "selfprune/llm_operator.hpp"
#include "selfprune/model.hpp"
#include "selfprune/rng.hpp"

namespace selfprune {

// Fitness assigned when an evaluation comes back non-finite.
inline constexpr double kWorstFitness = 1e30;

struct Hyper {
  int K = 30;  // survivors per generation
  int M = 10;  // mutants per generation
  int S = 10;  // crossover offspring per generation
  int N = 20;  // generations
  double beta = 0.3;
  std::uint64_t seed = 0;
  int n_layers = 0;  // genome length; matches the model under search
};

struct Individual {
  PruningConfig config;
  std::optional<double> fitness;
  Origin origin = Origin::fallback;
  int generation_born = 0;
  bool eval_failed = false;  // fitness is the worst-case sentinel
};

struct GenRecord {
  int generation = 0;
  double best_fitness = 0.0;
  double mean_fitness = 0.0;  // over finite fitness values
  int evaluations = 0;        // engine evaluations this generation (cache misses)
  int llm_offspring = 0;      // newcomers whose genome came from a chat model
  int fallback_offspring = 0; // newcomers from the offline sampler
  int repair_events = 0;      // proposals the repair projection had to change
};

// Offspring accounting carried from breeding to the next evaluate call,
// where it lands in the history row.
struct PendingCounts {
  int llm_offspring = 0;
  int fallback_offspring = 0;
  int repair_events = 0;
};

struct SearchState {
  explicit SearchState(const Hyper& h) : hyper(h), rng(h.seed) {}

  Hyper hyper;
  std::vector<Individual> population;
  int generation = 0;
  std::map<std::string, double> fitness_cache;  // canonical config -> fitness
  std::vector<GenRecord> history;
  PendingCounts pending;
  CountingRng rng;
};

struct EvalContext {
  const Model* dense = nullptr;
  const ActivationStats* stats = nullptr;
  const TokenCorpus* fitness_corpus = nullptr;
  int seq_len = 32;
  int jobs = 1;
};

// Prune the dense model per `config` and measure perplexity; non-finite
// results map to kWorstFitness.
double fitness_of(const EvalContext& ctx, const PruningConfig& config);

// Fills the population with hyper.K distinct feasible configs: the uniform
// baseline (always present), then operator proposals, then fallback fills.
void initialize(SearchState& state, Operator& op, FallbackOperator& fb);

// Assigns fitness to every unevaluated individual, consulting and updating
// the cache, and appends the generation's history row. With jobs > 1 the
// engine evaluations run on a thread pool; results are independent of the
// thread count.
void evaluate(SearchState& state, const EvalContext& ctx);

// Lowest fitness first; ties prefer the earlier generation_born, then the
// lexicographically smaller canonical config. Requires evaluated input.
std::vector<Individual> select_top_k(const std::vector<Individual>& population, int k);

// One generation: evaluate, select, breed, merge.
void step(SearchState& state, Operator& op, FallbackOperator& fb, const EvalContext& ctx);

struct RunResult {
  Individual best;
};

using StateHook = std::function<void(const SearchState&)>;

// Drives the loop to hyper.N generations (initializing first if the state is
// fresh), finishes with a final evaluation, and returns the best individual.
// `after_each_generation` fires after initialization and after every step;
// checkpoint writers hang off it.
RunResult run(SearchState& state, Operator& op, const EvalContext& ctx,
              const StateHook& after_each_generation = {});

// Checkpoint round trip. The file carries a schema version, the full
// population and cache, the history, and the rng position (seed plus draw
// count); loading a different schema version fails loudly.
void checkpoint_save(const SearchState& state, const std::filesystem::path& path);
SearchState checkpoint_load(const std::filesystem::path& path);

// Exact state comparison used by resume tests.
bool states_equal(const SearchState& a, const SearchState& b);

}  // namespace selfprune
