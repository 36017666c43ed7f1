#include "selfprune/evolution.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <set>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "selfprune/pruner.hpp"

namespace selfprune {

namespace {

constexpr const char* kCheckpointSchema = "selfprune-checkpoint-v1";
constexpr int kFillAttempts = 64;

bool better(const Individual& a, const Individual& b) {
  if (*a.fitness != *b.fitness) return *a.fitness < *b.fitness;
  if (a.generation_born != b.generation_born) return a.generation_born < b.generation_born;
  return a.config.canonical() < b.config.canonical();
}

void count_origin(PendingCounts& pc, Origin org) {
  if (org == Origin::fallback)
    ++pc.fallback_offspring;
  else
    ++pc.llm_offspring;
}

}  // namespace

double fitness_of(const EvalContext& ctx, const PruningConfig& config) {
  const PrunePlan p = plan(*ctx.dense, *ctx.stats, config);
  const Model pruned = apply(*ctx.dense, p);
  const double ppl = perplexity(pruned, *ctx.fitness_corpus, ctx.seq_len).perplexity;
  return std::isfinite(ppl) ? ppl : kWorstFitness;
}

void initialize(SearchState& state, Operator& op, FallbackOperator& fb) {
  const Hyper& h = state.hyper;
  if (h.K < 1) throw std::invalid_argument("initialize: K must be positive");
  if (h.n_layers < 1) throw std::invalid_argument("initialize: n_layers must be positive");

  state.population.clear();
  state.generation = 0;
  state.history.clear();
  state.pending = {};
  std::set<std::string> seen;

  // The uniform baseline is always part of the initial population, so the
  // search result can only improve on it.
  {
    PruningConfig uni = uniform_config(h.n_layers, h.beta);
    seen.insert(uni.canonical());
    state.population.push_back({std::move(uni), std::nullopt, Origin::fallback, 0});
    ++state.pending.fallback_offspring;
  }

  auto absorb = [&](const ProposeResult& res, Origin org) {
    state.pending.repair_events += res.repair_events;
    for (const auto& cfg : res.configs) {
      if (static_cast<int>(state.population.size()) >= h.K) break;
      if (!seen.insert(cfg.canonical()).second) continue;
      state.population.push_back({cfg, std::nullopt, org, 0});
      count_origin(state.pending, org);
    }
  };

  if (static_cast<int>(state.population.size()) < h.K) {
    absorb(op.propose(OperatorKind::init, {}, h.K, h.n_layers, h.beta, state.rng),
           op.origin_for(OperatorKind::init));
    // one retry before falling back
    if (static_cast<int>(state.population.size()) < h.K) {
      const int missing = h.K - static_cast<int>(state.population.size());
      absorb(op.propose(OperatorKind::init, {}, missing, h.n_layers, h.beta, state.rng),
             op.origin_for(OperatorKind::init));
    }
  }

  for (int attempt = 0;
       static_cast<int>(state.population.size()) < h.K && attempt < kFillAttempts; ++attempt) {
    const int missing = h.K - static_cast<int>(state.population.size());
    absorb(fb.propose(OperatorKind::init, {}, missing, h.n_layers, h.beta, state.rng),
           Origin::fallback);
  }

  // Distinctness can be genuinely exhausted (n_layers == 1 has a single
  // feasible genome); pad with the baseline rather than spin.
  while (static_cast<int>(state.population.size()) < h.K) {
    state.population.push_back(
        {uniform_config(h.n_layers, h.beta), std::nullopt, Origin::fallback, 0});
    ++state.pending.fallback_offspring;
  }
}

void evaluate(SearchState& state, const EvalContext& ctx) {
  if (state.population.empty()) throw std::logic_error("evaluate: empty population");
  if (!ctx.dense || !ctx.stats || !ctx.fitness_corpus)
    throw std::invalid_argument("evaluate: incomplete context");

  // Unique configs that truly need the engine.
  std::vector<std::pair<std::string, const PruningConfig*>> todo;
  std::set<std::string> queued;
  for (const auto& ind : state.population) {
    if (ind.fitness) continue;
    std::string key = ind.config.canonical();
    if (state.fitness_cache.count(key) || !queued.insert(key).second) continue;
    todo.emplace_back(std::move(key), &ind.config);
  }

  std::vector<double> results(todo.size());
  const int jobs = std::max(1, ctx.jobs);
  if (jobs == 1 || todo.size() <= 1) {
    for (std::size_t i = 0; i < todo.size(); ++i) results[i] = fitness_of(ctx, *todo[i].second);
  } else {
    const int workers = static_cast<int>(
        std::min<std::size_t>(static_cast<std::size_t>(jobs), todo.size()));
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = static_cast<std::size_t>(w); i < todo.size();
               i += static_cast<std::size_t>(workers))
            results[i] = fitness_of(ctx, *todo[i].second);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  for (std::size_t i = 0; i < todo.size(); ++i) state.fitness_cache[todo[i].first] = results[i];

  for (auto& ind : state.population) {
    if (!ind.fitness) ind.fitness = state.fitness_cache.at(ind.config.canonical());
    ind.eval_failed = *ind.fitness >= kWorstFitness;
  }

  GenRecord rec;
  rec.generation = state.generation;
  rec.evaluations = static_cast<int>(todo.size());
  rec.llm_offspring = state.pending.llm_offspring;
  rec.fallback_offspring = state.pending.fallback_offspring;
  rec.repair_events = state.pending.repair_events;
  double best = kWorstFitness;
  double sum = 0.0;
  long finite = 0;
  for (const auto& ind : state.population) {
    best = std::min(best, *ind.fitness);
    if (!ind.eval_failed) {
      sum += *ind.fitness;
      ++finite;
    }
  }
  rec.best_fitness = best;
  rec.mean_fitness = finite > 0 ? sum / static_cast<double>(finite) : kWorstFitness;
  state.history.push_back(rec);
  state.pending = {};
}

std::vector<Individual> select_top_k(const std::vector<Individual>& population, int k) {
  if (k < 1) throw std::invalid_argument("select_top_k: k must be positive");
  for (const auto& ind : population)
    if (!ind.fitness) throw std::logic_error("select_top_k: unevaluated individual");
  std::vector<Individual> sorted = population;
  std::stable_sort(sorted.begin(), sorted.end(), better);
  if (static_cast<int>(sorted.size()) > k) sorted.resize(static_cast<std::size_t>(k));
  return sorted;
}

void step(SearchState& state, Operator& op, FallbackOperator& fb, const EvalContext& ctx) {
  const Hyper& h = state.hyper;
  evaluate(state, ctx);
  std::vector<Individual> parents = select_top_k(state.population, h.K);

  std::vector<ScoredConfig> scored;
  scored.reserve(parents.size());
  std::set<std::string> seen;
  for (const auto& p : parents) {
    scored.push_back({p.config, *p.fitness});
    seen.insert(p.config.canonical());
  }

  std::vector<Individual> offspring;
  PendingCounts pc;
  const int born = state.generation + 1;

  auto breed = [&](OperatorKind kind, int want) {
    if (want < 1) return;
    int added = 0;
    auto absorb = [&](const ProposeResult& res, Origin org) {
      pc.repair_events += res.repair_events;
      for (const auto& cfg : res.configs) {
        if (added >= want) break;
        if (!seen.insert(cfg.canonical()).second) continue;
        offspring.push_back({cfg, std::nullopt, org, born});
        count_origin(pc, org);
        ++added;
      }
    };
    absorb(op.propose(kind, scored, want, h.n_layers, h.beta, state.rng), op.origin_for(kind));
    for (int attempt = 0; added < want && attempt < kFillAttempts; ++attempt)
      absorb(fb.propose(kind, scored, want - added, h.n_layers, h.beta, state.rng),
             Origin::fallback);
  };
  breed(OperatorKind::mutation, h.M);
  breed(OperatorKind::crossover, h.S);

  state.population = std::move(parents);
  state.population.insert(state.population.end(), offspring.begin(), offspring.end());
  state.generation = born;
  state.pending = pc;
}

RunResult run(SearchState& state, Operator& op, const EvalContext& ctx,
              const StateHook& after_each_generation) {
  FallbackOperator fb;
  if (state.population.empty()) {
    initialize(state, op, fb);
    if (after_each_generation) after_each_generation(state);
  }
  while (state.generation < state.hyper.N) {
    step(state, op, fb, ctx);
    if (after_each_generation) after_each_generation(state);
  }
  evaluate(state, ctx);

  const Individual* best = &state.population.front();
  for (const auto& ind : state.population)
    if (better(ind, *best)) best = &ind;
  return {*best};
}

namespace {

nlohmann::json checkpoint_json(const SearchState& state) {
  nlohmann::json pop = nlohmann::json::array();
  for (const auto& ind : state.population) {
    nlohmann::json j = {{"rates", ind.config.rates()},
                        {"origin", to_string(ind.origin)},
                        {"generation_born", ind.generation_born},
                        {"eval_failed", ind.eval_failed}};
    if (ind.fitness)
      j["fitness"] = *ind.fitness;
    else
      j["fitness"] = nullptr;
    pop.push_back(std::move(j));
  }

  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : state.history) {
    hist.push_back({{"generation", r.generation},
                    {"best_fitness", r.best_fitness},
                    {"mean_fitness", r.mean_fitness},
                    {"evaluations", r.evaluations},
                    {"llm_offspring", r.llm_offspring},
                    {"fallback_offspring", r.fallback_offspring},
                    {"repair_events", r.repair_events}});
  }

  return nlohmann::json{
      {"schema_version", kCheckpointSchema},
      {"hyper",
       {{"k", state.hyper.K},
        {"m", state.hyper.M},
        {"s", state.hyper.S},
        {"n", state.hyper.N},
        {"beta", state.hyper.beta},
        {"seed", state.hyper.seed},
        {"n_layers", state.hyper.n_layers}}},
      {"generation", state.generation},
      {"rng", {{"seed", state.rng.seed()}, {"draws", state.rng.draws()}}},
      {"pending",
       {{"llm_offspring", state.pending.llm_offspring},
        {"fallback_offspring", state.pending.fallback_offspring},
        {"repair_events", state.pending.repair_events}}},
      {"population", pop},
      {"fitness_cache", state.fitness_cache},
      {"history", hist}};
}

}  // namespace

void checkpoint_save(const SearchState& state, const std::filesystem::path& path) {
  const nlohmann::json j = checkpoint_json(state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("checkpoint_save: cannot open " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("checkpoint_save: write failed for " + path.string());
}

SearchState checkpoint_load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("checkpoint_load: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint_load: invalid JSON in " + path.string() + ": " +
                             e.what());
  }
  const std::string schema = j.value("schema_version", "");
  if (schema != kCheckpointSchema)
    throw std::runtime_error("checkpoint_load: schema version \"" + schema +
                             "\" does not match expected \"" + kCheckpointSchema + "\"");

  Hyper h;
  const auto& jh = j.at("hyper");
  h.K = jh.at("k").get<int>();
  h.M = jh.at("m").get<int>();
  h.S = jh.at("s").get<int>();
  h.N = jh.at("n").get<int>();
  h.beta = jh.at("beta").get<double>();
  h.seed = jh.at("seed").get<std::uint64_t>();
  h.n_layers = jh.at("n_layers").get<int>();

  SearchState state(h);
  state.generation = j.at("generation").get<int>();
  state.rng = CountingRng::restore(j.at("rng").at("seed").get<std::uint64_t>(),
                                   j.at("rng").at("draws").get<std::uint64_t>());
  const auto& jp = j.at("pending");
  state.pending.llm_offspring = jp.at("llm_offspring").get<int>();
  state.pending.fallback_offspring = jp.at("fallback_offspring").get<int>();
  state.pending.repair_events = jp.at("repair_events").get<int>();

  for (const auto& ji : j.at("population")) {
    Individual ind;
    ind.config = PruningConfig(ji.at("rates").get<std::vector<double>>(), h.beta);
    if (!ji.at("fitness").is_null()) ind.fitness = ji.at("fitness").get<double>();
    ind.origin = origin_from_string(ji.at("origin").get<std::string>());
    ind.generation_born = ji.at("generation_born").get<int>();
    ind.eval_failed = ji.at("eval_failed").get<bool>();
    state.population.push_back(std::move(ind));
  }

  state.fitness_cache = j.at("fitness_cache").get<std::map<std::string, double>>();

  for (const auto& jr : j.at("history")) {
    GenRecord r;
    r.generation = jr.at("generation").get<int>();
    r.best_fitness = jr.at("best_fitness").get<double>();
    r.mean_fitness = jr.at("mean_fitness").get<double>();
    r.evaluations = jr.at("evaluations").get<int>();
    r.llm_offspring = jr.at("llm_offspring").get<int>();
    r.fallback_offspring = jr.at("fallback_offspring").get<int>();
    r.repair_events = jr.at("repair_events").get<int>();
    state.history.push_back(r);
  }
  return state;
}

bool states_equal(const SearchState& a, const SearchState& b) {
  return checkpoint_json(a) == checkpoint_json(b);
}

}  // namespace selfprune
