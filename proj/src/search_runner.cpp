#include "selfprune/search_runner.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "selfprune/engine.hpp"
#include "selfprune/llm_operator.hpp"
#include "selfprune/model.hpp"
#include "selfprune/pruner.hpp"

namespace selfprune {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': cannot parse '" + value + "' as a number");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const std::int64_t v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': cannot parse '" + value + "' as an integer");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw std::runtime_error("config key '" + key + "': cannot parse '" + value + "' as a bool");
}

// Serves init requests from nothing so the fallback sampler seeds the
// population, while evolve requests still reach the wrapped operator.
class InitAblatedOperator final : public Operator {
 public:
  explicit InitAblatedOperator(Operator& inner) : inner_(inner) {}

  ProposeResult propose(OperatorKind kind, const std::vector<ScoredConfig>& parents, int count,
                        int n_layers, double beta, CountingRng& rng) override {
    if (kind == OperatorKind::init) return {};
    return inner_.propose(kind, parents, count, n_layers, beta, rng);
  }

  Origin origin_for(OperatorKind kind) const override { return inner_.origin_for(kind); }

 private:
  Operator& inner_;
};

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

nlohmann::json run_config_json(const RunConfig& cfg) {
  return nlohmann::json{{"model_path", cfg.model_path},
                        {"calib_corpus_path", cfg.calib_corpus_path},
                        {"fitness_corpus_path", cfg.fitness_corpus_path},
                        {"report_corpus_path", cfg.report_corpus_path},
                        {"beta", cfg.beta},
                        {"k", cfg.K},
                        {"m", cfg.M},
                        {"s", cfg.S},
                        {"n", cfg.N},
                        {"seed", cfg.seed},
                        {"seq_len", cfg.seq_len},
                        {"jobs", cfg.jobs},
                        {"operator_mode", cfg.operator_mode},
                        {"endpoint_url", cfg.endpoint_url},
                        {"llm_model", cfg.llm_model},
                        {"temperature", cfg.temperature},
                        {"replay_transcripts", cfg.replay_transcripts},
                        {"model_label", cfg.model_label},
                        {"no_llm_init", cfg.no_llm_init},
                        {"no_mutation", cfg.no_mutation},
                        {"no_crossover", cfg.no_crossover},
                        {"output_dir", cfg.output_dir},
                        {"resume_checkpoint", cfg.resume_checkpoint}};
}

}  // namespace

RunConfig load_run_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path.string());
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto sp = t.find_first_of(" \t");
    if (sp == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected 'key value', got '" + t + "'");
    }
    const std::string key = t.substr(0, sp);
    const std::string value = trim(t.substr(sp + 1));
    if (key == "model") cfg.model_path = value;
    else if (key == "calib_corpus") cfg.calib_corpus_path = value;
    else if (key == "fitness_corpus") cfg.fitness_corpus_path = value;
    else if (key == "report_corpus") cfg.report_corpus_path = value;
    else if (key == "beta") cfg.beta = parse_double(key, value);
    else if (key == "k") cfg.K = static_cast<int>(parse_int(key, value));
    else if (key == "m") cfg.M = static_cast<int>(parse_int(key, value));
    else if (key == "s") cfg.S = static_cast<int>(parse_int(key, value));
    else if (key == "n") cfg.N = static_cast<int>(parse_int(key, value));
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "seq_len") cfg.seq_len = static_cast<int>(parse_int(key, value));
    else if (key == "jobs") cfg.jobs = static_cast<int>(parse_int(key, value));
    else if (key == "operator_mode") cfg.operator_mode = value;
    else if (key == "endpoint_url") cfg.endpoint_url = value;
    else if (key == "llm_model") cfg.llm_model = value;
    else if (key == "temperature") cfg.temperature = parse_double(key, value);
    else if (key == "replay_transcripts") cfg.replay_transcripts = value;
    else if (key == "model_label") cfg.model_label = value;
    else if (key == "no_llm_init") cfg.no_llm_init = parse_bool(key, value);
    else if (key == "no_mutation") cfg.no_mutation = parse_bool(key, value);
    else if (key == "no_crossover") cfg.no_crossover = parse_bool(key, value);
    else if (key == "output_dir") cfg.output_dir = value;
    else if (key == "resume_checkpoint") cfg.resume_checkpoint = value;
    else {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": unknown config key '" + key + "'");
    }
  }
  return cfg;
}

void write_history_csv(const std::vector<GenRecord>& history, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "generation,best_fitness,mean_fitness,evaluations,llm_offspring,fallback_offspring,"
        "repair_events\n";
  for (const GenRecord& r : history) {
    os << r.generation << ',' << fmt_double(r.best_fitness) << ',' << fmt_double(r.mean_fitness)
       << ',' << r.evaluations << ',' << r.llm_offspring << ',' << r.fallback_offspring << ','
       << r.repair_events << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<GenRecord> read_history_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": empty file");
  std::vector<GenRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected 7 fields, got " + std::to_string(fields.size()));
    }
    GenRecord r;
    r.generation = static_cast<int>(parse_int("generation", fields[0]));
    r.best_fitness = parse_double("best_fitness", fields[1]);
    r.mean_fitness = parse_double("mean_fitness", fields[2]);
    r.evaluations = static_cast<int>(parse_int("evaluations", fields[3]));
    r.llm_offspring = static_cast<int>(parse_int("llm_offspring", fields[4]));
    r.fallback_offspring = static_cast<int>(parse_int("fallback_offspring", fields[5]));
    r.repair_events = static_cast<int>(parse_int("repair_events", fields[6]));
    out.push_back(r);
  }
  return out;
}

SearchArtifacts run_search(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();

  if (cfg.model_path.empty()) throw std::runtime_error("run_search: model path is required");
  if (cfg.calib_corpus_path.empty())
    throw std::runtime_error("run_search: calibration corpus path is required");
  if (cfg.fitness_corpus_path.empty())
    throw std::runtime_error("run_search: fitness corpus path is required");
  if (cfg.output_dir.empty()) throw std::runtime_error("run_search: output_dir is required");
  if (cfg.operator_mode != "fallback" && cfg.operator_mode != "llm" &&
      cfg.operator_mode != "replay") {
    throw std::runtime_error("run_search: operator_mode must be fallback, llm, or replay, got '" +
                             cfg.operator_mode + "'");
  }
  if (cfg.operator_mode == "llm" && cfg.endpoint_url.empty())
    throw std::runtime_error("run_search: llm mode requires endpoint_url");
  if (cfg.operator_mode == "replay" && cfg.replay_transcripts.empty())
    throw std::runtime_error("run_search: replay mode requires replay_transcripts");

  const std::filesystem::path out_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir / "checkpoints");

  Model dense = load_model(cfg.model_path);
  const TokenCorpus calib = load_corpus(cfg.calib_corpus_path);
  const TokenCorpus fitness = load_corpus(cfg.fitness_corpus_path);

  EvalContext ctx;
  ctx.dense = &dense;
  ctx.fitness_corpus = &fitness;
  ctx.seq_len = cfg.seq_len;
  ctx.jobs = cfg.jobs;
  ActivationStats stats = collect_activation_stats(dense, calib, cfg.seq_len);
  ctx.stats = &stats;

  const double dense_fitness = perplexity(dense, fitness, cfg.seq_len).perplexity;

  Hyper hyper;
  hyper.K = cfg.K;
  hyper.M = cfg.no_mutation ? 0 : cfg.M;
  hyper.S = cfg.no_crossover ? 0 : cfg.S;
  hyper.N = cfg.N;
  hyper.beta = cfg.beta;
  hyper.seed = cfg.seed;
  hyper.n_layers = static_cast<int>(dense.spec.n_layers);

  SearchState state(hyper);
  if (!cfg.resume_checkpoint.empty()) state = checkpoint_load(cfg.resume_checkpoint);
  if (state.hyper.n_layers != static_cast<int>(dense.spec.n_layers)) {
    throw std::runtime_error("run_search: checkpoint has n_layers=" +
                             std::to_string(state.hyper.n_layers) + " but model has " +
                             std::to_string(dense.spec.n_layers));
  }

  const std::string model_label =
      cfg.model_label.empty() ? std::filesystem::path(cfg.model_path).stem().string()
                              : cfg.model_label;

  std::shared_ptr<TranscriptLog> transcripts;
  std::unique_ptr<Operator> op;
  if (cfg.operator_mode == "llm") {
    ChatClientConfig client_cfg;
    client_cfg.endpoint_url = cfg.endpoint_url;
    client_cfg.model_name = cfg.llm_model;
    client_cfg.temperature = cfg.temperature;
    if (const char* key = std::getenv(kApiKeyEnvVar)) client_cfg.api_key = key;
    transcripts = std::make_shared<TranscriptLog>(out_dir / "transcripts.jsonl");
    op = std::make_unique<LlmOperator>(client_cfg, model_label, transcripts);
  } else if (cfg.operator_mode == "replay") {
    op = std::make_unique<ReplayOperator>(read_transcripts(cfg.replay_transcripts));
  } else {
    op = std::make_unique<FallbackOperator>();
  }
  std::unique_ptr<InitAblatedOperator> ablated;
  Operator* active = op.get();
  if (cfg.no_llm_init) {
    ablated = std::make_unique<InitAblatedOperator>(*op);
    active = ablated.get();
  }

  {
    std::ofstream os(out_dir / "run_config.json");
    os << run_config_json(cfg).dump(2) << '\n';
  }

  const auto hook = [&](const SearchState& s) {
    char name[32];
    std::snprintf(name, sizeof(name), "gen_%04d.json", s.generation);
    checkpoint_save(s, out_dir / "checkpoints" / name);
    write_history_csv(s.history, out_dir / "history.csv");
    if (s.history.empty()) {
      std::printf("search: population initialized (%zu individuals)\n", s.population.size());
    } else {
      const GenRecord& r = s.history.back();
      std::printf("search: generation %d done: best=%.6f mean=%.6f evals=%d\n", r.generation,
                  r.best_fitness, r.mean_fitness, r.evaluations);
    }
    std::fflush(stdout);
  };

  RunResult result = run(state, *active, ctx, hook);
  write_history_csv(state.history, out_dir / "history.csv");

  const std::string uniform_key = uniform_config(hyper.n_layers, hyper.beta).canonical();
  double uniform_fitness;
  if (const auto it = state.fitness_cache.find(uniform_key); it != state.fitness_cache.end()) {
    uniform_fitness = it->second;
  } else {
    uniform_fitness = fitness_of(ctx, uniform_config(hyper.n_layers, hyper.beta));
  }

  const Individual& best = result.best;
  SearchArtifacts artifacts;
  artifacts.best = best;
  artifacts.uniform_fitness = uniform_fitness;
  artifacts.dense_fitness = dense_fitness;
  artifacts.best_config_path = out_dir / "best_config.json";
  artifacts.history_path = out_dir / "history.csv";
  artifacts.summary_path = out_dir / "summary.json";

  {
    nlohmann::json j{{"schema_version", "selfprune-best-v1"},
                     {"rates", best.config.rates()},
                     {"beta", hyper.beta},
                     {"fitness", best.fitness.value()},
                     {"generation_found", best.generation_born},
                     {"seed", hyper.seed}};
    std::ofstream os(artifacts.best_config_path);
    os << j.dump(2) << '\n';
    if (!os) throw std::runtime_error("failed writing " + artifacts.best_config_path.string());
  }

  const PrunePlan best_plan = plan(dense, stats, best.config);
  const Model pruned = apply(dense, best_plan);
  const auto t1 = std::chrono::steady_clock::now();
  artifacts.wall_seconds = std::chrono::duration<double>(t1 - t0).count();

  {
    nlohmann::json j{{"schema_version", "selfprune-summary-v1"},
                     {"dense_fitness", dense_fitness},
                     {"uniform_fitness", uniform_fitness},
                     {"best_fitness", best.fitness.value()},
                     {"best_rates", best.config.rates()},
                     {"best_generation", best.generation_born},
                     {"generations", state.generation},
                     {"beta", hyper.beta},
                     {"seed", hyper.seed},
                     {"block_params_dense", block_param_count(dense)},
                     {"block_params_pruned", block_param_count(pruned)},
                     {"total_params_dense", total_param_count(dense)},
                     {"total_params_pruned", total_param_count(pruned)},
                     {"wall_seconds", artifacts.wall_seconds}};
    std::ofstream os(artifacts.summary_path);
    os << j.dump(2) << '\n';
    if (!os) throw std::runtime_error("failed writing " + artifacts.summary_path.string());
  }

  return artifacts;
}

}  // namespace selfprune
