#include "selfprune/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "selfprune/config_space.hpp"
#include "selfprune/engine.hpp"
#include "selfprune/llm_operator.hpp"
#include "selfprune/model.hpp"
#include "selfprune/pruner.hpp"
#include "selfprune/search_runner.hpp"

namespace selfprune {

namespace {

// Bad flag combinations and malformed invocations; exits with code 2 instead
// of 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string canonical_of(const std::vector<double>& rates) {
  return PruningConfig(rates, mean_of(rates)).canonical();
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  return j;
}

// Accepts either a best_config.json artifact or free text containing one
// bracketed rate list.
std::vector<double> read_rates_file(const std::filesystem::path& path, int n_layers) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_object() && j.contains("rates")) {
    std::vector<double> rates = j.at("rates").get<std::vector<double>>();
    if (static_cast<int>(rates.size()) != n_layers) {
      throw std::runtime_error(path.string() + ": has " + std::to_string(rates.size()) +
                               " rates but the model has " + std::to_string(n_layers) + " layers");
    }
    return rates;
  }
  const ParsedConfigs parsed = parse_config_text(text, n_layers, 1);
  if (parsed.found() == 0) {
    throw std::runtime_error(path.string() + ": no rate list of length " +
                             std::to_string(n_layers) + " found");
  }
  return parsed.vectors.front();
}

void cmd_gen_model(const std::string& out, int layers, int d_model, int heads, int d_ff, int vocab,
                   int max_seq_len, std::uint64_t seed) {
  ModelSpec spec;
  try {
    spec = ModelSpec::create(layers, d_model, heads, d_ff, vocab, max_seq_len);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Model model = init_random_model(spec, seed);
  save_model(model, out);
  std::printf("model written to %s\n", out.c_str());
  std::printf("layers %d, d_model %d, heads %d, head_dim %d, d_ff %d, vocab %d, max_seq_len %d\n",
              spec.n_layers, spec.d_model, spec.n_heads, spec.head_dim, spec.d_ff, spec.vocab_size,
              spec.max_seq_len);
  std::printf("block parameters: %ld\n", block_param_count(model));
  std::printf("total parameters: %ld\n", total_param_count(model));
  std::printf("checksum: %016llx\n",
              static_cast<unsigned long long>(file_checksum(out)));
}

void cmd_gen_corpus(const std::string& out, int vocab, long tokens, std::uint64_t seed,
                    std::string name) {
  if (tokens <= 0) throw UsageError("--tokens must be positive");
  if (vocab <= 0) throw UsageError("--vocab must be positive");
  if (name.empty()) name = std::filesystem::path(out).stem().string();
  const TokenCorpus corpus =
      generate_corpus(vocab, static_cast<std::size_t>(tokens), seed, std::move(name));
  save_corpus(corpus, out);
  std::printf("corpus written to %s (%zu tokens, vocab %d)\n", out.c_str(), corpus.tokens.size(),
              corpus.vocab_size);
  std::printf("checksum: %016llx\n",
              static_cast<unsigned long long>(file_checksum(out)));
}

void cmd_search(const RunConfig& cfg) {
  if (cfg.model_path.empty()) throw UsageError("search needs --model (or a config file entry)");
  if (cfg.calib_corpus_path.empty()) throw UsageError("search needs --calib-corpus");
  if (cfg.fitness_corpus_path.empty()) throw UsageError("search needs --fitness-corpus");
  if (cfg.output_dir.empty()) throw UsageError("search needs --out-dir");
  if (cfg.operator_mode != "fallback" && cfg.operator_mode != "llm" &&
      cfg.operator_mode != "replay") {
    throw UsageError("--operator must be fallback, llm, or replay");
  }
  if (cfg.operator_mode == "llm") {
    if (cfg.endpoint_url.empty()) throw UsageError("--operator llm needs --endpoint");
    const char* key = std::getenv(kApiKeyEnvVar);
    if (key == nullptr || *key == '\0') {
      throw UsageError(std::string("--operator llm requires the ") + kApiKeyEnvVar +
                       " environment variable to be set");
    }
  }
  if (cfg.operator_mode == "replay" && cfg.replay_transcripts.empty()) {
    throw UsageError("--operator replay needs --replay-transcripts");
  }

  const SearchArtifacts artifacts = run_search(cfg);
  std::printf("dense fitness:   %.6f\n", artifacts.dense_fitness);
  std::printf("uniform fitness: %.6f\n", artifacts.uniform_fitness);
  std::printf("best fitness:    %.6f (generation %d)\n", artifacts.best.fitness.value(),
              artifacts.best.generation_born);
  std::printf("best rates:      %s\n", artifacts.best.config.canonical().c_str());
  std::printf("artifacts in %s\n", cfg.output_dir.c_str());
}

void cmd_prune(const std::string& model_path, const std::string& calib_path,
               const std::string& config_path, const std::string& out, int seq_len) {
  const Model dense = load_model(model_path);
  const TokenCorpus calib = load_corpus(calib_path);
  const ActivationStats stats = collect_activation_stats(dense, calib, seq_len);
  const std::vector<double> rates = read_rates_file(config_path, dense.spec.n_layers);
  const PruningConfig config(rates, mean_of(rates));
  const PrunePlan p = plan(dense, stats, config);
  const Model pruned = apply(dense, p);
  save_model(pruned, out);

  std::filesystem::path plan_path(out);
  plan_path.replace_extension(".plan.json");
  {
    std::ofstream os(plan_path);
    os << plan_to_json(p).dump(2) << '\n';
    if (!os) throw std::runtime_error("failed writing " + plan_path.string());
  }

  const long before = block_param_count(dense);
  const long after = block_param_count(pruned);
  std::printf("pruned model written to %s\n", out.c_str());
  std::printf("plan written to %s\n", plan_path.string().c_str());
  std::printf("rates: %s\n", config.canonical().c_str());
  std::printf("block parameters: %ld -> %ld (%.2f%% removed)\n", before, after,
              100.0 * (1.0 - static_cast<double>(after) / static_cast<double>(before)));
}

void cmd_eval(const std::string& model_path, const std::string& corpus_path, int seq_len,
              const std::string& json_out) {
  const Model model = load_model(model_path);
  const TokenCorpus corpus = load_corpus(corpus_path);
  const PerplexityResult r = perplexity(model, corpus, seq_len);
  std::printf("perplexity: %.6f over %ld positions (%ld windows of %d)\n", r.perplexity,
              r.positions, r.windows, seq_len);
  if (!json_out.empty()) {
    nlohmann::json j{{"schema_version", "selfprune-eval-v1"},
                     {"perplexity", r.perplexity},
                     {"tokens_evaluated", r.positions},
                     {"windows", r.windows}};
    std::ofstream os(json_out);
    os << j.dump(2) << '\n';
    if (!os) throw std::runtime_error("failed writing " + json_out);
    std::printf("eval json written to %s\n", json_out.c_str());
  }
}

struct ReportRow {
  std::string variant;
  double ppl = 0.0;
  long block_params = 0;
  long total_params = 0;
  double removed = 0.0;
  double tokens_per_s = 0.0;
};

void cmd_report(const std::string& run_dir, const std::string& model_path,
                const std::string& calib_path, const std::string& report_corpus_path, int seq_len,
                long bench_tokens, int bench_repeats) {
  const std::filesystem::path dir(run_dir);
  std::vector<std::string> missing;
  for (const char* f : {"best_config.json", "history.csv", "summary.json"}) {
    if (!std::filesystem::exists(dir / f)) missing.push_back(f);
  }
  if (!missing.empty()) {
    std::string list;
    for (const std::string& m : missing) {
      if (!list.empty()) list += ", ";
      list += m;
    }
    throw std::runtime_error("run directory " + run_dir + " is missing: " + list);
  }

  const Model dense = load_model(model_path);
  const TokenCorpus calib = load_corpus(calib_path);
  const TokenCorpus report_corpus = load_corpus(report_corpus_path);
  const ActivationStats stats = collect_activation_stats(dense, calib, seq_len);

  const nlohmann::json best_json = read_json_file(dir / "best_config.json");
  const std::vector<double> best_rates = best_json.at("rates").get<std::vector<double>>();
  if (static_cast<int>(best_rates.size()) != dense.spec.n_layers) {
    throw std::runtime_error("best_config.json has " + std::to_string(best_rates.size()) +
                             " rates but the model has " + std::to_string(dense.spec.n_layers) +
                             " layers");
  }
  const double beta = best_json.at("beta").get<double>();
  const int best_generation = best_json.at("generation_found").get<int>();
  const std::vector<GenRecord> history = read_history_csv(dir / "history.csv");

  const long dense_block = block_param_count(dense);
  const auto make_row = [&](const std::string& variant, const Model& m) {
    ReportRow row;
    row.variant = variant;
    row.ppl = perplexity(m, report_corpus, seq_len).perplexity;
    row.block_params = block_param_count(m);
    row.total_params = total_param_count(m);
    row.removed = 1.0 - static_cast<double>(row.block_params) / static_cast<double>(dense_block);
    row.tokens_per_s = benchmark_throughput(m, bench_tokens, bench_repeats).tokens_per_s;
    return row;
  };

  std::vector<ReportRow> rows;
  rows.push_back(make_row("dense", dense));
  const Model uniform_model =
      apply(dense, plan(dense, stats, uniform_config(dense.spec.n_layers, beta)));
  rows.push_back(make_row("uniform", uniform_model));
  const Model best_model =
      apply(dense, plan(dense, stats, PruningConfig(best_rates, mean_of(best_rates))));
  rows.push_back(make_row("best", best_model));

  std::printf("report corpus: %s (%zu tokens), seq_len %d\n", report_corpus.name.c_str(),
              report_corpus.tokens.size(), seq_len);
  std::printf("search: best fitness %.6f found in generation %d (%zu history rows)\n",
              history.empty() ? 0.0 : history.back().best_fitness, best_generation,
              history.size());
  std::printf("best rates: %s\n", canonical_of(best_rates).c_str());
  std::printf("%-8s  %12s  %14s  %9s  %14s  %12s\n", "variant", "perplexity", "block params",
              "removed", "total params", "tokens/s");
  for (const ReportRow& r : rows) {
    std::printf("%-8s  %12.6f  %14ld  %8.2f%%  %14ld  %12.1f\n", r.variant.c_str(), r.ppl,
                r.block_params, 100.0 * r.removed, r.total_params, r.tokens_per_s);
  }
  std::printf("note: toy-scale model; throughput reflects this harness on this host, nothing "
              "more.\n");

  const std::filesystem::path csv_path = dir / "report.csv";
  std::ofstream os(csv_path);
  if (!os) throw std::runtime_error("cannot write " + csv_path.string());
  os << "variant,perplexity,block_params,total_params,block_removed_fraction\n";
  for (const ReportRow& r : rows) {
    char ppl_buf[64], rem_buf[64];
    std::snprintf(ppl_buf, sizeof(ppl_buf), "%.17g", r.ppl);
    std::snprintf(rem_buf, sizeof(rem_buf), "%.17g", r.removed);
    os << r.variant << ',' << ppl_buf << ',' << r.block_params << ',' << r.total_params << ','
       << rem_buf << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + csv_path.string());
  std::printf("report csv written to %s\n", csv_path.string().c_str());
}

}  // namespace

int run_cli(std::vector<std::string> args) {
  CLI::App app{"layer-wise structured pruning search over a toy transformer"};
  app.require_subcommand(1);

  // gen-model
  auto* gm = app.add_subcommand("gen-model", "write a seeded random model");
  std::string gm_out;
  int gm_layers = 4, gm_dmodel = 64, gm_heads = 4, gm_dff = 128, gm_vocab = 256, gm_maxseq = 64;
  std::uint64_t gm_seed = 0;
  gm->add_option("--out", gm_out, "output model path")->required();
  gm->add_option("--layers", gm_layers, "transformer layers");
  gm->add_option("--d-model", gm_dmodel, "residual width");
  gm->add_option("--heads", gm_heads, "attention heads per layer");
  gm->add_option("--d-ff", gm_dff, "FFN hidden channels per layer");
  gm->add_option("--vocab", gm_vocab, "vocabulary size");
  gm->add_option("--max-seq-len", gm_maxseq, "maximum window length");
  gm->add_option("--seed", gm_seed, "weight seed");
  gm->callback([&] {
    cmd_gen_model(gm_out, gm_layers, gm_dmodel, gm_heads, gm_dff, gm_vocab, gm_maxseq, gm_seed);
  });

  // gen-corpus
  auto* gc = app.add_subcommand("gen-corpus", "write a seeded synthetic token corpus");
  std::string gc_out, gc_name;
  int gc_vocab = 256;
  long gc_tokens = 8192;
  std::uint64_t gc_seed = 0;
  gc->add_option("--out", gc_out, "output corpus path")->required();
  gc->add_option("--tokens", gc_tokens, "token count");
  gc->add_option("--vocab", gc_vocab, "vocabulary size");
  gc->add_option("--seed", gc_seed, "corpus seed");
  gc->add_option("--name", gc_name, "corpus name (default: file stem)");
  gc->callback([&] { cmd_gen_corpus(gc_out, gc_vocab, gc_tokens, gc_seed, gc_name); });

  // search
  auto* se = app.add_subcommand("search", "run the evolutionary pruning search");
  std::string se_config;
  RunConfig se_cfg;
  RunConfig flags;  // CLI values land here, then override the config file
  se->add_option("--config", se_config, "key-value run config file");
  se->add_option("--model", flags.model_path, "dense model path");
  se->add_option("--calib-corpus", flags.calib_corpus_path, "calibration corpus");
  se->add_option("--fitness-corpus", flags.fitness_corpus_path, "fitness corpus");
  se->add_option("--report-corpus", flags.report_corpus_path, "held-out corpus (recorded only)");
  se->add_option("--beta", flags.beta, "target mean pruning rate");
  se->add_option("--k", flags.K, "population size");
  se->add_option("--m", flags.M, "mutation offspring per generation");
  se->add_option("--s", flags.S, "crossover offspring per generation");
  se->add_option("--n", flags.N, "generations");
  se->add_option("--seed", flags.seed, "search seed");
  se->add_option("--seq-len", flags.seq_len, "evaluation window length");
  se->add_option("--jobs", flags.jobs, "parallel fitness evaluations");
  se->add_option("--operator", flags.operator_mode, "fallback | llm | replay");
  se->add_option("--endpoint", flags.endpoint_url, "chat completion endpoint URL");
  se->add_option("--llm-model", flags.llm_model, "chat model name");
  se->add_option("--temperature", flags.temperature, "chat sampling temperature");
  se->add_option("--replay-transcripts", flags.replay_transcripts, "transcript file to replay");
  se->add_option("--model-label", flags.model_label, "model name used inside prompts");
  se->add_flag("--no-llm-init", flags.no_llm_init, "seed the population without the operator");
  se->add_flag("--no-mutation", flags.no_mutation, "disable mutation offspring");
  se->add_flag("--no-crossover", flags.no_crossover, "disable crossover offspring");
  se->add_option("--out-dir", flags.output_dir, "artifact directory")->required(false);
  se->add_option("--resume", flags.resume_checkpoint, "checkpoint to resume from");
  se->callback([&] {
    RunConfig cfg;
    if (!se_config.empty()) cfg = load_run_config_file(se_config);
    const auto merge_s = [&](const char* flag, std::string RunConfig::* field) {
      if (se->count(flag) > 0) cfg.*field = flags.*field;
    };
    merge_s("--model", &RunConfig::model_path);
    merge_s("--calib-corpus", &RunConfig::calib_corpus_path);
    merge_s("--fitness-corpus", &RunConfig::fitness_corpus_path);
    merge_s("--report-corpus", &RunConfig::report_corpus_path);
    merge_s("--operator", &RunConfig::operator_mode);
    merge_s("--endpoint", &RunConfig::endpoint_url);
    merge_s("--llm-model", &RunConfig::llm_model);
    merge_s("--replay-transcripts", &RunConfig::replay_transcripts);
    merge_s("--model-label", &RunConfig::model_label);
    merge_s("--out-dir", &RunConfig::output_dir);
    merge_s("--resume", &RunConfig::resume_checkpoint);
    if (se->count("--beta")) cfg.beta = flags.beta;
    if (se->count("--k")) cfg.K = flags.K;
    if (se->count("--m")) cfg.M = flags.M;
    if (se->count("--s")) cfg.S = flags.S;
    if (se->count("--n")) cfg.N = flags.N;
    if (se->count("--seed")) cfg.seed = flags.seed;
    if (se->count("--seq-len")) cfg.seq_len = flags.seq_len;
    if (se->count("--jobs")) cfg.jobs = flags.jobs;
    if (se->count("--temperature")) cfg.temperature = flags.temperature;
    if (se->count("--no-llm-init")) cfg.no_llm_init = true;
    if (se->count("--no-mutation")) cfg.no_mutation = true;
    if (se->count("--no-crossover")) cfg.no_crossover = true;
    cmd_search(cfg);
  });

  // prune
  auto* pr = app.add_subcommand("prune", "realize a rate config as a pruned model");
  std::string pr_model, pr_calib, pr_config, pr_out;
  int pr_seq = 32;
  pr->add_option("--model", pr_model, "dense model path")->required();
  pr->add_option("--calib-corpus", pr_calib, "calibration corpus")->required();
  pr->add_option("--rates", pr_config, "rate list file or best_config.json")->required();
  pr->add_option("--out", pr_out, "pruned model path")->required();
  pr->add_option("--seq-len", pr_seq, "calibration window length");
  pr->callback([&] { cmd_prune(pr_model, pr_calib, pr_config, pr_out, pr_seq); });

  // eval
  auto* ev = app.add_subcommand("eval", "measure perplexity on a corpus");
  std::string ev_model, ev_corpus, ev_json;
  int ev_seq = 32;
  ev->add_option("--model", ev_model, "model path")->required();
  ev->add_option("--corpus", ev_corpus, "corpus path")->required();
  ev->add_option("--seq-len", ev_seq, "window length");
  ev->add_option("--json", ev_json, "also write a JSON result here");
  ev->callback([&] { cmd_eval(ev_model, ev_corpus, ev_seq, ev_json); });

  // report
  auto* rp = app.add_subcommand("report", "compare dense, uniform, and searched pruning");
  std::string rp_dir, rp_model, rp_calib, rp_corpus;
  int rp_seq = 32, rp_repeats = 5;
  long rp_tokens = 2048;
  rp->add_option("--run-dir", rp_dir, "search artifact directory")->required();
  rp->add_option("--model", rp_model, "dense model path")->required();
  rp->add_option("--calib-corpus", rp_calib, "calibration corpus")->required();
  rp->add_option("--report-corpus", rp_corpus, "held-out corpus")->required();
  rp->add_option("--seq-len", rp_seq, "evaluation window length");
  rp->add_option("--bench-tokens", rp_tokens, "tokens per throughput pass");
  rp->add_option("--bench-repeats", rp_repeats, "throughput passes (median)");
  rp->callback([&] {
    cmd_report(rp_dir, rp_model, rp_calib, rp_corpus, rp_seq, rp_tokens, rp_repeats);
  });

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.emplace_back("selfprune");
  for (std::string& a : args) argv_store.push_back(std::move(a));
  std::vector<char*> argv;
  argv.reserve(argv_store.size());
  for (std::string& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace selfprune
