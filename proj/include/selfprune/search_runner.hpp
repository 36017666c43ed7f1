#pragma once
// End-to-end search orchestration: load the model and corpora, collect
// calibration statistics, drive the evolutionary loop, and write the run
// artifacts (best_config.json, history.csv, per-generation checkpoints,
// transcripts in endpoint mode, summary.json, run_config.json).

#include <cstdint>
#include <filesystem>
#include <string>

#include "selfprune/evolution.hpp"

namespace selfprune {

struct RunConfig {
  // inputs
  std::string model_path;
  std::string calib_corpus_path;
  std::string fitness_corpus_path;
  std::string report_corpus_path;  // held-out; used by the report command

  // search hyperparameters
  double beta = 0.3;
  int K = 30;
  int M = 10;
  int S = 10;
  int N = 20;
  std::uint64_t seed = 0;
  int seq_len = 32;
  int jobs = 1;

  // operator selection: fallback | llm | replay
  std::string operator_mode = "fallback";
  std::string endpoint_url;
  std::string llm_model = "gpt-4o";
  double temperature = 1.0;
  std::string replay_transcripts;  // transcript file that drives replay mode
  std::string model_label;         // how prompts name the model; default derived

  // ablations
  bool no_llm_init = false;
  bool no_mutation = false;
  bool no_crossover = false;

  // outputs
  std::string output_dir;
  std::string resume_checkpoint;  // continue from this checkpoint when set
};

// Flat key-value file, one "key value" pair per line, '#' comments. Unknown
// keys fail loudly.
RunConfig load_run_config_file(const std::filesystem::path& path);

struct SearchArtifacts {
  Individual best;
  double uniform_fitness = 0.0;
  double dense_fitness = 0.0;
  double wall_seconds = 0.0;
  std::filesystem::path best_config_path;
  std::filesystem::path history_path;
  std::filesystem::path summary_path;
};

// Runs the configured search and writes every artifact under
// cfg.output_dir. Throws on invalid configuration or IO failure.
SearchArtifacts run_search(const RunConfig& cfg);

// history.csv writer, exposed for the report command's round trip.
void write_history_csv(const std::vector<GenRecord>& history, const std::filesystem::path& path);
std::vector<GenRecord> read_history_csv(const std::filesystem::path& path);

}  // namespace selfprune
