#pragma once
// The genetic operators. A chat model performs initialization, mutation, and
// crossover through rendered prompts over an HTTP chat-completions endpoint;
// a deterministic offline sampler provides the same interface as a fallback
// and for fully reproducible runs. Every endpoint exchange is appended to a
// JSONL transcript that can later drive a bit-reproducible replay.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "selfprune/config_space.hpp"
#include "selfprune/rng.hpp"

namespace selfprune {

enum class OperatorKind { init, mutation, crossover };

// How an individual's genome came to be. LLM-produced genomes carry the
// operation that made them; everything the offline sampler produced
// (including shortfall fills and the injected uniform baseline) is
// `fallback`.
enum class Origin { init, mutation, crossover, fallback };

std::string to_string(OperatorKind k);
std::string to_string(Origin o);
Origin origin_from_string(const std::string& s);

struct ScoredConfig {
  PruningConfig config;
  double fitness = 0.0;
};

// Prompt template identifiers, also used as transcript template_id values.
inline constexpr const char* kInitTemplateId = "init";
inline constexpr const char* kEvolveMutationTemplateId = "evolve_mutation";
inline constexpr const char* kEvolveCrossoverTemplateId = "evolve_crossover";

// Initialization prompt asking for `population_size` configurations of
// `n_layers` rates averaging `beta` for the model called `model_label`.
std::string render_init_prompt(const std::string& model_label, int n_layers, int population_size,
                               double beta);

// Mutation/crossover prompt listing the current population with fitness
// values (4 decimals) and asking for `count` new configurations. kind must
// be mutation or crossover and the population non-empty.
std::string render_evolve_prompt(OperatorKind kind, const std::string& model_label,
                                 const std::vector<ScoredConfig>& population, int count);

// ---------------------------------------------------------------------------
// Endpoint client

// Name of the environment variable holding the endpoint credential. The
// value itself is never written to logs or transcripts.
inline constexpr const char* kApiKeyEnvVar = "SELFPRUNE_API_KEY";

struct ChatClientConfig {
  std::string endpoint_url;  // full URL, e.g. https://host/v1/chat/completions
  std::string model_name;    // chat model to request
  std::string api_key;       // bearer credential; empty sends no auth header
  double temperature = 1.0;
  int max_attempts = 5;      // transport errors, 429 and 5xx retry with
  int backoff_base_ms = 1000;  // exponential backoff: base * 2^(attempt-1)
};

struct Completion {
  std::string text;
  int attempt = 0;     // 1-based attempt that succeeded
  long latency_ms = 0; // wall time across all attempts
};

class ChatClient {
 public:
  explicit ChatClient(ChatClientConfig cfg);
  // Sends one user message. Throws std::runtime_error once retries are
  // exhausted or the response is not a well-formed completion.
  Completion complete(const std::string& prompt, int max_tokens) const;

 private:
  ChatClientConfig cfg_;
};

// ---------------------------------------------------------------------------
// Transcripts

struct TranscriptEntry {
  std::string template_id;
  std::string rendered_prompt;
  std::string response_text;
  int attempt = 0;
  long latency_ms = 0;
  std::string timestamp;  // ISO-8601 UTC
};

class TranscriptLog {
 public:
  explicit TranscriptLog(std::filesystem::path path);
  void append(const TranscriptEntry& e);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

std::vector<TranscriptEntry> read_transcripts(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Operators

struct ProposeResult {
  std::vector<PruningConfig> configs;  // feasible, deduplicated, at most `count`
  int repair_events = 0;  // proposals the repair projection had to change
};

class Operator {
 public:
  virtual ~Operator() = default;
  // Up to `count` feasible configs of length `n` averaging `beta`. For
  // mutation/crossover `parents` carries the current population with
  // fitness. Never throws on malformed model output; a short or empty list
  // is the signal.
  virtual ProposeResult propose(OperatorKind kind, const std::vector<ScoredConfig>& parents,
                                int count, int n, double beta, CountingRng& rng) = 0;
  virtual Origin origin_for(OperatorKind kind) const = 0;
};

// Deterministic offline sampler:
//   init       per-coordinate uniform over [max(0, 2b-1), min(1, 2b)]
//   mutation   fitness-rank-weighted parent plus N(0, 0.05^2) per coordinate
//   crossover  two distinct rank-weighted parents blended per coordinate
//              with uniform [0,1] weights
// every draw followed by repair. Crossover over a single parent degrades to
// mutation.
class FallbackOperator : public Operator {
 public:
  ProposeResult propose(OperatorKind kind, const std::vector<ScoredConfig>& parents, int count,
                        int n, double beta, CountingRng& rng) override;
  Origin origin_for(OperatorKind) const override { return Origin::fallback; }
};

// Free-function form of the fallback mechanics.
std::vector<PruningConfig> fallback_propose(OperatorKind kind,
                                            const std::vector<ScoredConfig>& parents, int count,
                                            int n, double beta, CountingRng& rng,
                                            int* repair_events = nullptr);

// Live chat-endpoint operator. Renders the prompt, sends it, parses every
// bracketed list out of the response, repairs, deduplicates. Endpoint or
// parse trouble yields a short result rather than an exception.
class LlmOperator : public Operator {
 public:
  LlmOperator(ChatClientConfig client_cfg, std::string model_label,
              std::shared_ptr<TranscriptLog> transcript);
  ProposeResult propose(OperatorKind kind, const std::vector<ScoredConfig>& parents, int count,
                        int n, double beta, CountingRng& rng) override;
  Origin origin_for(OperatorKind kind) const override;

 private:
  ChatClient client_;
  std::string model_label_;
  std::shared_ptr<TranscriptLog> transcript_;
};

// Replays recorded responses through the same parse/repair pipeline, in
// recording order. Throws when the requested kind does not match the next
// recorded exchange (the transcript belongs to a different run shape).
class ReplayOperator : public Operator {
 public:
  explicit ReplayOperator(std::vector<TranscriptEntry> entries);
  ProposeResult propose(OperatorKind kind, const std::vector<ScoredConfig>& parents, int count,
                        int n, double beta, CountingRng& rng) override;
  Origin origin_for(OperatorKind kind) const override;

 private:
  std::vector<TranscriptEntry> entries_;
  std::size_t next_ = 0;
};

// Response budget for a request expected to list `count` configs of `n`
// rates each.
int auto_max_tokens(int n, int count);

// Shared post-processing: raw response text -> repaired, deduplicated
// configs (at most count).
ProposeResult postprocess_response(const std::string& text, int count, int n, double beta);

}  // namespace selfprune
