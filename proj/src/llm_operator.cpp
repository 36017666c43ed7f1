#include "selfprune/llm_operator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace selfprune {

namespace {

std::string now_iso8601() {
  const std::time_t tt = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fitness4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

constexpr const char* kAttributeBullets =
    "\xC2\xB7 Contain {n} decimals between 0 and 1, accurate to 5 decimal places.\n"
    "\n"
    "\xC2\xB7 Ensure the average of these numbers equals {beta}.\n"
    "\n"
    "\xC2\xB7 Be distinct, starting with \"[\" and ending with \"]\".\n";

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

}  // namespace

std::string to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::init:
      return "init";
    case OperatorKind::mutation:
      return "mutation";
    case OperatorKind::crossover:
      return "crossover";
  }
  return "unknown";
}

std::string to_string(Origin o) {
  switch (o) {
    case Origin::init:
      return "init";
    case Origin::mutation:
      return "mutation";
    case Origin::crossover:
      return "crossover";
    case Origin::fallback:
      return "fallback";
  }
  return "unknown";
}

Origin origin_from_string(const std::string& s) {
  if (s == "init") return Origin::init;
  if (s == "mutation") return Origin::mutation;
  if (s == "crossover") return Origin::crossover;
  if (s == "fallback") return Origin::fallback;
  throw std::invalid_argument("origin_from_string: unknown origin " + s);
}

std::string render_init_prompt(const std::string& model_label, int n_layers, int population_size,
                               double beta) {
  if (n_layers < 1 || population_size < 1)
    throw std::invalid_argument("render_init_prompt: counts must be positive");
  std::string p =
      "### Problem description and task instruction ###\n"
      "\n"
      "Let's think step by step! You are helping me prune the {model}, aiming to minimize "
      "perplexity on the WikiText-2 dataset. The model has {n} transformer layers. Layer-wise "
      "pruning rate measures how many parameters are pruned from each layer of the model. "
      "Different layers may have different pruning rates based on their importance and "
      "contribution to the performance of model. You need to generate {k} valid layer-wise "
      "pruning rate configurations. Each configuration should:\n"
      "\n"
      "### Solution attributes ###\n"
      "\n";
  p += kAttributeBullets;
  p +=
      "\n"
      "Your response should only contain the {k} configurations without any additional text.";
  replace_all(p, "{model}", model_label);
  replace_all(p, "{n}", std::to_string(n_layers));
  replace_all(p, "{k}", std::to_string(population_size));
  replace_all(p, "{beta}", format_real(beta));
  return p;
}

std::string render_evolve_prompt(OperatorKind kind, const std::string& model_label,
                                 const std::vector<ScoredConfig>& population, int count) {
  if (kind != OperatorKind::mutation && kind != OperatorKind::crossover)
    throw std::invalid_argument("render_evolve_prompt: kind must be mutation or crossover");
  if (population.empty()) throw std::invalid_argument("render_evolve_prompt: empty population");
  if (count < 1) throw std::invalid_argument("render_evolve_prompt: count must be positive");

  const int n = population.front().config.n_layers();
  const double beta = population.front().config.target_mean();
  std::string p =
      "### Problem description and task instruction ###\n"
      "\n"
      "Let's think step by step! You will receive {p} lists representing the layer-wise pruning "
      "rates of the {model} and a fitness value for each list. The lower the fitness value, the "
      "better. Your task is to perform the {op} operation in the evolutionary algorithm to "
      "generate new configurations. Each new pruning rate configuration list should:\n"
      "\n"
      "### Solution attributes ###\n"
      "\n";
  p += kAttributeBullets;
  p +=
      "\n"
      "Please provide exactly {count} new configurations based on the existing data provided "
      "below without any additional text.\n"
      "\n"
      "### Current Population and Fitnesses ###\n"
      "\n"
      "Here are the existing layer-wise pruning rate configurations and their fitness values:\n";
  for (std::size_t i = 0; i < population.size(); ++i) {
    p += "\nConfiguration" + std::to_string(i + 1) + ": " + population[i].config.canonical() +
         ", Fitness" + std::to_string(i + 1) + ": " + fitness4(population[i].fitness);
  }
  replace_all(p, "{p}", std::to_string(population.size()));
  replace_all(p, "{model}", model_label);
  replace_all(p, "{op}", to_string(kind));
  replace_all(p, "{n}", std::to_string(n));
  replace_all(p, "{count}", std::to_string(count));
  replace_all(p, "{beta}", format_real(beta));
  return p;
}

// ---------------------------------------------------------------------------

ChatClient::ChatClient(ChatClientConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.endpoint_url.rfind("http://", 0) != 0 && cfg_.endpoint_url.rfind("https://", 0) != 0)
    throw std::invalid_argument("ChatClient: endpoint URL must start with http:// or https://");
#if !defined(CPPHTTPLIB_OPENSSL_SUPPORT)
  if (cfg_.endpoint_url.rfind("https://", 0) == 0)
    throw std::invalid_argument("ChatClient: built without TLS support, use an http endpoint");
#endif
  if (cfg_.max_attempts < 1) throw std::invalid_argument("ChatClient: max_attempts must be >= 1");
}

Completion ChatClient::complete(const std::string& prompt, int max_tokens) const {
  const std::size_t scheme_end = cfg_.endpoint_url.find("://");
  const std::size_t path_start = cfg_.endpoint_url.find('/', scheme_end + 3);
  const std::string base = path_start == std::string::npos ? cfg_.endpoint_url
                                                           : cfg_.endpoint_url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? std::string("/")
                                                           : cfg_.endpoint_url.substr(path_start);

  const nlohmann::json request = {
      {"model", cfg_.model_name},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
      {"temperature", cfg_.temperature},
      {"max_tokens", max_tokens}};
  const std::string body = request.dump();

  httplib::Client cli(base);
  cli.set_connection_timeout(30, 0);
  cli.set_read_timeout(120, 0);
  httplib::Headers headers;
  if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

  const auto start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                                 start)
        .count();
  };

  std::string last_error;
  for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
    if (attempt > 1) {
      const long wait = static_cast<long>(cfg_.backoff_base_ms) << (attempt - 2);
      std::this_thread::sleep_for(std::chrono::milliseconds(wait));
    }
    httplib::Result res = cli.Post(path, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "endpoint status " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      throw std::runtime_error("ChatClient: endpoint status " + std::to_string(res->status));
    try {
      const nlohmann::json j = nlohmann::json::parse(res->body);
      Completion c;
      c.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
      c.attempt = attempt;
      c.latency_ms = elapsed_ms();
      return c;
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("ChatClient: malformed completion payload: ") +
                               e.what());
    }
  }
  throw std::runtime_error("ChatClient: giving up after " + std::to_string(cfg_.max_attempts) +
                           " attempts; last error: " + last_error);
}

// ---------------------------------------------------------------------------

TranscriptLog::TranscriptLog(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void TranscriptLog::append(const TranscriptEntry& e) {
  std::ofstream os(path_, std::ios::app);
  if (!os) throw std::runtime_error("TranscriptLog: cannot open " + path_.string());
  const nlohmann::json j = {{"template_id", e.template_id},
                            {"rendered_prompt", e.rendered_prompt},
                            {"response_text", e.response_text},
                            {"attempt", e.attempt},
                            {"latency_ms", e.latency_ms},
                            {"timestamp", e.timestamp}};
  os << j.dump() << "\n";
}

std::vector<TranscriptEntry> read_transcripts(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_transcripts: cannot open " + path.string());
  std::vector<TranscriptEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      TranscriptEntry e;
      e.template_id = j.at("template_id").get<std::string>();
      e.rendered_prompt = j.at("rendered_prompt").get<std::string>();
      e.response_text = j.at("response_text").get<std::string>();
      e.attempt = j.at("attempt").get<int>();
      e.latency_ms = j.at("latency_ms").get<long>();
      e.timestamp = j.at("timestamp").get<std::string>();
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("read_transcripts: bad line " + std::to_string(line_no) + " in " +
                               path.string() + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

int auto_max_tokens(int n, int count) { return 16 * n * count + 256; }

ProposeResult postprocess_response(const std::string& text, int count, int n, double beta) {
  ProposeResult r;
  const ParsedConfigs parsed = parse_config_text(text, n, count);
  std::set<std::string> seen;
  for (const auto& raw : parsed.vectors) {
    if (static_cast<int>(r.configs.size()) >= count) break;
    try {
      auto [cfg, rep] = repair(raw, beta);
      if (!seen.insert(cfg.canonical()).second) continue;
      if (rep.clamped_count > 0 || std::abs(rep.shift_applied) > 1e-9) ++r.repair_events;
      r.configs.push_back(std::move(cfg));
    } catch (const std::invalid_argument&) {
      // non-finite entries; drop the proposal
    }
  }
  return r;
}

namespace {

// Rank-weighted parent pick: best fitness gets weight P, worst weight 1.
std::size_t rank_weighted_pick(const std::vector<ScoredConfig>& parents,
                               const std::vector<std::size_t>& by_rank, CountingRng& rng) {
  const std::size_t p = parents.size();
  const double total = static_cast<double>(p * (p + 1)) / 2.0;
  double threshold = rng.uniform() * total;
  for (std::size_t i = 0; i < p; ++i) {
    threshold -= static_cast<double>(p - i);
    if (threshold < 0.0) return by_rank[i];
  }
  return by_rank[p - 1];
}

std::vector<std::size_t> fitness_ranks(const std::vector<ScoredConfig>& parents) {
  std::vector<std::size_t> by_rank(parents.size());
  for (std::size_t i = 0; i < parents.size(); ++i) by_rank[i] = i;
  std::stable_sort(by_rank.begin(), by_rank.end(), [&](std::size_t a, std::size_t b) {
    return parents[a].fitness < parents[b].fitness;
  });
  return by_rank;
}

}  // namespace

std::vector<PruningConfig> fallback_propose(OperatorKind kind,
                                            const std::vector<ScoredConfig>& parents, int count,
                                            int n, double beta, CountingRng& rng,
                                            int* repair_events) {
  if (count < 1) throw std::invalid_argument("fallback_propose: count must be positive");
  if (n < 1) throw std::invalid_argument("fallback_propose: n must be positive");
  if (kind != OperatorKind::init && parents.empty())
    throw std::invalid_argument("fallback_propose: evolve kinds need parents");

  if (kind == OperatorKind::crossover && parents.size() < 2) {
    std::cerr << "fallback operator: single parent, crossover degrades to mutation\n";
    kind = OperatorKind::mutation;
  }

  const auto by_rank = parents.empty() ? std::vector<std::size_t>{} : fitness_ranks(parents);
  std::vector<PruningConfig> out;
  for (int i = 0; i < count; ++i) {
    std::vector<double> raw(static_cast<std::size_t>(n));
    switch (kind) {
      case OperatorKind::init: {
        const double lo = std::max(0.0, 2.0 * beta - 1.0);
        const double hi = std::min(1.0, 2.0 * beta);
        for (double& v : raw) v = rng.uniform_in(lo, hi);
        break;
      }
      case OperatorKind::mutation: {
        const auto& parent = parents[rank_weighted_pick(parents, by_rank, rng)];
        for (std::size_t c = 0; c < raw.size(); ++c)
          raw[c] = parent.config.rates()[c] + rng.normal(0.05);
        break;
      }
      case OperatorKind::crossover: {
        const std::size_t a = rank_weighted_pick(parents, by_rank, rng);
        std::size_t b = a;
        for (int tries = 0; tries < 64 && b == a; ++tries)
          b = rank_weighted_pick(parents, by_rank, rng);
        if (b == a) b = (a + 1) % parents.size();
        const auto& ra = parents[a].config.rates();
        const auto& rb = parents[b].config.rates();
        for (std::size_t c = 0; c < raw.size(); ++c) {
          const double lambda = rng.uniform();
          raw[c] = lambda * ra[c] + (1.0 - lambda) * rb[c];
        }
        break;
      }
    }
    auto [cfg, rep] = repair(raw, beta);
    if (repair_events && (rep.clamped_count > 0 || std::abs(rep.shift_applied) > 1e-9))
      ++*repair_events;
    out.push_back(std::move(cfg));
  }
  return out;
}

ProposeResult FallbackOperator::propose(OperatorKind kind, const std::vector<ScoredConfig>& parents,
                                        int count, int n, double beta, CountingRng& rng) {
  ProposeResult r;
  auto configs = fallback_propose(kind, parents, count, n, beta, rng, &r.repair_events);
  std::set<std::string> seen;
  for (auto& c : configs)
    if (seen.insert(c.canonical()).second) r.configs.push_back(std::move(c));
  return r;
}

// ---------------------------------------------------------------------------

LlmOperator::LlmOperator(ChatClientConfig client_cfg, std::string model_label,
                         std::shared_ptr<TranscriptLog> transcript)
    : client_(std::move(client_cfg)),
      model_label_(std::move(model_label)),
      transcript_(std::move(transcript)) {}

Origin LlmOperator::origin_for(OperatorKind kind) const {
  switch (kind) {
    case OperatorKind::init:
      return Origin::init;
    case OperatorKind::mutation:
      return Origin::mutation;
    case OperatorKind::crossover:
      return Origin::crossover;
  }
  return Origin::fallback;
}

ProposeResult LlmOperator::propose(OperatorKind kind, const std::vector<ScoredConfig>& parents,
                                   int count, int n, double beta, CountingRng&) {
  const std::string prompt = kind == OperatorKind::init
                                 ? render_init_prompt(model_label_, n, count, beta)
                                 : render_evolve_prompt(kind, model_label_, parents, count);
  const char* template_id = kind == OperatorKind::init ? kInitTemplateId
                            : kind == OperatorKind::mutation ? kEvolveMutationTemplateId
                                                             : kEvolveCrossoverTemplateId;
  Completion comp;
  try {
    comp = client_.complete(prompt, auto_max_tokens(n, count));
  } catch (const std::exception& e) {
    std::cerr << "llm operator: " << to_string(kind) << " request failed: " << e.what() << "\n";
    return {};
  }
  if (transcript_) {
    transcript_->append(
        {template_id, prompt, comp.text, comp.attempt, comp.latency_ms, now_iso8601()});
  }
  return postprocess_response(comp.text, count, n, beta);
}

// ---------------------------------------------------------------------------

ReplayOperator::ReplayOperator(std::vector<TranscriptEntry> entries)
    : entries_(std::move(entries)) {}

Origin ReplayOperator::origin_for(OperatorKind kind) const {
  switch (kind) {
    case OperatorKind::init:
      return Origin::init;
    case OperatorKind::mutation:
      return Origin::mutation;
    case OperatorKind::crossover:
      return Origin::crossover;
  }
  return Origin::fallback;
}

ProposeResult ReplayOperator::propose(OperatorKind kind, const std::vector<ScoredConfig>&,
                                      int count, int n, double beta, CountingRng&) {
  const char* want = kind == OperatorKind::init ? kInitTemplateId
                     : kind == OperatorKind::mutation ? kEvolveMutationTemplateId
                                                      : kEvolveCrossoverTemplateId;
  if (next_ >= entries_.size())
    throw std::runtime_error("ReplayOperator: transcript exhausted before " + to_string(kind) +
                             " request");
  const TranscriptEntry& e = entries_[next_];
  if (e.template_id != want)
    throw std::runtime_error("ReplayOperator: transcript has " + e.template_id + " where " +
                             std::string(want) + " was requested");
  ++next_;
  return postprocess_response(e.response_text, count, n, beta);
}

}  // namespace selfprune
