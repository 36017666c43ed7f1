#pragma once
// Layer-wise pruning-rate vectors and the feasible set they live in:
// every rate in [0, 1] and the mean equal to the target removal fraction
// within a fixed tolerance. Also the text round-trip used to exchange
// configurations with a chat model.

#include <string>
#include <utility>
#include <vector>

namespace selfprune {

// A feasible pruning-rate vector. Construction validates; use repair() to
// turn an arbitrary real vector into one of these.
class PruningConfig {
 public:
  // |mean(rates) - target_mean| must stay within this bound.
  static constexpr double kMeanTol = 1e-5;

  PruningConfig() = default;
  // Throws std::invalid_argument when the vector violates the constraint set.
  PruningConfig(std::vector<double> rates, double target_mean);

  const std::vector<double>& rates() const { return rates_; }
  double target_mean() const { return target_mean_; }
  int n_layers() const { return static_cast<int>(rates_.size()); }

  // Bracketed 5-decimal form, e.g. "[0.30000, 0.10000]". Two configs are the
  // same genome exactly when their canonical strings match.
  std::string canonical() const;

  bool operator==(const PruningConfig& other) const = default;

 private:
  std::vector<double> rates_;
  double target_mean_ = 0.0;
};

struct Verdict {
  bool ok = false;
  std::string violation;  // names the first failing condition, empty when ok
};

struct RepairReport {
  int clamped_count = 0;     // distinct coordinates clamped at least once
  double shift_applied = 0;  // net uniform shift summed over iterations
  int iterations = 0;
  bool feasible = false;
};

struct ParsedConfigs {
  std::vector<std::vector<double>> vectors;
  int expected = 0;
  int found() const { return static_cast<int>(vectors.size()); }
  bool shortfall() const { return found() < expected; }
};

// Checks the box and mean constraints. Throws std::invalid_argument on an
// empty vector or non-positive tolerance.
Verdict validate(const std::vector<double>& rates, double target_mean,
                 double tol = PruningConfig::kMeanTol);

// Projects an arbitrary real vector onto the feasible set: alternate between
// clamping to [0, 1] and adding the uniform shift (target - mean) to the
// coordinates the clamp left untouched, then round to 5 decimals and absorb
// the rounding residual into the coordinate farthest from its bound.
// Idempotent on already-feasible vectors. Throws std::invalid_argument on
// empty input, non-finite entries, or target_mean outside [0, 1].
std::pair<PruningConfig, RepairReport> repair(const std::vector<double>& raw, double target_mean);

// Extracts every maximal bracketed comma-separated numeric list from free
// text and keeps the ones with exactly n entries. Never throws on malformed
// content; the caller reads ParsedConfigs::shortfall.
ParsedConfigs parse_config_text(const std::string& text, int n, int expected_count);

// The all-equal baseline [beta, beta, ..., beta].
PruningConfig uniform_config(int n, double beta);

// Round to 5 decimal places (the genome resolution).
double round5(double v);

// Minimal decimal rendering for prompt text, e.g. 0.3 -> "0.3".
std::string format_real(double v);

}  // namespace selfprune
