#include "selfprune/config_space.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <optional>
#include <stdexcept>

namespace selfprune {

namespace {

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double round5(double v) {
  double r = std::round(v * 1e5) / 1e5;
  if (r == 0.0) r = 0.0;  // normalize -0
  return r;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

PruningConfig::PruningConfig(std::vector<double> rates, double target_mean)
    : rates_(std::move(rates)), target_mean_(target_mean) {
  Verdict v = validate(rates_, target_mean_);
  if (!v.ok) throw std::invalid_argument("PruningConfig: " + v.violation);
}

std::string PruningConfig::canonical() const {
  std::string out = "[";
  char buf[32];
  for (std::size_t i = 0; i < rates_.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.5f", rates_[i]);
    if (i > 0) out += ", ";
    out += buf;
  }
  out += "]";
  return out;
}

Verdict validate(const std::vector<double>& rates, double target_mean, double tol) {
  if (rates.empty()) throw std::invalid_argument("validate: empty rate vector");
  if (!(tol > 0.0)) throw std::invalid_argument("validate: non-positive tolerance");
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (!std::isfinite(rates[i]))
      return {false, "rate[" + std::to_string(i) + "] non-finite"};
    if (rates[i] < 0.0 || rates[i] > 1.0)
      return {false, "rate[" + std::to_string(i) + "] out of [0,1]"};
  }
  const double mean = mean_of(rates);
  if (std::abs(mean - target_mean) > tol) return {false, "mean=" + format_real(mean)};
  return {true, ""};
}

std::pair<PruningConfig, RepairReport> repair(const std::vector<double>& raw, double target_mean) {
  if (raw.empty()) throw std::invalid_argument("repair: empty rate vector");
  if (!(target_mean >= 0.0 && target_mean <= 1.0))
    throw std::invalid_argument("repair: target mean outside [0,1]");
  for (double v : raw)
    if (!std::isfinite(v)) throw std::invalid_argument("repair: non-finite rate");

  constexpr double kIterTol = 1e-9;
  constexpr int kMaxIter = 100;

  const std::size_t n = raw.size();
  std::vector<double> x = raw;
  std::vector<char> clamped_ever(n, 0);
  RepairReport rep;
  double total_shift = 0.0;

  while (rep.iterations < kMaxIter) {
    ++rep.iterations;
    std::vector<char> clamped_now(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const double c = std::clamp(x[i], 0.0, 1.0);
      if (c != x[i]) {
        clamped_now[i] = 1;
        clamped_ever[i] = 1;
        x[i] = c;
      }
    }
    const double shift = target_mean - mean_of(x);
    if (std::abs(shift) <= kIterTol) break;
    bool any_free = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!clamped_now[i]) {
        x[i] += shift;
        any_free = true;
      }
    }
    // If every coordinate was just clamped, the next pass clamps nothing and
    // the shift reaches all of them.
    if (any_free) total_shift += shift;
  }

  for (double& v : x) v = round5(v);

  // The per-coordinate rounding can move the mean off target by up to half a
  // genome step; fold the residual into the coordinate with the most room.
  const double residual = target_mean - mean_of(x);
  if (residual != 0.0) {
    std::size_t j = 0;
    double best_room = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double room = std::min(x[i], 1.0 - x[i]);
      if (room > best_room) {
        best_room = room;
        j = i;
      }
    }
    x[j] = round5(std::clamp(x[j] + residual * static_cast<double>(n), 0.0, 1.0));
  }

  rep.clamped_count = static_cast<int>(std::count(clamped_ever.begin(), clamped_ever.end(), 1));
  rep.shift_applied = total_shift;
  rep.feasible = true;
  return {PruningConfig(std::move(x), target_mean), rep};
}

namespace {

// Content of one bracket pair -> numbers, or nullopt when any entry is not a
// plain number.
std::optional<std::vector<double>> parse_numeric_list(const std::string& body) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= body.size()) {
    std::size_t comma = body.find(',', start);
    const std::string entry =
        body.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const char* begin = entry.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin) return std::nullopt;
    while (*end == ' ' || *end == '\t' || *end == '\n' || *end == '\r') ++end;
    if (*end != '\0') return std::nullopt;
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) return std::nullopt;
  return out;
}

}  // namespace

ParsedConfigs parse_config_text(const std::string& text, int n, int expected_count) {
  if (n < 1) throw std::invalid_argument("parse_config_text: n must be positive");
  if (expected_count < 1) throw std::invalid_argument("parse_config_text: expected_count must be positive");

  ParsedConfigs out;
  out.expected = expected_count;
  std::size_t i = 0;
  while ((i = text.find('[', i)) != std::string::npos) {
    const std::size_t close = text.find(']', i + 1);
    if (close == std::string::npos) break;
    const std::size_t inner = text.find('[', i + 1);
    if (inner != std::string::npos && inner < close) {
      i = inner;  // descend into nested brackets
      continue;
    }
    auto nums = parse_numeric_list(text.substr(i + 1, close - i - 1));
    if (nums && static_cast<int>(nums->size()) == n) out.vectors.push_back(std::move(*nums));
    i = close + 1;
  }
  return out;
}

PruningConfig uniform_config(int n, double beta) {
  if (n < 1) throw std::invalid_argument("uniform_config: n must be positive");
  return PruningConfig(std::vector<double>(static_cast<std::size_t>(n), round5(beta)), beta);
}

}  // namespace selfprune
