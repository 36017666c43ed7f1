#include "selfprune/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "selfprune/kernels.hpp"

namespace selfprune {

namespace {

constexpr double kNormEps = 1e-6;

void resize(Matrix& m, std::size_t r, std::size_t c) {
  m.rows = r;
  m.cols = c;
  m.data.resize(r * c);
}

// out[c] = x[c] * inv_rms * g[c]
void rmsnorm_scale(const float* x, const float* g, std::size_t n, float* out) {
  const double ms = kernels::sumsq(x, n) / static_cast<double>(n);
  const float inv = static_cast<float>(1.0 / std::sqrt(ms + kNormEps));
  for (std::size_t c = 0; c < n; ++c) out[c] = x[c] * inv * g[c];
}

float silu(float v) {
  return static_cast<float>(static_cast<double>(v) / (1.0 + std::exp(-static_cast<double>(v))));
}

double logsumexp(const float* row, std::size_t n) {
  double m = row[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, static_cast<double>(row[i]));
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(static_cast<double>(row[i]) - m);
  return m + std::log(s);
}

// Per-channel sum-of-squares accumulators, filled during the forward pass
// when calibration statistics are requested.
struct StatsAccum {
  struct Layer {
    std::vector<double> attn_sq, ffn_sq, mid_sq;
  };
  std::vector<Layer> layers;
};

struct Scratch {
  Matrix x, normed, q, k, v, attn_out, mid;
  std::vector<float> tmp;
  std::vector<double> probs;
};

// Runs the model over one window, leaving final-position hidden states in
// scratch.x. Writes next-token logits when out_logits is non-null and feeds
// the calibration accumulators when stats is non-null.
void forward_window(const Model& model, std::span<const std::uint32_t> tokens, Scratch& s,
                    Matrix* out_logits, StatsAccum* stats) {
  const ModelSpec& spec = model.spec;
  const std::size_t T = tokens.size();
  const std::size_t dm = static_cast<std::size_t>(spec.d_model);
  const std::size_t hd = static_cast<std::size_t>(spec.head_dim);

  resize(s.x, T, dm);
  resize(s.normed, T, dm);
  s.tmp.resize(dm);
  s.probs.resize(T);
  for (std::size_t t = 0; t < T; ++t)
    std::memcpy(s.x.row(t), model.token_embedding.row(tokens[t]), dm * sizeof(float));

  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerWeights& layer = model.layers[l];
    const std::size_t heads = static_cast<std::size_t>(layer.n_heads);
    const std::size_t attn_cols = heads * hd;
    const std::size_t ff = static_cast<std::size_t>(layer.d_ff);

    if (heads > 0) {
      for (std::size_t t = 0; t < T; ++t)
        rmsnorm_scale(s.x.row(t), layer.attn_norm.data(), dm, s.normed.row(t));
      if (stats)
        for (std::size_t t = 0; t < T; ++t)
          kernels::accum_sq(s.normed.row(t), stats->layers[l].attn_sq.data(), dm);

      resize(s.q, T, attn_cols);
      resize(s.k, T, attn_cols);
      resize(s.v, T, attn_cols);
      resize(s.attn_out, T, attn_cols);
      for (std::size_t t = 0; t < T; ++t) {
        kernels::matvec_rows(layer.w_q.data.data(), s.normed.row(t), dm, attn_cols, s.q.row(t));
        kernels::matvec_rows(layer.w_k.data.data(), s.normed.row(t), dm, attn_cols, s.k.row(t));
        kernels::matvec_rows(layer.w_v.data.data(), s.normed.row(t), dm, attn_cols, s.v.row(t));
      }

      const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = h * hd;
        for (std::size_t t = 0; t < T; ++t) {
          double mx = -1e300;
          for (std::size_t u = 0; u <= t; ++u) {
            const double sc =
                kernels::dot(s.q.row(t) + base, s.k.row(u) + base, hd) * inv_sqrt_hd;
            s.probs[u] = sc;
            mx = std::max(mx, sc);
          }
          double sum = 0.0;
          for (std::size_t u = 0; u <= t; ++u) {
            s.probs[u] = std::exp(s.probs[u] - mx);
            sum += s.probs[u];
          }
          float* orow = s.attn_out.row(t) + base;
          std::memset(orow, 0, hd * sizeof(float));
          for (std::size_t u = 0; u <= t; ++u)
            kernels::axpy(static_cast<float>(s.probs[u] / sum), s.v.row(u) + base, orow, hd);
        }
      }

      for (std::size_t t = 0; t < T; ++t) {
        kernels::matvec_rows(layer.w_o.data.data(), s.attn_out.row(t), attn_cols, dm,
                             s.tmp.data());
        kernels::axpy(1.0f, s.tmp.data(), s.x.row(t), dm);
      }
    } else if (stats) {
      // Still record what the (empty) attention block would read.
      for (std::size_t t = 0; t < T; ++t) {
        rmsnorm_scale(s.x.row(t), layer.attn_norm.data(), dm, s.normed.row(t));
        kernels::accum_sq(s.normed.row(t), stats->layers[l].attn_sq.data(), dm);
      }
    }

    if (ff > 0) {
      for (std::size_t t = 0; t < T; ++t)
        rmsnorm_scale(s.x.row(t), layer.ffn_norm.data(), dm, s.normed.row(t));
      if (stats)
        for (std::size_t t = 0; t < T; ++t)
          kernels::accum_sq(s.normed.row(t), stats->layers[l].ffn_sq.data(), dm);

      resize(s.mid, T, ff);
      for (std::size_t t = 0; t < T; ++t) {
        float* mrow = s.mid.row(t);
        kernels::matvec_rows(layer.w_up.data.data(), s.normed.row(t), dm, ff, mrow);
        for (std::size_t c = 0; c < ff; ++c) mrow[c] = silu(mrow[c]);
        if (stats) kernels::accum_sq(mrow, stats->layers[l].mid_sq.data(), ff);
        kernels::matvec_rows(layer.w_down.data.data(), mrow, ff, dm, s.tmp.data());
        kernels::axpy(1.0f, s.tmp.data(), s.x.row(t), dm);
      }
    } else if (stats) {
      for (std::size_t t = 0; t < T; ++t) {
        rmsnorm_scale(s.x.row(t), layer.ffn_norm.data(), dm, s.normed.row(t));
        kernels::accum_sq(s.normed.row(t), stats->layers[l].ffn_sq.data(), dm);
      }
    }
  }

  if (out_logits) {
    const std::size_t vocab = static_cast<std::size_t>(spec.vocab_size);
    resize(*out_logits, T, vocab);
    for (std::size_t t = 0; t < T; ++t) {
      rmsnorm_scale(s.x.row(t), model.final_norm.data(), dm, s.tmp.data());
      float* lrow = out_logits->row(t);
      for (std::size_t vtok = 0; vtok < vocab; ++vtok)
        lrow[vtok] = static_cast<float>(
            kernels::dot(model.token_embedding.row(vtok), s.tmp.data(), dm));
    }
  }
}

void check_tokens(const Model& model, std::span<const std::uint32_t> tokens) {
  if (tokens.empty()) throw std::invalid_argument("logits: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(model.spec.max_seq_len))
    throw std::invalid_argument("logits: sequence longer than max_seq_len");
  for (const std::uint32_t t : tokens)
    if (t >= static_cast<std::uint32_t>(model.spec.vocab_size))
      throw std::invalid_argument("logits: token id exceeds vocab_size");
}

void check_window_args(const Model& model, const TokenCorpus& corpus, int seq_len,
                       const char* who) {
  if (seq_len < 2 || seq_len > model.spec.max_seq_len)
    throw std::invalid_argument(std::string(who) + ": seq_len must be in [2, max_seq_len]");
  if (corpus.vocab_size > model.spec.vocab_size)
    throw std::invalid_argument(std::string(who) + ": corpus vocabulary exceeds the model's");
  if (corpus.tokens.size() < static_cast<std::size_t>(seq_len))
    throw std::invalid_argument(std::string(who) + ": corpus shorter than one window");
}

}  // namespace

Matrix logits(const Model& model, std::span<const std::uint32_t> tokens) {
  check_tokens(model, tokens);
  Scratch s;
  Matrix out;
  forward_window(model, tokens, s, &out, nullptr);
  return out;
}

PerplexityResult perplexity(const Model& model, const TokenCorpus& corpus, int seq_len) {
  check_window_args(model, corpus, seq_len, "perplexity");
  const std::size_t T = static_cast<std::size_t>(seq_len);
  const std::size_t n_windows = corpus.tokens.size() / T;

  Scratch s;
  Matrix win_logits;
  double nll = 0.0;
  long positions = 0;
  for (std::size_t w = 0; w < n_windows; ++w) {
    const std::span<const std::uint32_t> window(corpus.tokens.data() + w * T, T);
    forward_window(model, window, s, &win_logits, nullptr);
    for (std::size_t t = 0; t + 1 < T; ++t) {
      const float* row = win_logits.row(t);
      nll += logsumexp(row, win_logits.cols) - static_cast<double>(row[window[t + 1]]);
      ++positions;
    }
  }
  PerplexityResult r;
  r.positions = positions;
  r.windows = static_cast<long>(n_windows);
  r.perplexity = std::exp(nll / static_cast<double>(positions));
  return r;
}

ActivationStats collect_activation_stats(const Model& model, const TokenCorpus& calib,
                                         int seq_len) {
  check_window_args(model, calib, seq_len, "collect_activation_stats");
  const std::size_t T = static_cast<std::size_t>(seq_len);
  const std::size_t n_windows = calib.tokens.size() / T;
  const std::size_t dm = static_cast<std::size_t>(model.spec.d_model);

  StatsAccum acc;
  acc.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    acc.layers[l].attn_sq.assign(dm, 0.0);
    acc.layers[l].ffn_sq.assign(dm, 0.0);
    acc.layers[l].mid_sq.assign(static_cast<std::size_t>(model.layers[l].d_ff), 0.0);
  }

  Scratch s;
  for (std::size_t w = 0; w < n_windows; ++w) {
    const std::span<const std::uint32_t> window(calib.tokens.data() + w * T, T);
    forward_window(model, window, s, nullptr, &acc);
  }

  ActivationStats stats;
  stats.token_count = static_cast<long>(n_windows * T);
  stats.layers.resize(acc.layers.size());
  for (std::size_t l = 0; l < acc.layers.size(); ++l) {
    auto root = [](std::vector<double>& v) {
      for (double& e : v) e = std::sqrt(e);
      return std::move(v);
    };
    stats.layers[l].attn_input_norms = root(acc.layers[l].attn_sq);
    stats.layers[l].ffn_input_norms = root(acc.layers[l].ffn_sq);
    stats.layers[l].ffn_mid_norms = root(acc.layers[l].mid_sq);
  }
  return stats;
}

ThroughputResult benchmark_throughput(const Model& model, long n_tokens, int repeats) {
  if (n_tokens < 1) throw std::invalid_argument("benchmark_throughput: n_tokens must be positive");
  if (repeats < 3) throw std::invalid_argument("benchmark_throughput: repeats must be at least 3");

  std::vector<std::uint32_t> tokens(static_cast<std::size_t>(n_tokens));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    tokens[i] = static_cast<std::uint32_t>(i % static_cast<std::size_t>(model.spec.vocab_size));

  const std::size_t win = static_cast<std::size_t>(model.spec.max_seq_len);
  Scratch s;
  Matrix win_logits;
  volatile double sink = 0.0;
  std::vector<double> secs;
  secs.reserve(static_cast<std::size_t>(repeats));
  for (int r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t off = 0; off < tokens.size(); off += win) {
      const std::size_t len = std::min(win, tokens.size() - off);
      forward_window(model, {tokens.data() + off, len}, s, &win_logits, nullptr);
      sink = sink + static_cast<double>(win_logits.data.back());
    }
    const auto stop = std::chrono::steady_clock::now();
    secs.push_back(std::chrono::duration<double>(stop - start).count());
  }
  std::sort(secs.begin(), secs.end());
  const double med = secs[secs.size() / 2];

  ThroughputResult r;
  r.repeats = repeats;
  r.n_tokens = n_tokens;
  r.tokens_per_s = static_cast<double>(n_tokens) / med;
  return r;
}

long block_param_count(const Model& model) {
  long n = 0;
  for (const auto& layer : model.layers) {
    n += static_cast<long>(layer.w_q.size() + layer.w_k.size() + layer.w_v.size() +
                           layer.w_o.size() + layer.w_up.size() + layer.w_down.size());
  }
  return n;
}

long total_param_count(const Model& model) {
  long n = block_param_count(model) + static_cast<long>(model.token_embedding.size()) +
           static_cast<long>(model.final_norm.size());
  for (const auto& layer : model.layers)
    n += static_cast<long>(layer.attn_norm.size() + layer.ffn_norm.size());
  return n;
}

}  // namespace selfprune
