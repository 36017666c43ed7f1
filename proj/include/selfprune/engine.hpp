#pragma once
// Forward pass and the measurements built on it: next-token perplexity,
// per-channel calibration norms, throughput, and parameter accounting.
//
// The forward pass is a standard causal decoder: pre-norm blocks, multi-head
// attention with scores scaled by 1/sqrt(head_dim), a gate-free smooth
// activation between w_up and w_down, residual connections, and a tied
// embedding/output head. Layers may carry fewer live heads or FFN channels
// than the dense architecture; a layer with zero units degrades to the
// residual path.

#include <cstdint>
#include <span>

#include "selfprune/matrix.hpp"
#include "selfprune/model.hpp"

namespace selfprune {

// Next-token logits for every position; rows = positions, cols = vocabulary.
// Position t only sees tokens 0..t.
Matrix logits(const Model& model, std::span<const std::uint32_t> tokens);

struct PerplexityResult {
  double perplexity = 0.0;
  long positions = 0;  // next-token predictions scored
  long windows = 0;
};

// exp(mean negative log-likelihood) over consecutive non-overlapping windows
// of seq_len tokens; a trailing remainder shorter than one window is
// dropped. Throws when the corpus does not cover a single window or token
// ids exceed the model vocabulary.
PerplexityResult perplexity(const Model& model, const TokenCorpus& corpus, int seq_len);

struct ActivationStats {
  struct Layer {
    // l2 norm over all calibration positions of each input channel feeding
    // w_q/w_k/w_v, w_up, and w_down respectively.
    std::vector<double> attn_input_norms;  // d_model
    std::vector<double> ffn_input_norms;   // d_model
    std::vector<double> ffn_mid_norms;     // live FFN channels
  };
  std::vector<Layer> layers;
  long token_count = 0;
};

ActivationStats collect_activation_stats(const Model& model, const TokenCorpus& calib,
                                         int seq_len);

struct ThroughputResult {
  double tokens_per_s = 0.0;  // median over repeats
  int repeats = 0;
  long n_tokens = 0;
};

// Wall-clock decode throughput over synthetic tokens, processed in windows
// of max_seq_len. Median of `repeats` timed passes, repeats >= 3.
ThroughputResult benchmark_throughput(const Model& model, long n_tokens, int repeats);

// Parameters in the transformer blocks' weight matrices (w_q, w_k, w_v, w_o,
// w_up, w_down). Normalization scale vectors and the embedding are excluded;
// this is the count structured pruning acts on.
long block_param_count(const Model& model);

// Block parameters plus embedding and all normalization scale vectors. The
// tied output head shares the embedding and is not counted twice.
long total_param_count(const Model& model);

}  // namespace selfprune
