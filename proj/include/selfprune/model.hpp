#pragma once
// The toy decoder-only transformer: architecture description, weight
// container with on-disk format, and token corpora.
//
// Weight container format "SPRN1", little-endian throughout:
//   bytes 0..4   magic "SPRN1"
//   7 x u32      n_layers, d_model, n_heads, head_dim, d_ff, vocab_size,
//                max_seq_len (the dense architecture)
//   per layer    2 x u32: live head count, live FFN channel count
//   tensors      row-major f32 in declaration order: token_embedding;
//                per layer w_q, w_k, w_v, w_o, w_up, w_down, attn_norm,
//                ffn_norm; final_norm
//
// Corpus files are a raw little-endian u32 token-id sequence plus a text
// sidecar "<path>.meta" naming the vocabulary size.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "selfprune/matrix.hpp"

namespace selfprune {

// Dense architecture. Live per-layer sizes after pruning are carried by the
// layers themselves.
struct ModelSpec {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int head_dim = 0;
  int d_ff = 0;
  int vocab_size = 0;
  int max_seq_len = 0;

  // Throws std::invalid_argument unless all fields are positive and
  // d_model == n_heads * head_dim.
  static ModelSpec create(int n_layers, int d_model, int n_heads, int d_ff, int vocab_size,
                          int max_seq_len);
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

struct LayerWeights {
  int n_heads = 0;  // live heads in this layer
  int d_ff = 0;     // live FFN channels in this layer
  Matrix w_q, w_k, w_v;  // d_model x (n_heads * head_dim), head h owns column block h
  Matrix w_o;            // (n_heads * head_dim) x d_model, head h owns row block h
  Matrix w_up;           // d_model x d_ff, channel c owns column c
  Matrix w_down;         // d_ff x d_model, channel c owns row c
  std::vector<float> attn_norm;  // d_model, pre-attention normalization scales
  std::vector<float> ffn_norm;   // d_model, pre-FFN normalization scales

  bool operator==(const LayerWeights&) const = default;
};

struct Model {
  ModelSpec spec;
  Matrix token_embedding;  // vocab_size x d_model; also the tied output head
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // d_model

  bool operator==(const Model&) const = default;
};

// Seeded random weights, scale 1/sqrt(d_model), normalization scales at 1.
// Same (spec, seed) yields bit-identical models; the generator and fill
// order are fixed and do not depend on the standard library's distributions.
Model init_random_model(const ModelSpec& spec, std::uint64_t seed);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

struct TokenCorpus {
  std::vector<std::uint32_t> tokens;
  int vocab_size = 0;
  std::string name;
};

// Seeded synthetic corpus with ids uniform over the vocabulary.
TokenCorpus generate_corpus(int vocab_size, std::size_t n_tokens, std::uint64_t seed,
                            std::string name);

void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path);
TokenCorpus load_corpus(const std::filesystem::path& path);

// FNV-1a over the file bytes; printed by the CLI so runs can be compared.
std::uint64_t file_checksum(const std::filesystem::path& path);

}  // namespace selfprune
