#pragma once
// Structured pruning of whole attention heads and FFN channels, scored by
// |weight| * input-activation-norm and realized by slicing the weight
// matrices.
//
// Scores follow the weight-times-input-norm rule per element and sum over
// each removable unit:
//   head h:    all w_q/w_k/w_v elements in its column block, inputs weighted
//              by the layer's attn_input_norms, plus its w_o row block. The
//              true inputs to w_o are per-head attention outputs; collecting
//              them would need an extra forward hook, so w_o row r is
//              weighted by attn_input_norms[r], the residual-stream norm at
//              the same channel position. This approximation is recorded in
//              the plan document.
//   channel c: its w_up column weighted by ffn_input_norms plus its w_down
//              row weighted by the channel's own ffn_mid_norms entry.

#include <vector>

#include "json.hpp"
#include "selfprune/config_space.hpp"
#include "selfprune/engine.hpp"
#include "selfprune/model.hpp"

namespace selfprune {

enum class UnitKind { head, ffn_channel };

struct UnitScore {
  int layer = 0;
  UnitKind kind = UnitKind::head;
  int unit_index = 0;
  double score = 0.0;
};

struct PrunePlan {
  struct Layer {
    std::vector<int> kept_heads;         // ascending original indices
    std::vector<int> kept_ffn_channels;  // ascending original indices
    int heads_before = 0;
    int ffn_before = 0;
    int heads_removed() const { return heads_before - static_cast<int>(kept_heads.size()); }
    int ffn_removed() const { return ffn_before - static_cast<int>(kept_ffn_channels.size()); }
  };
  std::vector<Layer> layers;
};

// Scores for every live unit of one layer. Throws when the stats shapes do
// not match the model.
std::vector<UnitScore> wanda_sp_unit_scores(const Model& model, const ActivationStats& stats,
                                            int layer);

// Units to remove for a fractional rate: round(rate * n_units) with exact
// halves rounding down, clamped to [0, n_units].
int rate_to_counts(double rate, int n_units);

// Per-layer keep decisions: remove the lowest-scoring units first; on equal
// scores the lower unit index is removed first.
PrunePlan plan(const Model& model, const ActivationStats& stats, const PruningConfig& config);

// New model with only the kept units. Shared tensors (embedding, norms) are
// copied untouched; a full-keep plan reproduces the input bit for bit.
Model apply(const Model& model, const PrunePlan& plan);

// Audit document: per layer the kept index lists, the before/removed
// accounting, and the scoring approximation note.
nlohmann::json plan_to_json(const PrunePlan& plan);

}  // namespace selfprune
