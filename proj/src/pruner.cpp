#include "selfprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace selfprune {

namespace {

void check_stats(const Model& model, const ActivationStats& stats) {
  if (stats.layers.size() != model.layers.size())
    throw std::invalid_argument("pruner: stats layer count does not match model");
  const std::size_t dm = static_cast<std::size_t>(model.spec.d_model);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (stats.layers[l].attn_input_norms.size() != dm ||
        stats.layers[l].ffn_input_norms.size() != dm ||
        stats.layers[l].ffn_mid_norms.size() != static_cast<std::size_t>(model.layers[l].d_ff))
      throw std::invalid_argument("pruner: stats shapes do not match model at layer " +
                                  std::to_string(l));
  }
}

double column_block_score(const Matrix& w, const std::vector<double>& input_norms,
                          std::size_t col_begin, std::size_t col_count) {
  double s = 0.0;
  for (std::size_t r = 0; r < w.rows; ++r) {
    const float* row = w.row(r);
    const double norm = input_norms[r];
    for (std::size_t c = col_begin; c < col_begin + col_count; ++c)
      s += std::abs(static_cast<double>(row[c])) * norm;
  }
  return s;
}

// Lowest score first, equal scores remove the lower index first; the first
// `remove` entries of the resulting order go away.
std::vector<int> kept_after_removal(const std::vector<double>& scores, int remove) {
  const int n = static_cast<int>(scores.size());
  std::vector<int> order(scores.size());
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<int> kept(order.begin() + remove, order.end());
  std::sort(kept.begin(), kept.end());
  return kept;
}

}  // namespace

std::vector<UnitScore> wanda_sp_unit_scores(const Model& model, const ActivationStats& stats,
                                            int layer) {
  check_stats(model, stats);
  if (layer < 0 || layer >= static_cast<int>(model.layers.size()))
    throw std::invalid_argument("wanda_sp_unit_scores: layer out of range");

  const LayerWeights& lw = model.layers[static_cast<std::size_t>(layer)];
  const ActivationStats::Layer& ls = stats.layers[static_cast<std::size_t>(layer)];
  const std::size_t hd = static_cast<std::size_t>(model.spec.head_dim);

  std::vector<UnitScore> out;
  for (int h = 0; h < lw.n_heads; ++h) {
    const std::size_t base = static_cast<std::size_t>(h) * hd;
    double s = column_block_score(lw.w_q, ls.attn_input_norms, base, hd) +
               column_block_score(lw.w_k, ls.attn_input_norms, base, hd) +
               column_block_score(lw.w_v, ls.attn_input_norms, base, hd);
    for (std::size_t r = base; r < base + hd; ++r) {
      const double norm = ls.attn_input_norms[r];
      const float* row = lw.w_o.row(r);
      for (std::size_t c = 0; c < lw.w_o.cols; ++c)
        s += std::abs(static_cast<double>(row[c])) * norm;
    }
    out.push_back({layer, UnitKind::head, h, s});
  }

  for (int c = 0; c < lw.d_ff; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < lw.w_up.rows; ++r)
      s += std::abs(static_cast<double>(lw.w_up.at(r, static_cast<std::size_t>(c)))) *
           ls.ffn_input_norms[r];
    const float* drow = lw.w_down.row(static_cast<std::size_t>(c));
    double down_abs = 0.0;
    for (std::size_t j = 0; j < lw.w_down.cols; ++j)
      down_abs += std::abs(static_cast<double>(drow[j]));
    s += down_abs * ls.ffn_mid_norms[static_cast<std::size_t>(c)];
    out.push_back({layer, UnitKind::ffn_channel, c, s});
  }
  return out;
}

int rate_to_counts(double rate, int n_units) {
  if (n_units < 0) throw std::invalid_argument("rate_to_counts: negative unit count");
  if (!(rate >= 0.0 && rate <= 1.0))
    throw std::invalid_argument("rate_to_counts: rate outside [0,1]");
  // round half down: ceil(x - 0.5)
  const long k = static_cast<long>(std::ceil(rate * static_cast<double>(n_units) - 0.5));
  return static_cast<int>(std::clamp(k, 0L, static_cast<long>(n_units)));
}

PrunePlan plan(const Model& model, const ActivationStats& stats, const PruningConfig& config) {
  check_stats(model, stats);
  if (config.n_layers() != static_cast<int>(model.layers.size()))
    throw std::invalid_argument("plan: config layer count does not match model");

  PrunePlan p;
  p.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto scores = wanda_sp_unit_scores(model, stats, static_cast<int>(l));
    std::vector<double> head_scores, ffn_scores;
    for (const auto& u : scores) {
      if (u.kind == UnitKind::head)
        head_scores.push_back(u.score);
      else
        ffn_scores.push_back(u.score);
    }
    const double rate = config.rates()[l];
    auto& pl = p.layers[l];
    pl.heads_before = model.layers[l].n_heads;
    pl.ffn_before = model.layers[l].d_ff;
    pl.kept_heads = kept_after_removal(head_scores, rate_to_counts(rate, pl.heads_before));
    pl.kept_ffn_channels = kept_after_removal(ffn_scores, rate_to_counts(rate, pl.ffn_before));
  }
  return p;
}

Model apply(const Model& model, const PrunePlan& plan) {
  if (plan.layers.size() != model.layers.size())
    throw std::invalid_argument("apply: plan layer count does not match model");

  const std::size_t dm = static_cast<std::size_t>(model.spec.d_model);
  const std::size_t hd = static_cast<std::size_t>(model.spec.head_dim);

  Model out;
  out.spec = model.spec;
  out.token_embedding = model.token_embedding;
  out.final_norm = model.final_norm;
  out.layers.resize(model.layers.size());

  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerWeights& src = model.layers[l];
    const PrunePlan::Layer& pl = plan.layers[l];
    if (pl.heads_before != src.n_heads || pl.ffn_before != src.d_ff)
      throw std::invalid_argument("apply: plan does not match live dims at layer " +
                                  std::to_string(l));
    for (int h : pl.kept_heads)
      if (h < 0 || h >= src.n_heads)
        throw std::invalid_argument("apply: kept head out of range at layer " + std::to_string(l));
    for (int c : pl.kept_ffn_channels)
      if (c < 0 || c >= src.d_ff)
        throw std::invalid_argument("apply: kept channel out of range at layer " +
                                    std::to_string(l));

    LayerWeights& dst = out.layers[l];
    dst.n_heads = static_cast<int>(pl.kept_heads.size());
    dst.d_ff = static_cast<int>(pl.kept_ffn_channels.size());
    dst.attn_norm = src.attn_norm;
    dst.ffn_norm = src.ffn_norm;

    const std::size_t attn_cols = static_cast<std::size_t>(dst.n_heads) * hd;
    auto slice_head_cols = [&](const Matrix& w) {
      Matrix m(dm, attn_cols);
      for (std::size_t r = 0; r < dm; ++r) {
        float* drow = m.row(r);
        const float* srow = w.row(r);
        std::size_t o = 0;
        for (int h : pl.kept_heads) {
          std::memcpy(drow + o, srow + static_cast<std::size_t>(h) * hd, hd * sizeof(float));
          o += hd;
        }
      }
      return m;
    };
    dst.w_q = slice_head_cols(src.w_q);
    dst.w_k = slice_head_cols(src.w_k);
    dst.w_v = slice_head_cols(src.w_v);

    dst.w_o = Matrix(attn_cols, dm);
    {
      std::size_t o = 0;
      for (int h : pl.kept_heads) {
        std::memcpy(dst.w_o.row(o), src.w_o.row(static_cast<std::size_t>(h) * hd),
                    hd * dm * sizeof(float));
        o += hd;
      }
    }

    const std::size_t ff = static_cast<std::size_t>(dst.d_ff);
    dst.w_up = Matrix(dm, ff);
    for (std::size_t r = 0; r < dm; ++r) {
      float* drow = dst.w_up.row(r);
      const float* srow = src.w_up.row(r);
      std::size_t o = 0;
      for (int c : pl.kept_ffn_channels) drow[o++] = srow[static_cast<std::size_t>(c)];
    }
    dst.w_down = Matrix(ff, dm);
    {
      std::size_t o = 0;
      for (int c : pl.kept_ffn_channels)
        std::memcpy(dst.w_down.row(o++), src.w_down.row(static_cast<std::size_t>(c)),
                    dm * sizeof(float));
    }
  }
  return out;
}

nlohmann::json plan_to_json(const PrunePlan& plan) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    const auto& pl = plan.layers[l];
    layers.push_back({{"layer", l},
                      {"kept_heads", pl.kept_heads},
                      {"kept_ffn_channels", pl.kept_ffn_channels},
                      {"heads_before", pl.heads_before},
                      {"heads_removed", pl.heads_removed()},
                      {"ffn_before", pl.ffn_before},
                      {"ffn_removed", pl.ffn_removed()}});
  }
  return nlohmann::json{
      {"schema_version", "selfprune-plan-v1"},
      {"scoring", "abs-weight times input-norm summed per unit; w_o rows use the "
                  "residual-stream norm at the same channel position"},
      {"layers", layers}};
}

}  // namespace selfprune
