#ifndef MDTS_MASKING_HPP
#define MDTS_MASKING_HPP

#include <optional>
#include <stdexcept>
#include <vector>

#include "mdts/tensor.hpp"

namespace mdts {

enum class MaskScheme { Random, PostFix };

inline constexpr double kRandomSchemeProbability = 0.75;

/// Visibility over a V x T' token grid; true = visible to the encoder.
struct MaskPlan {
  BoolGrid visible;
  MaskScheme scheme = MaskScheme::Random;
  double ratio = 0.0;

  Eigen::Index visible_count() const { return visible.count(); }
  Eigen::Index masked_count() const { return visible.size() - visible.count(); }
};

inline MaskPlan random_mask(Eigen::Index variates, Eigen::Index patches, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("mask ratio must lie in [0, 1)");
  if (variates < 1 || patches < 1) throw std::invalid_argument("mask grid must be non-empty");
  MaskPlan plan{BoolGrid(variates, patches), MaskScheme::Random, ratio};
  std::bernoulli_distribution keep(1.0 - ratio);
  for (Eigen::Index i = 0; i < plan.visible.size(); ++i) plan.visible.data()[i] = keep(rng);
  if (plan.visible_count() == 0) {
    std::uniform_int_distribution<Eigen::Index> cell(0, plan.visible.size() - 1);
    plan.visible.data()[cell(rng)] = true;
  }
  return plan;
}

/// First ceil(T'/2) patches of every variate visible, the rest masked.
inline MaskPlan postfix_mask(Eigen::Index variates, Eigen::Index patches) {
  if (patches < 2) throw std::invalid_argument("post-fix masking needs at least two patches");
  if (variates < 1) throw std::invalid_argument("mask grid must be non-empty");
  MaskPlan plan{BoolGrid::Constant(variates, patches, false), MaskScheme::PostFix, 0.5};
  plan.visible.leftCols((patches + 1) / 2).setConstant(true);
  return plan;
}

/// Context-style mask: the first `visible_patches` columns visible.
inline MaskPlan prefix_mask(Eigen::Index variates, Eigen::Index patches, Eigen::Index visible_patches) {
  if (visible_patches < 1 || visible_patches > patches) throw std::invalid_argument("visible prefix out of range");
  MaskPlan plan{BoolGrid::Constant(variates, patches, false), MaskScheme::PostFix,
                1.0 - static_cast<double>(visible_patches) / static_cast<double>(patches)};
  plan.visible.leftCols(visible_patches).setConstant(true);
  return plan;
}

/// Random with probability 0.75, post-fix otherwise, unless `force` pins
/// the scheme. Post-fix needs T' >= 2; a 1-patch grid always gets Random.
inline MaskPlan draw_dual_mask(Eigen::Index variates, Eigen::Index patches, double ratio, Rng& rng,
                               std::optional<MaskScheme> force = std::nullopt) {
  MaskScheme scheme;
  if (force) {
    scheme = *force;
  } else {
    std::bernoulli_distribution pick_random(kRandomSchemeProbability);
    scheme = pick_random(rng) ? MaskScheme::Random : MaskScheme::PostFix;
    if (patches < 2) scheme = MaskScheme::Random;
  }
  return scheme == MaskScheme::Random ? random_mask(variates, patches, ratio, rng) : postfix_mask(variates, patches);
}

/// Effective visibility = plan AND token validity, over a grid with
/// `padded_variates` rows (rows past the plan's height are never visible).
inline std::vector<bool> effective_visible(const MaskPlan& plan, const std::vector<bool>& validity, Eigen::Index padded_variates) {
  const Eigen::Index per = plan.visible.cols();
  if (static_cast<Eigen::Index>(validity.size()) != padded_variates * per)
    throw std::invalid_argument("validity grid does not match mask grid");
  std::vector<bool> out(validity.size(), false);
  for (Eigen::Index v = 0; v < std::min(padded_variates, plan.visible.rows()); ++v)
    for (Eigen::Index t = 0; t < per; ++t) {
      const auto g = static_cast<std::size_t>(v * per + t);
      out[g] = plan.visible(v, t) && validity[g];
    }
  return out;
}

}  // namespace mdts

#endif  // MDTS_MASKING_HPP
