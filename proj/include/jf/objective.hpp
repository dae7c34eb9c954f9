#pragma once

// Multi-object soft aggregation and the training loss (bootstrapped cross
// entropy + dice over the predicted frames of a clip).

#include "jf/tensor.hpp"

namespace jf {

enum class BackgroundRule { paper, complement };
BackgroundRule background_rule_from_string(const std::string& s);
std::string background_rule_to_string(BackgroundRule r);

constexpr double kAggregateEps = 1e-7;

// probs: one [1, H, W] foreground map per target, values in [0, 1] (clamped
// to [eps, 1-eps] internally). Output [(1+k), H, W]: channel 0 background,
// channel i target i. Background is 1 - prod(m_i) under the paper rule, or
// prod(1 - m_i) under the complement rule; per-pixel channel normalization
// (identical to Softmax(log x)) follows.
TensorPtr soft_aggregate(const std::vector<TensorPtr>& probs, BackgroundRule rule);

// dist: [(1+k), H, W] class distribution; gt: per-pixel class ids (0..k).
// -log p_gt per pixel, averaged over the ceil(ratio * HW) hardest pixels.
TensorPtr bootstrapped_ce(const TensorPtr& dist, const std::vector<std::uint8_t>& gt, double ratio);

// Per foreground channel 1 - (2*sum(pq) + s) / (sum p + sum q + s), s = 1,
// averaged over the foreground channels.
TensorPtr dice_loss(const TensorPtr& dist, const std::vector<std::uint8_t>& gt);

// Sum of the per-frame losses from the second frame on (index 0 is the
// annotated frame and is excluded). frame_losses.size() is the clip length T.
TensorPtr clip_loss(const std::vector<TensorPtr>& frame_losses);

}  // namespace jf
