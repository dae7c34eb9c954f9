#include "jf/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace jf {

BackgroundRule background_rule_from_string(const std::string& s) {
    if (s == "paper") return BackgroundRule::paper;
    if (s == "complement") return BackgroundRule::complement;
    throw ConfigError("background rule must be paper|complement, got '" + s + "'");
}

std::string background_rule_to_string(BackgroundRule r) {
    return r == BackgroundRule::paper ? "paper" : "complement";
}

TensorPtr soft_aggregate(const std::vector<TensorPtr>& probs, BackgroundRule rule) {
    if (probs.empty()) throw ConfigError("soft_aggregate: no targets");
    const auto shape = probs[0]->shape;
    if (shape.size() != 3 || shape[0] != 1) {
        throw ShapeError("soft_aggregate: per-target maps must be [1, H, W], got " + shape_str(shape));
    }
    std::vector<TensorPtr> clamped;
    clamped.reserve(probs.size());
    for (const auto& m : probs) {
        if (m->shape != shape) throw ShapeError("soft_aggregate: target map shape mismatch");
        clamped.push_back(clamp(m, kAggregateEps, 1.0 - kAggregateEps));
    }

    TensorPtr background;
    if (rule == BackgroundRule::paper) {
        // 1 - prod(m_i)
        TensorPtr prod = clamped[0];
        for (std::size_t i = 1; i < clamped.size(); ++i) prod = mul(prod, clamped[i]);
        background = add_const(scale_by(prod, -1.0), 1.0);
    } else {
        // prod(1 - m_i)
        TensorPtr prod = add_const(scale_by(clamped[0], -1.0), 1.0);
        for (std::size_t i = 1; i < clamped.size(); ++i) {
            prod = mul(prod, add_const(scale_by(clamped[i], -1.0), 1.0));
        }
        background = prod;
    }
    // normalization denominator is >= kAggregateEps via the clamped targets

    std::vector<TensorPtr> channels;
    channels.reserve(1 + clamped.size());
    channels.push_back(background);
    for (const auto& m : clamped) channels.push_back(m);
    TensorPtr stacked = concat0(channels);  // [(1+k), H, W]

    // Softmax(log x) == x / sum(x), evaluated as the channel normalization.
    const int c = stacked->dim(0), h = stacked->dim(1), w = stacked->dim(2);
    TensorPtr flat = Tensor::make({c, h * w}, stacked->data, false);
    if (stacked->requires_grad) {
        flat->requires_grad = true;
        flat->parents = {stacked};
        Tensor *sp = stacked.get(), *fp = flat.get();
        flat->backward_fn = [sp, fp] {
            sp->ensure_grad();
            for (std::size_t i = 0; i < fp->grad.size(); ++i) sp->grad[i] += fp->grad[i];
        };
    }
    flat->op = "reshape";
    TensorPtr normed = normalize_cols(flat);
    TensorPtr out = Tensor::make({c, h, w}, normed->data, false);
    if (normed->requires_grad) {
        out->requires_grad = true;
        out->parents = {normed};
        Tensor *np = normed.get(), *op = out.get();
        out->backward_fn = [np, op] {
            np->ensure_grad();
            for (std::size_t i = 0; i < op->grad.size(); ++i) np->grad[i] += op->grad[i];
        };
    }
    out->op = "soft_aggregate";
    return out;
}

TensorPtr bootstrapped_ce(const TensorPtr& dist, const std::vector<std::uint8_t>& gt, double ratio) {
    if (dist->rank() != 3) throw ShapeError("bootstrapped_ce: dist must be [(1+k), H, W]");
    if (ratio <= 0.0 || ratio > 1.0) throw ConfigError("bootstrapped_ce: ratio must be in (0, 1]");
    const int c = dist->dim(0);
    const std::size_t hw = static_cast<std::size_t>(dist->dim(1)) * dist->dim(2);
    if (gt.size() != hw) throw ShapeError("bootstrapped_ce: gt size mismatch");
    for (std::uint8_t id : gt) {
        if (id >= c) throw ShapeError("bootstrapped_ce: gt id " + std::to_string(id) + " out of range");
    }

    std::vector<double> pixel_loss(hw);
    for (std::size_t i = 0; i < hw; ++i) {
        pixel_loss[i] = -std::log(dist->data[static_cast<std::size_t>(gt[i]) * hw + i]);
    }
    const std::size_t keep = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(hw)));
    std::vector<std::size_t> idx(hw);
    std::iota(idx.begin(), idx.end(), 0);
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep - 1), idx.end(),
                     [&](std::size_t a, std::size_t b) {
                         return pixel_loss[a] != pixel_loss[b] ? pixel_loss[a] > pixel_loss[b] : a < b;
                     });
    idx.resize(keep);
    double total = 0.0;
    for (std::size_t i : idx) total += pixel_loss[i];
    const double value = total / static_cast<double>(keep);
    if (!std::isfinite(value)) throw NumericsError("bootstrapped_ce: non-finite loss");

    auto out = Tensor::make({1}, {value});
    out->op = "bootstrapped_ce";
    if (dist->requires_grad) {
        out->requires_grad = true;
        out->parents = {dist};
        Tensor *dp = dist.get(), *yp = out.get();
        auto selected = idx;  // selection fixed at forward time
        auto labels = gt;
        out->backward_fn = [dp, yp, selected, labels, hw, keep] {
            dp->ensure_grad();
            const double g = yp->grad[0] / static_cast<double>(keep);
            for (std::size_t i : selected) {
                const std::size_t off = static_cast<std::size_t>(labels[i]) * hw + i;
                dp->grad[off] += -g / dp->data[off];
            }
        };
    }
    return out;
}

TensorPtr dice_loss(const TensorPtr& dist, const std::vector<std::uint8_t>& gt) {
    if (dist->rank() != 3) throw ShapeError("dice_loss: dist must be [(1+k), H, W]");
    const int c = dist->dim(0);
    const std::size_t hw = static_cast<std::size_t>(dist->dim(1)) * dist->dim(2);
    if (gt.size() != hw) throw ShapeError("dice_loss: gt size mismatch");
    const double smooth = 1.0;
    const int fg = c - 1;
    if (fg < 1) throw ShapeError("dice_loss: need at least one foreground channel");

    // composed from differentiable ops so the gradient comes for free
    TensorPtr total;
    for (int ch = 1; ch < c; ++ch) {
        TensorPtr p = slice0(dist, ch, 1);
        std::vector<double> onehot(hw);
        for (std::size_t i = 0; i < hw; ++i) onehot[i] = (gt[i] == ch) ? 1.0 : 0.0;
        TensorPtr q = Tensor::make({1, dist->dim(1), dist->dim(2)}, std::move(onehot));
        TensorPtr inter = sum_all(mul(p, q));
        TensorPtr denom = add_const(add(sum_all(p), sum_all(q)), smooth);
        TensorPtr score = divide(add_const(scale_by(inter, 2.0), smooth), denom);
        TensorPtr term = add_const(scale_by(score, -1.0), 1.0);
        total = total ? add(total, term) : term;
    }
    return scale_by(total, 1.0 / fg);
}

TensorPtr clip_loss(const std::vector<TensorPtr>& frame_losses) {
    if (frame_losses.size() < 2) throw ConfigError("clip_loss: need clip length T >= 2");
    TensorPtr total;
    for (std::size_t t = 1; t < frame_losses.size(); ++t) {
        total = total ? add(total, frame_losses[t]) : frame_losses[t];
    }
    return total;
}

}  // namespace jf
