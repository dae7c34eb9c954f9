#include "jf/decoder.hpp"

#include <algorithm>

namespace jf {

namespace {

TensorPtr conv_param(int co, int ci, int k, Rng& rng, double stddev) {
    return Tensor::param({co, ci, k, k}, rng, stddev);
}

TensorPtr bias_param(int co) { return Tensor::make({co}, true); }

}  // namespace

DecoderParams make_decoder_params(int dim, Rng& rng, double stddev) {
    DecoderParams p;
    p.dim = dim;
    p.c16 = dim;
    p.c8 = std::max(2, dim / 2);
    p.c4 = std::max(2, dim / 4);
    const int half = std::max(2, dim / 2);

    p.skip_reduce_w = conv_param(2 * dim, dim, 2, rng, stddev);
    p.skip_reduce_b = bias_param(2 * dim);
    p.skip_up_w = Tensor::param({dim, half, 2, 2}, rng, stddev);  // deconv layout [ci, co, k, k]
    p.skip_up_b = bias_param(half);

    p.fuse_w = conv_param(p.c16, 2 * dim, 1, rng, stddev);
    p.fuse_b = bias_param(p.c16);
    p.reduce_w = conv_param(p.c16, p.c16, 2, rng, stddev);
    p.reduce_b = bias_param(p.c16);
    p.proj16_w = conv_param(p.c16, 2 * dim, 1, rng, stddev);
    p.proj16_b = bias_param(p.c16);
    p.proj8_w = conv_param(p.c8, dim, 1, rng, stddev);
    p.proj8_b = bias_param(p.c8);
    p.proj4_w = conv_param(p.c4, half, 1, rng, stddev);
    p.proj4_b = bias_param(p.c4);
    p.up8_w = Tensor::param({p.c16, p.c8, 2, 2}, rng, stddev);
    p.up8_b = bias_param(p.c8);
    p.up4_w = Tensor::param({p.c8, p.c4, 2, 2}, rng, stddev);
    p.up4_b = bias_param(p.c4);
    p.head_w = conv_param(1, p.c4, 3, rng, stddev);
    p.head_b = bias_param(1);
    p.dtok16_w = conv_param(dim, p.c16 + 1, 1, rng, stddev);
    p.dtok16_b = bias_param(dim);
    p.dtok8_w = conv_param(dim, p.c8 + 1, 1, rng, stddev);
    p.dtok8_b = bias_param(dim);
    p.dtok4_w = conv_param(dim, p.c4 + 1, 1, rng, stddev);
    p.dtok4_b = bias_param(dim);
    return p;
}

SkipFeatures make_skips(const TensorPtr& cur_tokens, int grid_h, int grid_w, const DecoderParams& p) {
    if (cur_tokens->rank() != 2 || cur_tokens->dim(0) != grid_h * grid_w || cur_tokens->dim(1) != p.dim) {
        throw ShapeError("make_skips: tokens " + shape_str(cur_tokens->shape) + " vs grid " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w));
    }
    SkipFeatures s;
    s.s8 = tokens_to_grid(cur_tokens, grid_h, grid_w);
    s.s16 = conv2d(s.s8, p.skip_reduce_w, p.skip_reduce_b, 2, 0);
    s.s4 = conv_transpose2d(s.s8, p.skip_up_w, p.skip_up_b, 2);
    return s;
}

DecodeResult decode(const TensorPtr& cur_tokens, const TensorPtr& enhanced_tokens,
                    const SkipFeatures& skips, int grid_h, int grid_w, int out_h, int out_w,
                    const DecoderParams& p) {
    if (cur_tokens->shape != enhanced_tokens->shape) {
        throw ShapeError("decode: current " + shape_str(cur_tokens->shape) + " vs enhanced " +
                         shape_str(enhanced_tokens->shape));
    }
    TensorPtr cur_map = tokens_to_grid(cur_tokens, grid_h, grid_w);
    TensorPtr enh_map = tokens_to_grid(enhanced_tokens, grid_h, grid_w);
    TensorPtr fused8 = gelu(conv2d(concat0({cur_map, enh_map}), p.fuse_w, p.fuse_b, 1, 0));

    DecodeResult r;
    r.internals.f16 = add(gelu(conv2d(fused8, p.reduce_w, p.reduce_b, 2, 0)),
                          conv2d(skips.s16, p.proj16_w, p.proj16_b, 1, 0));
    r.internals.f8 = add(gelu(conv_transpose2d(r.internals.f16, p.up8_w, p.up8_b, 2)),
                         conv2d(skips.s8, p.proj8_w, p.proj8_b, 1, 0));
    r.internals.f4 = add(gelu(conv_transpose2d(r.internals.f8, p.up4_w, p.up4_b, 2)),
                         conv2d(skips.s4, p.proj4_w, p.proj4_b, 1, 0));
    TensorPtr quarter_logits = conv2d(r.internals.f4, p.head_w, p.head_b, 1, 1);
    r.logits = resize_bilinear(quarter_logits, out_h, out_w);
    return r;
}

TensorPtr make_decoder_tokens(const DecoderInternals& internals, const TensorPtr& logits,
                              int grid_h, int grid_w, const DecoderParams& p) {
    if (!internals.f16 || !internals.f8 || !internals.f4) {
        throw ShapeError("make_decoder_tokens: internals missing a scale");
    }
    auto scale_tokens = [&](const TensorPtr& feat, const TensorPtr& w, const TensorPtr& b) {
        TensorPtr lg = resize_bilinear(logits, feat->dim(1), feat->dim(2));
        TensorPtr cat = concat0({feat, lg});
        TensorPtr proj = conv2d(cat, w, b, 1, 0);
        return grid_to_tokens(resize_bilinear(proj, grid_h, grid_w));
    };
    TensorPtr t16 = scale_tokens(internals.f16, p.dtok16_w, p.dtok16_b);
    TensorPtr t8 = scale_tokens(internals.f8, p.dtok8_w, p.dtok8_b);
    TensorPtr t4 = scale_tokens(internals.f4, p.dtok4_w, p.dtok4_b);
    return add(add(t16, t8), t4);
}

}  // namespace jf
