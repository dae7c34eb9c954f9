#pragma once

// Decoder: builds a three-scale pyramid from the final current tokens,
// fuses the current and enhanced token streams, progressively upsamples with
// skip connections to 1/4 scale, emits full-resolution single-target logits,
// and distills decoder tokens from the internal maps + logits.

#include "jf/tensor.hpp"

namespace jf {

struct SkipFeatures {
    TensorPtr s16;  // [2D, H/16, W/16]
    TensorPtr s8;   // [D,  H/8,  W/8 ]
    TensorPtr s4;   // [D/2, H/4, W/4]
};

struct DecoderInternals {
    TensorPtr f16;  // fused map at 1/16
    TensorPtr f8;
    TensorPtr f4;
};

struct DecoderParams {
    int dim = 64;       // token width D
    int c16 = 64, c8 = 32, c4 = 16;
    // skip pyramid from tokens
    TensorPtr skip_reduce_w, skip_reduce_b;  // conv 2x2 s2: D -> 2D
    TensorPtr skip_up_w, skip_up_b;          // deconv 2x2 s2: D -> D/2
    // decoder path
    TensorPtr fuse_w, fuse_b;        // 1x1: 2D -> c16 (cur||enhanced)
    TensorPtr reduce_w, reduce_b;    // conv 2x2 s2: c16 -> c16
    TensorPtr proj16_w, proj16_b;    // 1x1: 2D -> c16
    TensorPtr proj8_w, proj8_b;      // 1x1: D -> c8
    TensorPtr proj4_w, proj4_b;      // 1x1: D/2 -> c4
    TensorPtr up8_w, up8_b;          // deconv 2x2 s2: c16 -> c8
    TensorPtr up4_w, up4_b;          // deconv 2x2 s2: c8 -> c4
    TensorPtr head_w, head_b;        // conv 3x3 pad 1: c4 -> 1
    // decoder-token projections (input has +1 channel for the logits map)
    TensorPtr dtok16_w, dtok16_b;    // 1x1: c16+1 -> D
    TensorPtr dtok8_w, dtok8_b;      // 1x1: c8+1 -> D
    TensorPtr dtok4_w, dtok4_b;      // 1x1: c4+1 -> D
};

DecoderParams make_decoder_params(int dim, Rng& rng, double stddev);

// tokens[N, D] on an (gh x gw) grid -> {1/16, 1/8, 1/4} skip maps. The token
// grid itself sits at 1/P of the input; P=8 puts it at the 1/8 scale.
SkipFeatures make_skips(const TensorPtr& cur_tokens, int grid_h, int grid_w, const DecoderParams& p);

struct DecodeResult {
    TensorPtr logits;  // [1, H, W], pre-sigmoid
    DecoderInternals internals;
};

DecodeResult decode(const TensorPtr& cur_tokens, const TensorPtr& enhanced_tokens,
                    const SkipFeatures& skips, int grid_h, int grid_w, int out_h, int out_w,
                    const DecoderParams& p);

// Per scale: concat(internal, logits downsampled to that scale), 1x1 project
// to D, resize to the token grid; sum of the three -> [N, D].
TensorPtr make_decoder_tokens(const DecoderInternals& internals, const TensorPtr& logits,
                              int grid_h, int grid_w, const DecoderParams& p);

}  // namespace jf
