#pragma once

// Tokenization of current frames (3 channels) and reference frame+mask pairs
// (4 channels): patch flattening, learned linear projection, learned 1D
// positional embeddings, and positional-embedding interpolation for inputs
// whose grid differs from the training grid.

#include "jf/tensor.hpp"

namespace jf {

enum class TokenKind { current, reference };

struct EmbedParams {
    int patch = 8;
    int dim = 64;
    int grid_h = 8, grid_w = 8;  // training-time token grid per frame
    TensorPtr proj_ref;   // [4*P*P, D]
    TensorPtr proj_cur;   // [3*P*P, D]
    TensorPtr pos_ref;    // [grid_h*grid_w, D], reused by every reference frame
    TensorPtr pos_cur;    // [grid_h*grid_w, D]
};

EmbedParams make_embed_params(int patch, int dim, int grid_h, int grid_w, Rng& rng, double stddev);

// patches[N, C*P*P] -> tokens[N, D]; kind selects the projection/positional
// pair and checks the channel width (3 for current, 4 for reference).
TensorPtr embed_tokens(const TensorPtr& patches, const EmbedParams& params, TokenKind kind,
                       int grid_h, int grid_w);

// [N, D] positional table resized between token grids (bilinear per channel);
// bitwise identity when the grids match.
TensorPtr interpolate_pos_embed(const TensorPtr& pos, int old_h, int old_w, int new_h, int new_w);

}  // namespace jf
