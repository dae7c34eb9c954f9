#include "jf/embed.hpp"

namespace jf {

EmbedParams make_embed_params(int patch, int dim, int grid_h, int grid_w, Rng& rng, double stddev) {
    EmbedParams p;
    p.patch = patch;
    p.dim = dim;
    p.grid_h = grid_h;
    p.grid_w = grid_w;
    p.proj_ref = Tensor::param({4 * patch * patch, dim}, rng, stddev);
    p.proj_cur = Tensor::param({3 * patch * patch, dim}, rng, stddev);
    p.pos_ref = Tensor::param({grid_h * grid_w, dim}, rng, stddev);
    p.pos_cur = Tensor::param({grid_h * grid_w, dim}, rng, stddev);
    return p;
}

TensorPtr embed_tokens(const TensorPtr& patches, const EmbedParams& params, TokenKind kind,
                       int grid_h, int grid_w) {
    const TensorPtr& proj = (kind == TokenKind::reference) ? params.proj_ref : params.proj_cur;
    const TensorPtr& pos = (kind == TokenKind::reference) ? params.pos_ref : params.pos_cur;
    if (patches->rank() != 2 || patches->dim(1) != proj->dim(0)) {
        throw ConfigError("embed_tokens: patch width " + shape_str(patches->shape) + " does not match projection " +
                          shape_str(proj->shape) + " for kind " +
                          std::string(kind == TokenKind::reference ? "reference" : "current"));
    }
    if (patches->dim(0) != grid_h * grid_w) {
        throw ConfigError("embed_tokens: " + std::to_string(patches->dim(0)) + " patches vs grid " +
                          std::to_string(grid_h) + "x" + std::to_string(grid_w));
    }
    TensorPtr projected = matmul(patches, proj);
    TensorPtr pos_used = interpolate_pos_embed(pos, params.grid_h, params.grid_w, grid_h, grid_w);
    return add(projected, pos_used);
}

TensorPtr interpolate_pos_embed(const TensorPtr& pos, int old_h, int old_w, int new_h, int new_w) {
    if (pos->rank() != 2 || pos->dim(0) != old_h * old_w) {
        throw ShapeError("interpolate_pos_embed: " + shape_str(pos->shape) + " vs grid " + std::to_string(old_h) +
                         "x" + std::to_string(old_w));
    }
    if (old_h == new_h && old_w == new_w) {
        // identity: hand back the table itself so training touches the leaf
        return pos;
    }
    TensorPtr grid = tokens_to_grid(pos, old_h, old_w);
    TensorPtr resized = resize_bilinear(grid, new_h, new_w);
    return grid_to_tokens(resized);
}

}  // namespace jf
