#include "mambaloc/encoder.hpp"

#include <cmath>

#include "mambaloc/errors.hpp"

namespace mambaloc {

namespace {

Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = true) {
    Tensor t = Tensor::zeros(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
    t.set_requires_grad(requires_grad);
    return t;
}

}  // namespace

PosEncoding2D PosEncoding2D::init(std::int64_t H_m, std::int64_t W_m, std::int64_t C_t, Rng& rng) {
    if (C_t % 2 != 0) throw ShapeMismatch("PosEncoding2D: C_t must be even, got " + std::to_string(C_t));
    PosEncoding2D p;
    p.H_m = H_m;
    p.W_m = W_m;
    p.C_t = C_t;
    p.E_x = randn({W_m + 1, C_t / 2}, rng, 0.02);
    p.E_y = randn({H_m + 1, C_t / 2}, rng, 0.02);
    return p;
}

std::vector<Tensor*> PosEncoding2D::parameters() { return {&E_x, &E_y}; }

BackboneStub BackboneStub::init(std::int64_t stride, std::int64_t C_in, std::int64_t C_t, Rng& rng) {
    BackboneStub s;
    s.stride = stride;
    s.C_in = C_in;
    s.C_t = C_t;
    const std::int64_t patch = stride * stride * C_in;
    s.W = randn({patch, C_t}, rng, 1.0 / std::sqrt(static_cast<double>(patch)));
    s.b = Tensor::zeros({C_t}, true);
    return s;
}

std::vector<Tensor*> BackboneStub::parameters() { return {&W, &b}; }

ActivationMap backbone_stub(Graph& g, const Tensor& grid, const BackboneStub& stub) {
    const auto& sh = grid.shape();
    if (sh.size() != 4 || sh[3] != stub.C_in) {
        throw ShapeMismatch("backbone_stub: expected [B,H,W," + std::to_string(stub.C_in) +
                            "], got " + shape_str(sh));
    }
    const std::int64_t B = sh[0], H = sh[1], W = sh[2], C = sh[3];
    const std::int64_t s = stub.stride;
    if (H % s != 0 || W % s != 0) {
        throw ShapeMismatch("backbone_stub: extents " + shape_str(sh) + " not divisible by stride " +
                            std::to_string(s));
    }
    const std::int64_t Hm = H / s, Wm = W / s;
    const std::int64_t patch = s * s * C;

    // Patch flatten is a pure permutation of elements; its backward is the
    // inverse permutation.
    Tensor patches = Tensor::zeros({B, Hm * Wm, patch});
    {
        const double* xd = grid.data();
        double* od = patches.data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t i = 0; i < Hm; ++i) {
                for (std::int64_t j = 0; j < Wm; ++j) {
                    double* dst = od + ((b * Hm * Wm) + i * Wm + j) * patch;
                    for (std::int64_t pi = 0; pi < s; ++pi) {
                        for (std::int64_t pj = 0; pj < s; ++pj) {
                            const double* src = xd + ((b * H + (i * s + pi)) * W + (j * s + pj)) * C;
                            for (std::int64_t c = 0; c < C; ++c) dst[(pi * s + pj) * C + c] = src[c];
                        }
                    }
                }
            }
        }
    }
    g.record("patchify", {grid}, {patches}, [B, H, W, C, s, Hm, Wm, patch](const Graph::Node& node) {
        const Tensor& grid = node.inputs[0];
        const double* dy = node.outputs[0].grad().data();
        auto& dx = const_cast<Tensor&>(grid).grad();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t i = 0; i < Hm; ++i) {
                for (std::int64_t j = 0; j < Wm; ++j) {
                    const double* src = dy + ((b * Hm * Wm) + i * Wm + j) * patch;
                    for (std::int64_t pi = 0; pi < s; ++pi) {
                        for (std::int64_t pj = 0; pj < s; ++pj) {
                            double* dst = dx.data() + ((b * H + (i * s + pi)) * W + (j * s + pj)) * C;
                            for (std::int64_t c = 0; c < C; ++c) dst[c] += src[(pi * s + pj) * C + c];
                        }
                    }
                }
            }
        }
    });

    ActivationMap map;
    map.H_m = Hm;
    map.W_m = Wm;
    map.C_t = stub.C_t;
    map.data = g.add(g.matmul(patches, stub.W), stub.b);
    return map;
}

Tensor assemble_pos_table(Graph& g, const PosEncoding2D& pos) {
    const std::int64_t Hm = pos.H_m, Wm = pos.W_m, C = pos.C_t, half = C / 2;
    const std::int64_t S = Hm * Wm + 1;
    Tensor table = Tensor::zeros({S, C});
    const double* ex = pos.E_x.data();
    const double* ey = pos.E_y.data();
    double* td = table.data();
    auto fill_row = [&](std::int64_t row, std::int64_t xi, std::int64_t yi) {
        for (std::int64_t c = 0; c < half; ++c) td[row * C + c] = ex[xi * half + c];
        for (std::int64_t c = 0; c < half; ++c) td[row * C + half + c] = ey[yi * half + c];
    };
    fill_row(0, 0, 0);
    for (std::int64_t i = 0; i < Hm; ++i) {
        for (std::int64_t j = 0; j < Wm; ++j) fill_row(1 + i * Wm + j, j + 1, i + 1);
    }
    g.record("pos_table", {pos.E_x, pos.E_y}, {table}, [Hm, Wm, C, half](const Graph::Node& node) {
        const Tensor& ex = node.inputs[0];
        const Tensor& ey = node.inputs[1];
        const double* dy = node.outputs[0].grad().data();
        auto scatter = [&](std::int64_t row, std::int64_t xi, std::int64_t yi) {
            if (ex.requires_grad()) {
                auto& dex = const_cast<Tensor&>(ex).grad();
                for (std::int64_t c = 0; c < half; ++c) dex[static_cast<std::size_t>(xi * half + c)] += dy[row * C + c];
            }
            if (ey.requires_grad()) {
                auto& dey = const_cast<Tensor&>(ey).grad();
                for (std::int64_t c = 0; c < half; ++c) dey[static_cast<std::size_t>(yi * half + c)] += dy[row * C + half + c];
            }
        };
        scatter(0, 0, 0);
        for (std::int64_t i = 0; i < Hm; ++i) {
            for (std::int64_t j = 0; j < Wm; ++j) scatter(1 + i * Wm + j, j + 1, i + 1);
        }
    });
    return table;
}

Tensor add_token_and_pos(Graph& g, const ActivationMap& map, const Tensor& token,
                         const PosEncoding2D& pos) {
    const auto& sh = map.data.shape();
    if (sh.size() != 3 || sh[1] != map.H_m * map.W_m || sh[2] != map.C_t) {
        throw ShapeMismatch("add_token_and_pos: map data " + shape_str(sh));
    }
    if (pos.H_m != map.H_m || pos.W_m != map.W_m || pos.C_t != map.C_t) {
        throw ShapeMismatch("add_token_and_pos: pos tables sized for " + std::to_string(pos.H_m) + "x" +
                            std::to_string(pos.W_m) + ", map is " + std::to_string(map.H_m) + "x" +
                            std::to_string(map.W_m));
    }
    if (token.dim() != 1 || token.size() != map.C_t) {
        throw ShapeMismatch("add_token_and_pos: token " + shape_str(token.shape()));
    }
    Tensor with_token = g.concat_dim1(g.tile_row(token, sh[0]), map.data);
    return g.add(with_token, assemble_pos_table(g, pos));
}

EncoderWeights EncoderWeights::init(const EncoderConfig& cfg, Rng& rng) {
    if (cfg.C_t % cfg.n_heads != 0) {
        throw ShapeMismatch("EncoderConfig: C_t " + std::to_string(cfg.C_t) +
                            " not divisible by n_heads " + std::to_string(cfg.n_heads));
    }
    EncoderWeights enc;
    enc.cfg = cfg;
    const std::int64_t C = cfg.C_t;
    const std::int64_t M = static_cast<std::int64_t>(cfg.mlp_ratio * static_cast<double>(C));
    for (std::int64_t i = 0; i < cfg.n_blocks; ++i) {
        EncoderBlockWeights b;
        b.ln1_g = Tensor::full({C}, 1.0, true);
        b.ln1_b = Tensor::zeros({C}, true);
        b.wq = randn({C, C}, rng, 0.02);
        b.bq = Tensor::zeros({C}, true);
        b.wk = randn({C, C}, rng, 0.02);
        b.bk = Tensor::zeros({C}, true);
        b.wv = randn({C, C}, rng, 0.02);
        b.bv = Tensor::zeros({C}, true);
        b.wo = randn({C, C}, rng, 0.02);
        b.bo = Tensor::zeros({C}, true);
        b.ln2_g = Tensor::full({C}, 1.0, true);
        b.ln2_b = Tensor::zeros({C}, true);
        b.w1 = randn({C, M}, rng, 0.02);
        b.b1 = Tensor::zeros({M}, true);
        b.w2 = randn({M, C}, rng, 0.02);
        b.b2 = Tensor::zeros({C}, true);
        enc.blocks.push_back(std::move(b));
    }
    enc.lnf_g = Tensor::full({C}, 1.0, true);
    enc.lnf_b = Tensor::zeros({C}, true);
    return enc;
}

std::vector<Tensor*> EncoderWeights::parameters() {
    std::vector<Tensor*> ps;
    for (auto& b : blocks) {
        for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                          &b.bo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2}) {
            ps.push_back(t);
        }
    }
    ps.push_back(&lnf_g);
    ps.push_back(&lnf_b);
    return ps;
}

namespace {

Tensor mha(Graph& g, const Tensor& h, const EncoderBlockWeights& w, std::int64_t n_heads,
           std::vector<Tensor>* attn_probe) {
    const auto& sh = h.shape();
    const std::int64_t B = sh[0], S = sh[1], C = sh[2];
    const std::int64_t hd = C / n_heads;
    auto split_heads = [&](Tensor t) {
        return g.permute0213(g.reshape(t, {B, S, n_heads, hd}));
    };
    Tensor q = split_heads(g.add(g.matmul(h, w.wq), w.bq));
    Tensor k = split_heads(g.add(g.matmul(h, w.wk), w.bk));
    Tensor v = split_heads(g.add(g.matmul(h, w.wv), w.bv));
    Tensor scores = g.scale(g.matmul(q, g.transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor probs = g.softmax(scores);
    if (attn_probe) attn_probe->push_back(probs);
    Tensor ctx = g.reshape(g.permute0213(g.matmul(probs, v)), {B, S, C});
    return g.add(g.matmul(ctx, w.wo), w.bo);
}

}  // namespace

Tensor encoder_forward(Graph& g, const Tensor& seq, const EncoderWeights& enc,
                       const Tensor& pos_table, bool training, std::uint64_t drop_seed,
                       std::vector<Tensor>* attn_probe) {
    const auto& sh = seq.shape();
    if (sh.size() != 3 || sh[2] != enc.cfg.C_t) {
        throw ShapeMismatch("encoder_forward: expected [B,S," + std::to_string(enc.cfg.C_t) +
                            "], got " + shape_str(sh));
    }
    if (pos_table.shape() != Shape{sh[1], sh[2]}) {
        throw ShapeMismatch("encoder_forward: pos table " + shape_str(pos_table.shape()) +
                            " does not match sequence " + shape_str(sh));
    }
    Tensor x = seq;
    std::uint64_t site = 0;
    for (const auto& b : enc.blocks) {
        x = g.add(x, pos_table);  // positions re-added before each block
        Tensor attn = mha(g, g.layernorm(x, b.ln1_g, b.ln1_b), b, enc.cfg.n_heads, attn_probe);
        x = g.add(x, g.dropout(attn, enc.cfg.dropout, hash_combine(drop_seed, site++), training));
        Tensor h2 = g.layernorm(x, b.ln2_g, b.ln2_b);
        Tensor m = g.add(g.matmul(g.gelu(g.add(g.matmul(h2, b.w1), b.b1)), b.w2), b.b2);
        x = g.add(x, g.dropout(m, enc.cfg.dropout, hash_combine(drop_seed, site++), training));
    }
    x = g.layernorm(x, enc.lnf_g, enc.lnf_b);
    return g.slice_dim1(x, 0, 1);
}

}  // namespace mambaloc
