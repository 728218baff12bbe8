#include "mambaloc/gis.hpp"

#include "mambaloc/errors.hpp"

namespace mambaloc {

GisBlock GisBlock::init(std::int64_t D, std::int64_t N, Rng& rng, GisMode mode, GisCombine combine,
                        std::int64_t delta_rank) {
    GisBlock b;
    b.D = D;
    b.mode = mode;
    b.combine = combine;
    auto randn = [&rng](Shape shape, double stddev) {
        Tensor t = Tensor::zeros(shape);
        for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
        t.set_requires_grad(true);
        return t;
    };
    const double s = 1.0 / std::sqrt(static_cast<double>(D));
    b.in_proj_w = randn({D, 2 * D}, s);
    b.in_proj_b = Tensor::zeros({2 * D}, true);
    b.ssm = SsmParams::init(D, N, rng, delta_rank);
    b.out_proj_w = randn({D, D}, s);
    b.out_proj_b = Tensor::zeros({D}, true);
    return b;
}

std::vector<Tensor*> GisBlock::parameters() {
    std::vector<Tensor*> ps = {&in_proj_w, &in_proj_b, &out_proj_w, &out_proj_b};
    for (Tensor* t : ssm.parameters()) ps.push_back(t);
    return ps;
}

std::int64_t GisBlock::parameter_count() const {
    std::int64_t n = 0;
    for (const Tensor* t : const_cast<GisBlock*>(this)->parameters()) n += t->size();
    return n;
}

namespace {

// in_proj -> split -> selectivity -> discretize -> scan -> gate -> out_proj.
Tensor gis_pipeline(Graph& g, const Tensor& seq, const GisBlock& block) {
    if (block.mode == GisMode::Off) {
        throw ModeError("gis: SSM pipeline reached with mode=off");
    }
    const std::int64_t D = block.D;
    Tensor z = g.add(g.matmul(seq, block.in_proj_w), block.in_proj_b);  // [B,S,2D]
    Tensor hidden = g.slice_last_dim(z, 0, D);
    Tensor gate = g.slice_last_dim(z, D, D);
    Selectivity sel = selectivity(g, hidden, block.ssm);
    DiscretizedSystem sys = discretize(g, sel.delta, block.ssm.realized_a(g), sel.B_sel, sel.C_sel);
    Tensor y = scan_sequential(g, sys, hidden);
    Tensor gated = g.mul(y, g.silu(gate));
    return g.add(g.matmul(gated, block.out_proj_w), block.out_proj_b);
}

void check_gis_input(const Tensor& g_in, const GisBlock& block) {
    const auto& sh = g_in.shape();
    if (sh.size() != 3 || sh[1] != 1 || sh[2] != block.D) {
        throw ShapeMismatch("gis: expected [B,1," + std::to_string(block.D) + "], got " + shape_str(sh));
    }
}

}  // namespace

Tensor gis_forward(Graph& g, const Tensor& g_in, const GisBlock& block, bool training) {
    (void)training;  // no stochastic pieces inside the block
    check_gis_input(g_in, block);
    if (block.mode == GisMode::Off) return g_in;
    if (block.mode == GisMode::Classical) return gis_classical_forward(g, g_in, block, training);

    Tensor flipped = g.flip_last_dim(g_in);
    Tensor seq = g.concat_dim1(flipped, g_in);  // index 0: flipped, index 1: original
    Tensor out = gis_pipeline(g, seq, block);
    switch (block.combine) {
        case GisCombine::Slice:
            return g.slice_dim1(out, 1, 1);
        case GisCombine::Sum:
            return g.add(g.slice_dim1(out, 0, 1), g.slice_dim1(out, 1, 1));
        case GisCombine::Mean:
            return g.scale(g.add(g.slice_dim1(out, 0, 1), g.slice_dim1(out, 1, 1)), 0.5);
    }
    throw ModeError("gis: unknown combine mode");
}

Tensor gis_classical_forward(Graph& g, const Tensor& g_in, const GisBlock& block, bool training) {
    (void)training;
    check_gis_input(g_in, block);
    if (block.mode == GisMode::Off) {
        throw ModeError("gis_classical_forward called with mode=off");
    }
    return gis_pipeline(g, g_in, block);
}

}  // namespace mambaloc
