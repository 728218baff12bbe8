#pragma once

#include <cstdint>
#include <vector>

#include "mambaloc/ssm.hpp"
#include "mambaloc/tensor.hpp"

namespace mambaloc {

enum class GisMode { Bidirectional, Classical, Off };

/// How the bidirectional output pair collapses back to one token.
enum class GisCombine { Slice, Sum, Mean };

/// Single-layer selective-SSM block with SiLU gating, fed one pooled token.
struct GisBlock {
    std::int64_t D = 0;
    GisMode mode = GisMode::Bidirectional;
    GisCombine combine = GisCombine::Slice;
    Tensor in_proj_w;   // [D, 2D] -> (hidden, gate)
    Tensor in_proj_b;   // [2D]
    SsmParams ssm;
    Tensor out_proj_w;  // [D, D]
    Tensor out_proj_b;  // [D]

    static GisBlock init(std::int64_t D, std::int64_t N, Rng& rng,
                         GisMode mode = GisMode::Bidirectional,
                         GisCombine combine = GisCombine::Slice, std::int64_t delta_rank = 0);

    std::vector<Tensor*> parameters();
    std::int64_t parameter_count() const;
};

/// Bidirectional forward: flip the token's channel axis, stack it with the
/// original along the sequence axis, run the gated selective SSM, and return
/// the position aligned with the original orientation.  mode == Off is the
/// identity; mode == Classical skips the flip/concat pair.
Tensor gis_forward(Graph& g, const Tensor& g_in, const GisBlock& block, bool training);

/// The same pipeline without flip/concat: the length-1 sequence goes straight
/// through the selective SSM and gate.
Tensor gis_classical_forward(Graph& g, const Tensor& g_in, const GisBlock& block, bool training);

}  // namespace mambaloc
