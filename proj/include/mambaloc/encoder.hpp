#pragma once

#include <cstdint>
#include <vector>

#include "mambaloc/rng.hpp"
#include "mambaloc/tensor.hpp"

namespace mambaloc {

/// Flattened backbone output: data is [B, H_m*W_m, C_t], row-major over the
/// spatial grid (token index = i*W_m + j).
struct ActivationMap {
    std::int64_t H_m = 0;
    std::int64_t W_m = 0;
    std::int64_t C_t = 0;
    Tensor data;
};

/// Two separable learned 1-D encodings; row 0 of each table is the dedicated
/// position of the learnable task token.
struct PosEncoding2D {
    std::int64_t H_m = 0;
    std::int64_t W_m = 0;
    std::int64_t C_t = 0;
    Tensor E_x;  // [(W_m+1), C_t/2]
    Tensor E_y;  // [(H_m+1), C_t/2]

    static PosEncoding2D init(std::int64_t H_m, std::int64_t W_m, std::int64_t C_t, Rng& rng);
    std::vector<Tensor*> parameters();
};

struct EncoderConfig {
    std::int64_t n_blocks = 6;
    std::int64_t n_heads = 8;
    double mlp_ratio = 4.0;
    double dropout = 0.1;
    std::int64_t C_t = 256;
};

/// Learned non-overlapping patch embedding standing in for the CNN backbone.
struct BackboneStub {
    std::int64_t stride = 0;
    std::int64_t C_in = 0;
    std::int64_t C_t = 0;
    Tensor W;  // [stride*stride*C_in, C_t]
    Tensor b;  // [C_t]

    static BackboneStub init(std::int64_t stride, std::int64_t C_in, std::int64_t C_t, Rng& rng);
    std::vector<Tensor*> parameters();
};

/// Patch-flatten + linear map of a [B,H,W,C_in] grid; H and W must be
/// divisible by the stub's stride.
ActivationMap backbone_stub(Graph& g, const Tensor& grid, const BackboneStub& stub);

/// [S, C_t] positional table: row 0 is the token row, row 1 + i*W_m + j is
/// concat(E_x[j+1], E_y[i+1]).
Tensor assemble_pos_table(Graph& g, const PosEncoding2D& pos);

/// Prepends the task token and adds the positional table (token row
/// included): [B, H_m*W_m, C_t] -> [B, H_m*W_m + 1, C_t].
Tensor add_token_and_pos(Graph& g, const ActivationMap& map, const Tensor& token,
                         const PosEncoding2D& pos);

struct EncoderBlockWeights {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

struct EncoderWeights {
    EncoderConfig cfg;
    std::vector<EncoderBlockWeights> blocks;
    Tensor lnf_g, lnf_b;

    static EncoderWeights init(const EncoderConfig& cfg, Rng& rng);
    std::vector<Tensor*> parameters();
};

/// Pre-LayerNorm blocks of MHA + two-layer gelu MLP with residuals and
/// dropout; the positional table is re-added before every block and a final
/// LayerNorm is applied.  Returns the token-0 slice [B,1,C_t].
/// attn_probe, when given, collects the per-block attention probabilities.
Tensor encoder_forward(Graph& g, const Tensor& seq, const EncoderWeights& enc,
                       const Tensor& pos_table, bool training, std::uint64_t drop_seed,
                       std::vector<Tensor>* attn_probe = nullptr);

}  // namespace mambaloc
