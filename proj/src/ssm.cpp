#include "mambaloc/ssm.hpp"

#include <cmath>

#include "mambaloc/errors.hpp"

namespace mambaloc {

namespace {

// (exp(u)-1)/u with the series branch the discretization contract states.
double expm1_over_u(double u) {
    if (std::abs(u) < 1e-8) return 1.0 + 0.5 * u;
    return std::expm1(u) / u;
}

// d/du[(exp(u)-1)/u] = (u e^u - expm1(u)) / u^2, series below |u|=1e-4.
double dexpm1_over_u(double u) {
    if (std::abs(u) < 1e-4) return 0.5 + u / 3.0 + u * u / 8.0;
    return (u * std::exp(u) - std::expm1(u)) / (u * u);
}

}  // namespace

Tensor hippo_init(std::int64_t D, std::int64_t N) {
    if (D < 1 || N < 1) throw DomainError("hippo_init: D and N must be >= 1");
    Tensor a_log = Tensor::zeros({D, N});
    double* ad = a_log.data();
    for (std::int64_t d = 0; d < D; ++d) {
        for (std::int64_t n = 0; n < N; ++n) {
            ad[d * N + n] = std::log(static_cast<double>(n + 1));
        }
    }
    return a_log;
}

SsmParams SsmParams::init(std::int64_t D, std::int64_t N, Rng& rng, std::int64_t delta_rank) {
    SsmParams p;
    p.D = D;
    p.N = N;
    p.R = delta_rank > 0 ? delta_rank : std::max<std::int64_t>(1, D / 16);
    p.A_log = hippo_init(D, N);
    p.A_log.set_requires_grad(true);

    auto randn = [&rng](Shape shape, double stddev) {
        Tensor t = Tensor::zeros(shape);
        for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
        t.set_requires_grad(true);
        return t;
    };
    p.W_B = randn({D, N}, 1.0 / std::sqrt(static_cast<double>(D)));
    p.W_C = randn({D, N}, 1.0 / std::sqrt(static_cast<double>(D)));
    p.W_delta_down = randn({D, p.R}, 1.0 / std::sqrt(static_cast<double>(D)));
    p.W_delta_up = randn({p.R, D}, 1.0 / std::sqrt(static_cast<double>(p.R)));

    // Bias so that softplus(delta_bias) lands log-uniformly in [1e-3, 1e-1],
    // the usual Mamba step-size init.
    p.delta_bias = Tensor::zeros({D});
    for (std::int64_t d = 0; d < D; ++d) {
        const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
        p.delta_bias.data()[d] = std::log(std::expm1(dt));
    }
    p.delta_bias.set_requires_grad(true);
    return p;
}

std::vector<Tensor*> SsmParams::parameters() {
    return {&A_log, &W_B, &W_C, &W_delta_down, &W_delta_up, &delta_bias};
}

Tensor SsmParams::realized_a(Graph& g) const {
    return g.scale(g.exp(A_log), -1.0);
}

Selectivity selectivity(Graph& g, const Tensor& x, const SsmParams& params) {
    const auto& sh = x.shape();
    if (sh.size() != 3 || sh[2] != params.D) {
        throw ShapeMismatch("selectivity: expected [B,L," + std::to_string(params.D) + "], got " +
                            shape_str(sh));
    }
    Selectivity s;
    s.B_sel = g.matmul(x, params.W_B);
    s.C_sel = g.matmul(x, params.W_C);
    Tensor low = g.matmul(x, params.W_delta_down);           // [B,L,R]
    Tensor up = g.matmul(low, params.W_delta_up);            // [B,L,D]
    s.delta = g.softplus(g.add(up, params.delta_bias));      // > 0 elementwise
    return s;
}

DiscretizedSystem discretize(Graph& g, const Tensor& delta, const Tensor& a, const Tensor& b_sel,
                             const Tensor& c_sel) {
    const auto& ds = delta.shape();
    const auto& as = a.shape();
    const auto& bs = b_sel.shape();
    if (ds.size() != 3 || as.size() != 2 || bs.size() != 3) {
        throw ShapeMismatch("discretize: delta " + shape_str(ds) + ", A " + shape_str(as) +
                            ", B_sel " + shape_str(bs));
    }
    const std::int64_t B = ds[0], L = ds[1], D = ds[2], N = as[1];
    if (as[0] != D || bs[0] != B || bs[1] != L || bs[2] != N) {
        throw ShapeMismatch("discretize: inconsistent shapes delta " + shape_str(ds) + ", A " +
                            shape_str(as) + ", B_sel " + shape_str(bs));
    }
    const double* dd = delta.data();
    for (std::int64_t i = 0; i < delta.size(); ++i) {
        if (!(dd[i] > 0.0)) throw DomainError("discretize: delta must be > 0 everywhere");
    }

    Tensor a_bar = Tensor::zeros({B, L, D, N});
    Tensor b_bar = Tensor::zeros({B, L, D, N});
    const double* ad = a.data();
    const double* bd = b_sel.data();
    double* abar = a_bar.data();
    double* bbar = b_bar.data();

#pragma omp parallel for collapse(2) schedule(static) if (B * L >= 4)
    for (std::int64_t bl = 0; bl < B * L; ++bl) {
        for (std::int64_t d = 0; d < D; ++d) {
            const double dt = dd[bl * D + d];
            const double* arow = ad + d * N;
            const double* brow = bd + bl * N;
            double* abrow = abar + (bl * D + d) * N;
            double* bbrow = bbar + (bl * D + d) * N;
            for (std::int64_t n = 0; n < N; ++n) {
                const double u = dt * arow[n];
                abrow[n] = std::exp(u);
                bbrow[n] = expm1_over_u(u) * dt * brow[n];
            }
        }
    }

    g.record("discretize", {delta, a, b_sel}, {a_bar, b_bar},
             [B, L, D, N](const Graph::Node& node) {
                 const Tensor& delta = node.inputs[0];
                 const Tensor& a = node.inputs[1];
                 const Tensor& b_sel = node.inputs[2];
                 const double* dAbar = node.outputs[0].grad().data();
                 const double* dBbar = node.outputs[1].grad().data();
                 const double* dd = delta.data();
                 const double* ad = a.data();
                 const double* bd = b_sel.data();
                 const bool need_delta = delta.requires_grad();
                 const bool need_a = a.requires_grad();
                 const bool need_b = b_sel.requires_grad();
                 double* ddelta = need_delta ? const_cast<Tensor&>(delta).grad().data() : nullptr;
                 double* dbsel = need_b ? const_cast<Tensor&>(b_sel).grad().data() : nullptr;
                 // dA accumulates over (b,l); a single sequential loop owns it.
                 double* da = need_a ? const_cast<Tensor&>(a).grad().data() : nullptr;
                 for (std::int64_t bl = 0; bl < B * L; ++bl) {
                     for (std::int64_t d = 0; d < D; ++d) {
                         const double dt = dd[bl * D + d];
                         const double* arow = ad + d * N;
                         const double* brow = bd + bl * N;
                         const std::int64_t base = (bl * D + d) * N;
                         double ddt = 0.0;
                         for (std::int64_t n = 0; n < N; ++n) {
                             const double av = arow[n];
                             const double u = dt * av;
                             const double eu = std::exp(u);
                             const double f = expm1_over_u(u);
                             const double gA = dAbar[base + n];
                             const double gB = dBbar[base + n];
                             const double bv = brow[n];
                             if (need_delta) {
                                 // dAbar/ddt = A e^u ; dBbar/ddt = e^u * B_sel
                                 ddt += gA * av * eu + gB * eu * bv;
                             }
                             if (need_a) {
                                 // dAbar/dA = dt e^u ; dBbar/dA = dt^2 f'(u) B_sel
                                 da[d * N + n] += gA * dt * eu + gB * dt * dt * dexpm1_over_u(u) * bv;
                             }
                             if (need_b) {
                                 dbsel[bl * N + n] += gB * f * dt;
                             }
                         }
                         if (need_delta) ddelta[bl * D + d] += ddt;
                     }
                 }
             });

    DiscretizedSystem sys;
    sys.a_bar = a_bar;
    sys.b_bar = b_bar;
    sys.c = c_sel;
    return sys;
}

namespace {

// Shared scan kernel.  chunk >= L is the plain sequential recurrence; smaller
// chunks evaluate locally from a zero state and recombine with the carried
// boundary state via the associative (decay, offset) composition.
Tensor scan_impl(Graph& g, const DiscretizedSystem& sys, const Tensor& x, std::int64_t chunk) {
    const auto& abs_ = sys.a_bar.shape();
    const auto& xs = x.shape();
    if (abs_.size() != 4 || xs.size() != 3) {
        throw ShapeMismatch("scan: a_bar " + shape_str(abs_) + ", x " + shape_str(xs));
    }
    const std::int64_t B = abs_[0], L = abs_[1], D = abs_[2], N = abs_[3];
    if (sys.b_bar.shape() != abs_) {
        throw ShapeMismatch("scan: b_bar " + shape_str(sys.b_bar.shape()) + " vs a_bar " + shape_str(abs_));
    }
    const auto& cs = sys.c.shape();
    if (cs.size() != 3 || cs[0] != B || cs[1] != L || cs[2] != N) {
        throw ShapeMismatch("scan: C " + shape_str(cs) + " inconsistent with a_bar " + shape_str(abs_));
    }
    if (xs[0] != B || xs[1] != L || xs[2] != D) {
        throw ShapeMismatch("scan: x " + shape_str(xs) + " inconsistent with a_bar " + shape_str(abs_));
    }
    if (chunk < 1) throw DomainError("scan: chunk must be >= 1");

    const bool rec = g.recording() &&
                     (sys.a_bar.requires_grad() || sys.b_bar.requires_grad() ||
                      sys.c.requires_grad() || x.requires_grad());

    Tensor y = Tensor::zeros({B, L, D});
    // Hidden states are saved only when a backward pass can need them.
    Tensor h_hist = rec ? Tensor::zeros({B, L, D, N}) : Tensor();

    const double* abar = sys.a_bar.data();
    const double* bbar = sys.b_bar.data();
    const double* cd = sys.c.data();
    const double* xd = x.data();
    double* yd = y.data();
    double* hh = rec ? h_hist.data() : nullptr;

#pragma omp parallel for collapse(2) schedule(static) if (B * D >= 4)
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t d = 0; d < D; ++d) {
            std::vector<double> hloc(static_cast<std::size_t>(N));
            std::vector<double> pp(static_cast<std::size_t>(N));
            std::vector<ScanCarry> carry(static_cast<std::size_t>(N));
            for (std::int64_t cs0 = 0; cs0 < L; cs0 += chunk) {
                const std::int64_t ce = std::min(L, cs0 + chunk);
                std::fill(hloc.begin(), hloc.end(), 0.0);
                std::fill(pp.begin(), pp.end(), 1.0);
                for (std::int64_t t = cs0; t < ce; ++t) {
                    const std::int64_t base = ((b * L + t) * D + d) * N;
                    const double xv = xd[(b * L + t) * D + d];
                    const double* crow = cd + (b * L + t) * N;
                    double acc = 0.0;
                    if (cs0 == 0) {
                        // First chunk starts from the true h_0 = 0: the local
                        // scan is already the full state.
                        for (std::int64_t n = 0; n < N; ++n) {
                            const double hv = abar[base + n] * hloc[static_cast<std::size_t>(n)] +
                                              bbar[base + n] * xv;
                            hloc[static_cast<std::size_t>(n)] = hv;
                            pp[static_cast<std::size_t>(n)] *= abar[base + n];
                            if (hh) hh[base + n] = hv;
                            acc += crow[n] * hv;
                        }
                    } else {
                        for (std::int64_t n = 0; n < N; ++n) {
                            const double a = abar[base + n];
                            const double hl = a * hloc[static_cast<std::size_t>(n)] + bbar[base + n] * xv;
                            hloc[static_cast<std::size_t>(n)] = hl;
                            pp[static_cast<std::size_t>(n)] *= a;
                            const double hv = hl + pp[static_cast<std::size_t>(n)] *
                                                       carry[static_cast<std::size_t>(n)].offset;
                            if (hh) hh[base + n] = hv;
                            acc += crow[n] * hv;
                        }
                    }
                    yd[(b * L + t) * D + d] = acc;
                }
                if (ce < L) {
                    for (std::int64_t n = 0; n < N; ++n) {
                        const ScanCarry block{pp[static_cast<std::size_t>(n)], hloc[static_cast<std::size_t>(n)]};
                        carry[static_cast<std::size_t>(n)] =
                            cs0 == 0 ? block : compose(carry[static_cast<std::size_t>(n)], block);
                    }
                }
            }
        }
    }

    if (rec) {
        g.record("scan", {sys.a_bar, sys.b_bar, sys.c, x}, {y},
                 [B, L, D, N, h_hist](const Graph::Node& node) {
                     const Tensor& a_bar = node.inputs[0];
                     const Tensor& b_bar = node.inputs[1];
                     const Tensor& c = node.inputs[2];
                     const Tensor& x = node.inputs[3];
                     const double* dy = node.outputs[0].grad().data();
                     const double* abar = a_bar.data();
                     const double* bbar = b_bar.data();
                     const double* cd = c.data();
                     const double* xd = x.data();
                     const double* hh = h_hist.data();
                     const bool need_a = a_bar.requires_grad();
                     const bool need_b = b_bar.requires_grad();
                     const bool need_c = c.requires_grad();
                     const bool need_x = x.requires_grad();
                     double* dabar = need_a ? const_cast<Tensor&>(a_bar).grad().data() : nullptr;
                     double* dbbar = need_b ? const_cast<Tensor&>(b_bar).grad().data() : nullptr;
                     double* dc = need_c ? const_cast<Tensor&>(c).grad().data() : nullptr;
                     double* dx = need_x ? const_cast<Tensor&>(x).grad().data() : nullptr;
                     // Parallel over batch only: dc accumulates across d.
#pragma omp parallel for schedule(static) if (B >= 2)
                     for (std::int64_t b = 0; b < B; ++b) {
                         std::vector<double> lam(static_cast<std::size_t>(N));
                         for (std::int64_t d = 0; d < D; ++d) {
                             std::fill(lam.begin(), lam.end(), 0.0);
                             for (std::int64_t t = L - 1; t >= 0; --t) {
                                 const std::int64_t base = ((b * L + t) * D + d) * N;
                                 const double g_y = dy[(b * L + t) * D + d];
                                 const double* crow = cd + (b * L + t) * N;
                                 const double xv = xd[(b * L + t) * D + d];
                                 double dxv = 0.0;
                                 for (std::int64_t n = 0; n < N; ++n) {
                                     // lam currently holds a_{t+1} * lam_{t+1}
                                     const double l = lam[static_cast<std::size_t>(n)] + g_y * crow[n];
                                     const double hprev =
                                         t > 0 ? hh[((b * L + (t - 1)) * D + d) * N + n] : 0.0;
                                     if (need_a) dabar[base + n] += l * hprev;
                                     if (need_b) dbbar[base + n] += l * xv;
                                     if (need_x) dxv += l * bbar[base + n];
                                     lam[static_cast<std::size_t>(n)] = l * abar[base + n];
                                 }
                                 if (need_x) dx[(b * L + t) * D + d] += dxv;
                             }
                         }
                         if (need_c) {
                             for (std::int64_t t = 0; t < L; ++t) {
                                 for (std::int64_t d = 0; d < D; ++d) {
                                     const double g_y = dy[(b * L + t) * D + d];
                                     if (g_y == 0.0) continue;
                                     const double* hrow = hh + ((b * L + t) * D + d) * N;
                                     double* dcrow = dc + (b * L + t) * N;
                                     for (std::int64_t n = 0; n < N; ++n) dcrow[n] += g_y * hrow[n];
                                 }
                             }
                         }
                     }
                 });
    }
    return y;
}

}  // namespace

Tensor scan_sequential(Graph& g, const DiscretizedSystem& sys, const Tensor& x) {
    return scan_impl(g, sys, x, sys.a_bar.shape()[1]);
}

Tensor scan_chunked(Graph& g, const DiscretizedSystem& sys, const Tensor& x, std::int64_t chunk) {
    return scan_impl(g, sys, x, chunk);
}

}  // namespace mambaloc
