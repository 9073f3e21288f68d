#include "fmlb/kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace fmlb::kernels {

namespace {

// Treat [d] as one row of width d, [T, d] as T rows.
void last_axis_view(const Tensor& t, size_t& rows, size_t& width) {
    require(t.ndim() >= 1, "expected at least 1-D tensor");
    width = t.dim(t.ndim() - 1);
    rows = t.numel() / width;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

double softplus(double x) {
    if (x > 20.0) {
        return x + std::log1p(std::exp(-x));
    }
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double silu(double x) {
    return x * sigmoid(x);
}

Tensor softplus(const Tensor& x) {
    ensure_finite(x, "softplus");
    Tensor y(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) {
        y[i] = softplus(x[i]);
    }
    return y;
}

void softplus_backward(const Tensor& x, const Tensor& dy, Tensor& dx) {
    require(x.same_shape(dy) && x.same_shape(dx), "softplus_backward: shape mismatch");
    for (size_t i = 0; i < x.numel(); ++i) {
        dx[i] += dy[i] * sigmoid(x[i]);
    }
}

Tensor silu(const Tensor& x) {
    ensure_finite(x, "silu");
    Tensor y(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) {
        y[i] = silu(x[i]);
    }
    return y;
}

void silu_backward(const Tensor& x, const Tensor& dy, Tensor& dx) {
    require(x.same_shape(dy) && x.same_shape(dx), "silu_backward: shape mismatch");
    for (size_t i = 0; i < x.numel(); ++i) {
        double s = sigmoid(x[i]);
        dx[i] += dy[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

// ---------------------------------------------------------------------------
// RMSNorm
// ---------------------------------------------------------------------------

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    ensure_finite(x, "rmsnorm");
    require(eps >= 0.0, "rmsnorm: negative eps");
    size_t rows, d;
    last_axis_view(x, rows, d);
    require(gain.numel() == d, "rmsnorm: gain length does not match last axis");

    Tensor y(x.shape());
    const double* xp = x.data();
    double* yp = y.data();
    for (size_t r = 0; r < rows; ++r, xp += d, yp += d) {
        double ss = 0.0;
        for (size_t i = 0; i < d; ++i) {
            ss += xp[i] * xp[i];
        }
        double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        for (size_t i = 0; i < d; ++i) {
            yp[i] = xp[i] * inv * gain[i];
        }
    }
    return y;
}

void rmsnorm_backward(const Tensor& x, const Tensor& gain, double eps,
                      const Tensor& dy, Tensor& dx, Tensor& dgain) {
    size_t rows, d;
    last_axis_view(x, rows, d);
    require(dy.same_shape(x) && dx.same_shape(x), "rmsnorm_backward: shape mismatch");
    require(gain.numel() == d && dgain.numel() == d, "rmsnorm_backward: gain shape mismatch");

    const double* xp = x.data();
    const double* dyp = dy.data();
    double* dxp = dx.data();
    double dn = static_cast<double>(d);
    for (size_t r = 0; r < rows; ++r, xp += d, dyp += d, dxp += d) {
        double ss = 0.0;
        for (size_t i = 0; i < d; ++i) {
            ss += xp[i] * xp[i];
        }
        double rms = std::sqrt(ss / dn + eps);
        double inv = 1.0 / rms;
        // s = sum_j dy_j * gain_j * x_j
        double s = 0.0;
        for (size_t i = 0; i < d; ++i) {
            s += dyp[i] * gain[i] * xp[i];
        }
        double k = s * inv * inv * inv / dn;
        for (size_t i = 0; i < d; ++i) {
            dxp[i] += dyp[i] * gain[i] * inv - xp[i] * k;
            dgain[i] += dyp[i] * xp[i] * inv;
        }
    }
}

// ---------------------------------------------------------------------------
// Matmul and embedding
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& x, const Tensor& w) {
    ensure_finite(x, "matmul");
    require(x.ndim() == 2 && w.ndim() == 2, "matmul: expected 2-D operands");
    require(x.cols() == w.rows(), "matmul: inner dimensions do not match");
    size_t T = x.rows(), in = x.cols(), out = w.cols();
    Tensor y({T, out});
    for (size_t t = 0; t < T; ++t) {
        const double* xr = x.row(t);
        double* yr = y.row(t);
        for (size_t i = 0; i < in; ++i) {
            double xv = xr[i];
            const double* wr = w.row(i);
            for (size_t o = 0; o < out; ++o) {
                yr[o] += xv * wr[o];
            }
        }
    }
    return y;
}

void matmul_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                     Tensor& dx, Tensor& dw) {
    size_t T = x.rows(), in = x.cols(), out = w.cols();
    require(dy.rows() == T && dy.cols() == out, "matmul_backward: dy shape mismatch");
    require(dx.same_shape(x) && dw.same_shape(w), "matmul_backward: grad shape mismatch");
    for (size_t t = 0; t < T; ++t) {
        const double* dyr = dy.row(t);
        const double* xr = x.row(t);
        double* dxr = dx.row(t);
        for (size_t i = 0; i < in; ++i) {
            const double* wr = w.row(i);
            double* dwr = dw.row(i);
            double acc = 0.0;
            double xv = xr[i];
            for (size_t o = 0; o < out; ++o) {
                acc += dyr[o] * wr[o];
                dwr[o] += xv * dyr[o];
            }
            dxr[i] += acc;
        }
    }
}

Tensor embedding(const std::vector<int>& ids, const Tensor& table) {
    require(table.ndim() == 2, "embedding: table must be 2-D");
    size_t vocab = table.rows(), d = table.cols();
    Tensor y({ids.size(), d});
    for (size_t t = 0; t < ids.size(); ++t) {
        int id = ids[t];
        require(id >= 0 && static_cast<size_t>(id) < vocab, "embedding: token id out of range");
        const double* src = table.row(static_cast<size_t>(id));
        double* dst = y.row(t);
        for (size_t i = 0; i < d; ++i) {
            dst[i] = src[i];
        }
    }
    return y;
}

void embedding_backward(const std::vector<int>& ids, const Tensor& dy, Tensor& dtable) {
    size_t d = dtable.cols();
    require(dy.rows() == ids.size() && dy.cols() == d, "embedding_backward: shape mismatch");
    for (size_t t = 0; t < ids.size(); ++t) {
        const double* src = dy.row(t);
        double* dst = dtable.row(static_cast<size_t>(ids[t]));
        for (size_t i = 0; i < d; ++i) {
            dst[i] += src[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Causal conv1d
// ---------------------------------------------------------------------------

ConvResult causal_conv1d(const Tensor& x, const Tensor& weights,
                         const Tensor& bias, const Tensor& cache) {
    ensure_finite(x, "causal_conv1d");
    require(x.ndim() == 2 && weights.ndim() == 2 && cache.ndim() == 2,
            "causal_conv1d: expected 2-D x/weights/cache");
    size_t T = x.rows(), d = x.cols(), K = weights.cols();
    require(weights.rows() == d && bias.numel() == d, "causal_conv1d: weight shape mismatch");
    require(cache.rows() == d && cache.cols() == K - 1, "causal_conv1d: cache width must be d_conv - 1");

    ConvResult out{Tensor({T, d}), Tensor({d, K - 1})};
    for (size_t c = 0; c < d; ++c) {
        const double* wc = weights.row(c);
        const double* cc = cache.row(c);
        for (size_t t = 0; t < T; ++t) {
            double acc = bias[c];
            for (size_t k = 0; k < K; ++k) {
                // x_ext index t + k; the first K-1 entries come from the cache
                size_t i = t + k;
                double xv = (i < K - 1) ? cc[i] : x.at(i - (K - 1), c);
                acc += wc[k] * xv;
            }
            out.y.at(t, c) = acc;
        }
        // new cache: the last K-1 rows of x_ext
        double* nc = out.cache.row(c);
        for (size_t j = 0; j < K - 1; ++j) {
            size_t i = T + j;  // index into x_ext of length T + K - 1
            nc[j] = (i < K - 1) ? cc[i] : x.at(i - (K - 1), c);
        }
    }
    return out;
}

void causal_conv1d_backward(const Tensor& x, const Tensor& weights,
                            const Tensor& cache, const Tensor& dy,
                            Tensor& dx, Tensor& dweights, Tensor& dbias,
                            Tensor& dcache) {
    size_t T = x.rows(), d = x.cols(), K = weights.cols();
    require(dy.rows() == T && dy.cols() == d, "causal_conv1d_backward: dy shape mismatch");
    for (size_t c = 0; c < d; ++c) {
        const double* wc = weights.row(c);
        const double* cc = cache.row(c);
        double* dwc = dweights.row(c);
        double* dcc = dcache.row(c);
        for (size_t t = 0; t < T; ++t) {
            double g = dy.at(t, c);
            dbias[c] += g;
            for (size_t k = 0; k < K; ++k) {
                size_t i = t + k;
                if (i < K - 1) {
                    dwc[k] += g * cc[i];
                    dcc[i] += g * wc[k];
                } else {
                    dwc[k] += g * x.at(i - (K - 1), c);
                    dx.at(i - (K - 1), c) += g * wc[k];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

void selective_scan_step(const ScanParams& sp, Tensor& h,
                         const double* x_t, const double* delta_t,
                         const double* B_t, const double* C_t, double* y_t) {
    size_t d = sp.A.rows(), N = sp.A.cols();
    for (size_t c = 0; c < d; ++c) {
        if (!(delta_t[c] > 0.0)) {
            throw std::invalid_argument("selective_scan: delta must be strictly positive");
        }
        const double* Ac = sp.A.row(c);
        double* hc = h.row(c);
        double dx = delta_t[c] * x_t[c];
        double acc = 0.0;
        for (size_t n = 0; n < N; ++n) {
            double abar = std::exp(delta_t[c] * Ac[n]);
            hc[n] = abar * hc[n] + dx * B_t[n];
            acc += C_t[n] * hc[n];
        }
        y_t[c] = acc + sp.D[c] * x_t[c];
    }
}

ScanResult selective_scan_seq(const ScanParams& sp, const Tensor& h0,
                              const Tensor& xs, const Tensor& deltas,
                              const Tensor& Bs, const Tensor& Cs,
                              bool keep_history) {
    ensure_finite(xs, "selective_scan_seq");
    size_t d = sp.A.rows(), N = sp.A.cols();
    size_t T = xs.rows();
    require(xs.cols() == d && deltas.rows() == T && deltas.cols() == d,
            "selective_scan_seq: xs/deltas shape mismatch");
    require(Bs.rows() == T && Bs.cols() == N && Cs.rows() == T && Cs.cols() == N,
            "selective_scan_seq: Bs/Cs shape mismatch");
    require(h0.rows() == d && h0.cols() == N, "selective_scan_seq: h0 shape mismatch");
    require(sp.D.numel() == d, "selective_scan_seq: D shape mismatch");

    ScanResult out;
    out.ys = Tensor({T, d});
    out.hT = h0;
    if (keep_history) {
        out.hs = Tensor({T + 1, d * N});
        for (size_t i = 0; i < d * N; ++i) {
            out.hs.at(0, i) = h0[i];
        }
    }
    for (size_t t = 0; t < T; ++t) {
        selective_scan_step(sp, out.hT, xs.row(t), deltas.row(t), Bs.row(t),
                            Cs.row(t), out.ys.row(t));
        if (keep_history) {
            for (size_t i = 0; i < d * N; ++i) {
                out.hs.at(t + 1, i) = out.hT[i];
            }
        }
    }
    return out;
}

void selective_scan_seq_backward(const ScanParams& sp, const Tensor& hs,
                                 const Tensor& xs, const Tensor& deltas,
                                 const Tensor& Bs, const Tensor& Cs,
                                 const Tensor& dys, const Tensor* dhT,
                                 Tensor& dA, Tensor& dD, Tensor& dh0,
                                 Tensor& dxs, Tensor& ddeltas,
                                 Tensor& dBs, Tensor& dCs) {
    size_t d = sp.A.rows(), N = sp.A.cols();
    size_t T = xs.rows();
    require(hs.rows() == T + 1 && hs.cols() == d * N,
            "selective_scan_seq_backward: history shape mismatch (forward must keep it)");

    // gh holds dLoss/dh_t while walking t backwards.
    Tensor gh({d, N});
    if (dhT != nullptr) {
        gh = *dhT;
    }
    for (size_t t = T; t-- > 0;) {
        const double* h_prev = hs.row(t);        // h_{t-1}
        const double* h_cur = hs.row(t + 1);     // h_t
        const double* dy = dys.row(t);
        const double* x_t = xs.row(t);
        const double* delta_t = deltas.row(t);
        const double* B_t = Bs.row(t);
        const double* C_t = Cs.row(t);
        double* dB_t = dBs.row(t);
        double* dC_t = dCs.row(t);
        for (size_t c = 0; c < d; ++c) {
            const double* Ac = sp.A.row(c);
            const double* hp = h_prev + c * N;
            const double* hc = h_cur + c * N;
            double* ghc = gh.row(c);
            double* dAc = dA.row(c);
            double g = dy[c];
            // readout y_t[c] = sum_n C[n] h_t[c,n] + D[c] x_t[c]
            dD[c] += g * x_t[c];
            double ddelta = 0.0;
            double dx_acc = g * sp.D[c];
            for (size_t n = 0; n < N; ++n) {
                double ghn = ghc[n] + g * C_t[n];
                dC_t[n] += g * hc[n];  // h_t
                double abar = std::exp(delta_t[c] * Ac[n]);
                // h_t = abar * h_{t-1} + delta * B * x
                dAc[n] += ghn * hp[n] * delta_t[c] * abar;
                ddelta += ghn * (Ac[n] * abar * hp[n] + B_t[n] * x_t[c]);
                dB_t[n] += ghn * delta_t[c] * x_t[c];
                dx_acc += ghn * delta_t[c] * B_t[n];
                ghc[n] = ghn * abar;
            }
            ddeltas.at(t, c) += ddelta;
            dxs.at(t, c) += dx_acc;
        }
    }
    for (size_t c = 0; c < d; ++c) {
        for (size_t n = 0; n < N; ++n) {
            dh0.at(c, n) += gh.at(c, n);
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

CrossEntropyResult cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                                 const std::vector<uint8_t>& mask, double z_coeff) {
    ensure_finite(logits, "cross_entropy");
    require(logits.ndim() == 2, "cross_entropy: logits must be [T, V]");
    size_t T = logits.rows(), V = logits.cols();
    require(targets.size() == T && mask.size() == T, "cross_entropy: targets/mask length mismatch");

    CrossEntropyResult out;
    out.probs = Tensor({T, V});
    out.lse = Tensor({T});
    double ce_sum = 0.0, z_sum = 0.0;
    for (size_t t = 0; t < T; ++t) {
        const double* lr = logits.row(t);
        double* pr = out.probs.row(t);
        double mx = lr[0];
        for (size_t v = 1; v < V; ++v) {
            mx = std::max(mx, lr[v]);
        }
        double se = 0.0;
        for (size_t v = 0; v < V; ++v) {
            pr[v] = std::exp(lr[v] - mx);
            se += pr[v];
        }
        double inv = 1.0 / se;
        for (size_t v = 0; v < V; ++v) {
            pr[v] *= inv;
        }
        double lse = mx + std::log(se);
        out.lse[t] = lse;
        if (mask[t]) {
            int tgt = targets[t];
            require(tgt >= 0 && static_cast<size_t>(tgt) < V, "cross_entropy: target out of range");
            ce_sum += lse - lr[tgt];
            z_sum += lse * lse;
            ++out.supervised;
        }
    }
    if (out.supervised == 0) {
        throw std::invalid_argument("cross_entropy: empty mask, no supervised positions");
    }
    double m = static_cast<double>(out.supervised);
    out.loss = ce_sum / m + z_coeff * z_sum / m;
    return out;
}

void cross_entropy_backward(const CrossEntropyResult& saved,
                            const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask, double z_coeff,
                            double dloss, Tensor& dlogits) {
    size_t T = saved.probs.rows(), V = saved.probs.cols();
    require(dlogits.rows() == T && dlogits.cols() == V, "cross_entropy_backward: shape mismatch");
    double scale = dloss / static_cast<double>(saved.supervised);
    for (size_t t = 0; t < T; ++t) {
        if (!mask[t]) {
            continue;
        }
        const double* pr = saved.probs.row(t);
        double* dr = dlogits.row(t);
        double zk = z_coeff * 2.0 * saved.lse[t];
        for (size_t v = 0; v < V; ++v) {
            dr[v] += scale * (pr[v] + zk * pr[v]);
        }
        dr[static_cast<size_t>(targets[t])] -= scale;
    }
}

}  // namespace fmlb::kernels
