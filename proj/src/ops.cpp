#include "regiontok/ops.hpp"

#include "regiontok/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>

namespace regiontok::ops {

using ad::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

// Eigen's vectorized kernels start reductions at the first aligned address, so
// products on maps over heap vectors can change in the last bits with the
// allocation address. Products therefore run on owned, maximally aligned copies.
RowMat owned(const double* p, int rows, int cols) { return CMapMat(p, rows, cols); }

void store(double* dst, const RowMat& v) { std::copy(v.data(), v.data() + v.size(), dst); }

void add_into(double* dst, const RowMat& v) {
    const double* src = v.data();
    for (Eigen::Index i = 0; i < v.size(); ++i) dst[i] += src[i];
}

template <typename F, typename G>
Var unary(const Var& a, F forward, G derivative) {
    Tensor out(a.shape());
    const auto& in = a.value().data;
    for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = forward(in[i]);
    return ad::make_result(std::move(out), {a}, [derivative](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.grad_buffer();
        const auto& x = p.value.data;
        const auto& y = n.value.data;
        for (std::size_t i = 0; i < x.size(); ++i) g.data[i] += n.grad.data[i] * derivative(x[i], y[i]);
    });
}

void require_rank(const Var& v, int rank, const char* what) {
    if (v.value().rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(v.shape()));
}

} // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.value().data[i];
    return ad::make_result(std::move(out), {a, b}, [](Node& n) {
        for (auto& p : n.parents)
            if (p->requires_grad) p->accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.value().data[i];
    return ad::make_result(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor& g = n.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] -= n.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b.value().data[i];
    return ad::make_result(std::move(out), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            Tensor& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i] * pb.value.data[i];
        }
        if (pb.requires_grad) {
            Tensor& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i] * pa.value.data[i];
        }
    });
}

Var scale(const Var& a, double s) {
    return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var square(const Var& a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(const Var& a) {
    // Subgradient 0 at the kink.
    return unary(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var relu(const Var& a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
    return unary(
        a, [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var silu(const Var& a) {
    return unary(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var tanh(const Var& a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
    return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& a) {
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    return unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x))); },
        [](double x, double) {
            const double u = k * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    return ad::make_result(Tensor({1}, s), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.grad_buffer();
        const double go = n.grad.data[0];
        for (double& v : g.data) v += go;
    });
}

Var mean(const Var& a) {
    const std::size_t count = a.numel();
    if (count == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(count));
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
    if (terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights length mismatch");
    double s = 0.0;
    std::vector<Var> parents;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].numel() != 1) throw ShapeError("weighted_sum expects scalar terms");
        s += weights[i] * terms[i].item();
        parents.push_back(terms[i]);
    }
    std::vector<double> w(weights.begin(), weights.end());
    return ad::make_result(Tensor({1}, s), std::move(parents), [w](Node& n) {
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            Node& p = *n.parents[i];
            if (!p.requires_grad) continue;
            p.grad_buffer().data[0] += w[i] * n.grad.data[0];
        }
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return ad::make_result(std::move(out), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        Tensor& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += n.grad.data[i];
    });
}

Var stop_gradient(const Var& a) { return ad::constant(a.value()); }

Var straight_through(const Var& z, const Tensor& quantized) {
    require_same_shape(z.value(), quantized, "straight_through");
    return ad::make_result(quantized, {z}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
    int c, h, w, k, stride, pad, oh, ow;
    int ck() const { return c * k * k; }
    int p() const { return oh * ow; }
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* img, const ConvGeom& g, double* cols) {
    const int p = g.p();
    for (int c = 0; c < g.c; ++c)
        for (int i = 0; i < g.k; ++i)
            for (int j = 0; j < g.k; ++j) {
                double* row = cols + static_cast<std::size_t>((c * g.k + i) * g.k + j) * p;
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int y = oy * g.stride - g.pad + i;
                    double* out = row + oy * g.ow;
                    if (y < 0 || y >= g.h) {
                        std::fill(out, out + g.ow, 0.0);
                        continue;
                    }
                    const double* src = img + (static_cast<std::size_t>(c) * g.h + y) * g.w;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int x = ox * g.stride - g.pad + j;
                        out[ox] = (x >= 0 && x < g.w) ? src[x] : 0.0;
                    }
                }
            }
}

void col2im(const double* cols, const ConvGeom& g, double* img) {
    const int p = g.p();
    for (int c = 0; c < g.c; ++c)
        for (int i = 0; i < g.k; ++i)
            for (int j = 0; j < g.k; ++j) {
                const double* row = cols + static_cast<std::size_t>((c * g.k + i) * g.k + j) * p;
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int y = oy * g.stride - g.pad + i;
                    if (y < 0 || y >= g.h) continue;
                    double* dst = img + (static_cast<std::size_t>(c) * g.h + y) * g.w;
                    const double* in = row + oy * g.ow;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int x = ox * g.stride - g.pad + j;
                        if (x >= 0 && x < g.w) dst[x] += in[ox];
                    }
                }
            }
}

} // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    require_rank(x, 4, "conv2d input");
    require_rank(weight, 4, "conv2d weight");
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (ws[1] != xs[1]) throw ShapeError("conv2d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                                         std::to_string(xs[1]));
    if (ws[2] != ws[3]) throw ShapeError("conv2d: only square kernels are supported");
    if (bias.defined() && bias.numel() != static_cast<std::size_t>(ws[0])) throw ShapeError("conv2d: bias size");
    ConvGeom g{xs[1], xs[2], xs[3], ws[2], stride, pad, 0, 0};
    g.oh = (g.h + 2 * pad - g.k) / stride + 1;
    g.ow = (g.w + 2 * pad - g.k) / stride + 1;
    if (g.oh <= 0 || g.ow <= 0) throw ShapeError("conv2d: input too small for kernel");
    const int n_batch = xs[0];
    const int out_c = ws[0];

    Tensor out({n_batch, out_c, g.oh, g.ow});
    const RowMat wm = owned(weight.value().data.data(), out_c, g.ck());
    std::vector<double> cols;
    if (!g.pointwise()) cols.resize(static_cast<std::size_t>(g.ck()) * g.p());
    for (int n = 0; n < n_batch; ++n) {
        const double* img = x.value().data.data() + static_cast<std::size_t>(n) * g.c * g.h * g.w;
        const double* colp = img;
        if (!g.pointwise()) {
            im2col(img, g, cols.data());
            colp = cols.data();
        }
        double* op = out.data.data() + static_cast<std::size_t>(n) * out_c * g.p();
        store(op, wm * owned(colp, g.ck(), g.p()));
        if (bias.defined())
            for (int o = 0; o < out_c; ++o)
                for (int i = 0; i < g.p(); ++i) op[static_cast<std::size_t>(o) * g.p() + i] += bias.value().data[o];
    }

    std::vector<Var> parents{x, weight};
    if (bias.defined()) parents.push_back(bias);
    return ad::make_result(std::move(out), std::move(parents), [g, n_batch, out_c](Node& node) {
        Node& px = *node.parents[0];
        Node& pw = *node.parents[1];
        Node* pb = node.parents.size() > 2 ? node.parents[2].get() : nullptr;
        const RowMat wt = owned(pw.value.data.data(), out_c, g.ck()).transpose();
        RowMat gw;
        if (pw.requires_grad) gw = RowMat::Zero(out_c, g.ck());
        std::vector<double> cols;
        if (!g.pointwise()) cols.resize(static_cast<std::size_t>(g.ck()) * g.p());
        for (int n = 0; n < n_batch; ++n) {
            const double* gyp = node.grad.data.data() + static_cast<std::size_t>(n) * out_c * g.p();
            if (pb && pb->requires_grad) {
                Tensor& gb = pb->grad_buffer();
                for (int o = 0; o < out_c; ++o) {
                    double acc = 0.0;
                    for (int i = 0; i < g.p(); ++i) acc += gyp[static_cast<std::size_t>(o) * g.p() + i];
                    gb.data[o] += acc;
                }
            }
            const RowMat gy = owned(gyp, out_c, g.p());
            const std::size_t img_off = static_cast<std::size_t>(n) * g.c * g.h * g.w;
            if (pw.requires_grad) {
                const double* colp = px.value.data.data() + img_off;
                if (!g.pointwise()) {
                    im2col(colp, g, cols.data());
                    colp = cols.data();
                }
                gw.noalias() += gy * owned(colp, g.ck(), g.p()).transpose();
            }
            if (px.requires_grad) {
                double* gx = px.grad_buffer().data.data() + img_off;
                const RowMat dc = wt * gy;
                if (g.pointwise()) add_into(gx, dc);
                else col2im(dc.data(), g, gx);
            }
        }
        if (pw.requires_grad) add_into(pw.grad_buffer().data.data(), gw);
    });
}

// ---------------------------------------------------------------------------
// Normalization

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    require_rank(x, 4, "group_norm");
    const auto& s = x.shape();
    const int n_batch = s[0], c = s[1];
    const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
    if (groups <= 0 || c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c))
        throw ShapeError("group_norm: affine parameter size");
    const int cpg = c / groups;
    const std::size_t group_size = static_cast<std::size_t>(cpg) * hw;

    Tensor out(s);
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n_batch) * groups);
    const auto& xv = x.value().data;
    for (int n = 0; n < n_batch; ++n)
        for (int gi = 0; gi < groups; ++gi) {
            const std::size_t off = (static_cast<std::size_t>(n) * c + gi * cpg) * hw;
            double m = 0.0;
            for (std::size_t i = 0; i < group_size; ++i) m += xv[off + i];
            m /= static_cast<double>(group_size);
            double var = 0.0;
            for (std::size_t i = 0; i < group_size; ++i) {
                const double d = xv[off + i] - m;
                var += d * d;
            }
            var /= static_cast<double>(group_size);
            const double r = 1.0 / std::sqrt(var + eps);
            (*rstd)[static_cast<std::size_t>(n) * groups + gi] = r;
            for (int cc = 0; cc < cpg; ++cc) {
                const int ch = gi * cpg + cc;
                const double ga = gamma.value().data[ch], be = beta.value().data[ch];
                for (std::size_t i = 0; i < hw; ++i) {
                    const std::size_t idx = off + cc * hw + i;
                    const double xh = (xv[idx] - m) * r;
                    (*xhat)[idx] = xh;
                    out.data[idx] = xh * ga + be;
                }
            }
        }

    return ad::make_result(std::move(out), {x, gamma, beta},
                           [xhat, rstd, n_batch, c, hw, groups, cpg, group_size](Node& node) {
        Node& px = *node.parents[0];
        Node& pg = *node.parents[1];
        Node& pb = *node.parents[2];
        const auto& gy = node.grad.data;
        if (pg.requires_grad || pb.requires_grad) {
            Tensor& gg = pg.grad_buffer();
            Tensor& gb = pb.grad_buffer();
            for (int n = 0; n < n_batch; ++n)
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * hw;
                    double sg = 0.0, sb = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sg += gy[off + i] * (*xhat)[off + i];
                        sb += gy[off + i];
                    }
                    gg.data[ch] += sg;
                    gb.data[ch] += sb;
                }
        }
        if (!px.requires_grad) return;
        Tensor& gx = px.grad_buffer();
        std::vector<double> dxh(group_size);
        for (int n = 0; n < n_batch; ++n)
            for (int gi = 0; gi < groups; ++gi) {
                const std::size_t off = (static_cast<std::size_t>(n) * c + gi * cpg) * hw;
                double m1 = 0.0, m2 = 0.0;
                for (int cc = 0; cc < cpg; ++cc) {
                    const double ga = pg.value.data[gi * cpg + cc];
                    for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t k = cc * hw + i;
                        dxh[k] = gy[off + k] * ga;
                        m1 += dxh[k];
                        m2 += dxh[k] * (*xhat)[off + k];
                    }
                }
                m1 /= static_cast<double>(group_size);
                m2 /= static_cast<double>(group_size);
                const double r = (*rstd)[static_cast<std::size_t>(n) * groups + gi];
                for (std::size_t k = 0; k < group_size; ++k)
                    gx.data[off + k] += r * (dxh[k] - m1 - (*xhat)[off + k] * m2);
            }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_rank(x, 2, "layer_norm");
    const int rows = x.shape()[0], d = x.shape()[1];
    if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d))
        throw ShapeError("layer_norm: affine parameter size");
    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    const auto& xv = x.value().data;
    for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * d;
        double m = 0.0;
        for (int i = 0; i < d; ++i) m += xv[off + i];
        m /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) var += (xv[off + i] - m) * (xv[off + i] - m);
        var /= d;
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (int i = 0; i < d; ++i) {
            const double xh = (xv[off + i] - m) * rs;
            (*xhat)[off + i] = xh;
            out.data[off + i] = xh * gamma.value().data[i] + beta.value().data[i];
        }
    }
    return ad::make_result(std::move(out), {x, gamma, beta}, [xhat, rstd, rows, d](Node& node) {
        Node& px = *node.parents[0];
        Node& pg = *node.parents[1];
        Node& pb = *node.parents[2];
        const auto& gy = node.grad.data;
        if (pg.requires_grad || pb.requires_grad) {
            Tensor& gg = pg.grad_buffer();
            Tensor& gb = pb.grad_buffer();
            for (int r = 0; r < rows; ++r)
                for (int i = 0; i < d; ++i) {
                    const std::size_t k = static_cast<std::size_t>(r) * d + i;
                    gg.data[i] += gy[k] * (*xhat)[k];
                    gb.data[i] += gy[k];
                }
        }
        if (!px.requires_grad) return;
        Tensor& gx = px.grad_buffer();
        std::vector<double> dxh(d);
        for (int r = 0; r < rows; ++r) {
            const std::size_t off = static_cast<std::size_t>(r) * d;
            double m1 = 0.0, m2 = 0.0;
            for (int i = 0; i < d; ++i) {
                dxh[i] = gy[off + i] * pg.value.data[i];
                m1 += dxh[i];
                m2 += dxh[i] * (*xhat)[off + i];
            }
            m1 /= d;
            m2 /= d;
            for (int i = 0; i < d; ++i) gx.data[off + i] += (*rstd)[r] * (dxh[i] - m1 - (*xhat)[off + i] * m2);
        }
    });
}

// ---------------------------------------------------------------------------
// Layout helpers

Var upsample_nearest(const Var& x, int factor) {
    require_rank(x, 4, "upsample_nearest");
    const auto& s = x.shape();
    const int nc = s[0] * s[1], h = s[2], w = s[3];
    const int oh = h * factor, ow = w * factor;
    Tensor out({s[0], s[1], oh, ow});
    const auto& xv = x.value().data;
    for (int p = 0; p < nc; ++p)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                out.data[(static_cast<std::size_t>(p) * oh + y) * ow + xx] =
                    xv[(static_cast<std::size_t>(p) * h + y / factor) * w + xx / factor];
    return ad::make_result(std::move(out), {x}, [nc, h, w, oh, ow, factor](Node& node) {
        Node& px = *node.parents[0];
        if (!px.requires_grad) return;
        Tensor& gx = px.grad_buffer();
        for (int p = 0; p < nc; ++p)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx)
                    gx.data[(static_cast<std::size_t>(p) * h + y / factor) * w + xx / factor] +=
                        node.grad.data[(static_cast<std::size_t>(p) * oh + y) * ow + xx];
    });
}

Var channel_scale(const Var& x, std::span<const double> w) {
    require_rank(x, 4, "channel_scale");
    const auto& s = x.shape();
    if (w.size() != static_cast<std::size_t>(s[1])) throw ShapeError("channel_scale: weight count");
    const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
    std::vector<double> wv(w.begin(), w.end());
    Tensor out = x.value();
    for (int n = 0; n < s[0]; ++n)
        for (int c = 0; c < s[1]; ++c)
            for (std::size_t i = 0; i < hw; ++i) out.data[(static_cast<std::size_t>(n) * s[1] + c) * hw + i] *= wv[c];
    return ad::make_result(std::move(out), {x}, [wv, hw](Node& node) {
        Node& px = *node.parents[0];
        if (!px.requires_grad) return;
        Tensor& gx = px.grad_buffer();
        const std::size_t c = wv.size();
        for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += node.grad.data[i] * wv[(i / hw) % c];
    });
}

Var nchw_to_rows(const Var& x) {
    require_rank(x, 4, "nchw_to_rows");
    const auto& s = x.shape();
    const int n_batch = s[0], c = s[1];
    const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
    Tensor out({static_cast<int>(n_batch * hw), c});
    for (int n = 0; n < n_batch; ++n)
        for (int ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i)
                out.data[(n * hw + i) * c + ch] = x.value().data[(static_cast<std::size_t>(n) * c + ch) * hw + i];
    return ad::make_result(std::move(out), {x}, [n_batch, c, hw](Node& node) {
        Node& px = *node.parents[0];
        if (!px.requires_grad) return;
        Tensor& gx = px.grad_buffer();
        for (int n = 0; n < n_batch; ++n)
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < hw; ++i)
                    gx.data[(static_cast<std::size_t>(n) * c + ch) * hw + i] += node.grad.data[(n * hw + i) * c + ch];
    });
}

Var rows_to_nchw(const Var& rows, int n_batch, int c, int h, int w) {
    require_rank(rows, 2, "rows_to_nchw");
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    if (rows.shape()[0] != static_cast<int>(n_batch * hw) || rows.shape()[1] != c)
        throw ShapeError("rows_to_nchw: " + shape_string(rows.shape()) + " incompatible with target");
    Tensor out({n_batch, c, h, w});
    for (int n = 0; n < n_batch; ++n)
        for (int ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i)
                out.data[(static_cast<std::size_t>(n) * c + ch) * hw + i] = rows.value().data[(n * hw + i) * c + ch];
    return ad::make_result(std::move(out), {rows}, [n_batch, c, hw](Node& node) {
        Node& pr = *node.parents[0];
        if (!pr.requires_grad) return;
        Tensor& gr = pr.grad_buffer();
        for (int n = 0; n < n_batch; ++n)
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < hw; ++i)
                    gr.data[(n * hw + i) * c + ch] += node.grad.data[(static_cast<std::size_t>(n) * c + ch) * hw + i];
    });
}

Var select_image(const Var& x, int n) {
    require_rank(x, 4, "select_image");
    const auto& s = x.shape();
    if (n < 0 || n >= s[0]) throw ShapeError("select_image: index out of range");
    const std::size_t sz = static_cast<std::size_t>(s[1]) * s[2] * s[3];
    Tensor out({1, s[1], s[2], s[3]});
    std::copy_n(x.value().data.begin() + static_cast<std::ptrdiff_t>(n * sz), sz, out.data.begin());
    return ad::make_result(std::move(out), {x}, [n, sz](Node& node) {
        Node& px = *node.parents[0];
        if (!px.requires_grad) return;
        double* g = px.grad_buffer().data.data() + n * sz;
        for (std::size_t i = 0; i < sz; ++i) g[i] += node.grad.data[i];
    });
}

Var stack_images(std::span<const Var> images) {
    if (images.empty()) throw ShapeError("stack_images: empty list");
    const Shape s0 = images[0].shape();
    if (s0.size() != 4 || s0[0] != 1) throw ShapeError("stack_images expects [1,C,H,W] inputs");
    const std::size_t sz = images[0].numel();
    Tensor out({static_cast<int>(images.size()), s0[1], s0[2], s0[3]});
    std::vector<Var> parents;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].shape() != s0) throw ShapeError("stack_images: shape mismatch");
        std::copy(images[i].value().data.begin(), images[i].value().data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(i * sz));
        parents.push_back(images[i]);
    }
    return ad::make_result(std::move(out), std::move(parents), [sz](Node& node) {
        for (std::size_t i = 0; i < node.parents.size(); ++i) {
            Node& p = *node.parents[i];
            if (!p.requires_grad) continue;
            Tensor& g = p.grad_buffer();
            for (std::size_t k = 0; k < sz; ++k) g.data[k] += node.grad.data[i * sz + k];
        }
    });
}

// ---------------------------------------------------------------------------
// Resampling

Var bilinear_sample(const Var& image, std::span<const double> points, int out_h, int out_w, Padding padding) {
    require_rank(image, 4, "bilinear_sample");
    const auto& s = image.shape();
    if (s[0] != 1) throw ShapeError("bilinear_sample expects a single image");
    const int c = s[1], h = s[2], w = s[3];
    const std::size_t count = static_cast<std::size_t>(out_h) * out_w;
    if (points.size() != 2 * count) throw ShapeError("bilinear_sample: point count does not match output size");

    // Four taps per output point; index -1 marks a zero-padded tap.
    struct Tap {
        std::array<int, 4> idx;
        std::array<double, 4> wt;
    };
    auto taps = std::make_shared<std::vector<Tap>>(count);
    for (std::size_t k = 0; k < count; ++k) {
        double u = points[2 * k] - 0.5;
        double v = points[2 * k + 1] - 0.5;
        if (padding == Padding::Clamp) {
            u = std::clamp(u, 0.0, static_cast<double>(w - 1));
            v = std::clamp(v, 0.0, static_cast<double>(h - 1));
        }
        const double fu = std::floor(u), fv = std::floor(v);
        const int x0 = static_cast<int>(fu), y0 = static_cast<int>(fv);
        const double ax = u - fu, ay = v - fv;
        Tap& t = (*taps)[k];
        const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
        const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        for (int q = 0; q < 4; ++q) {
            int xx = xs[q], yy = ys[q];
            if (padding == Padding::Clamp) {
                xx = std::min(xx, w - 1);
                yy = std::min(yy, h - 1);
            }
            const bool inside = xx >= 0 && xx < w && yy >= 0 && yy < h;
            t.idx[q] = inside ? yy * w + xx : -1;
            t.wt[q] = inside ? ws[q] : 0.0;
        }
    }

    Tensor out({1, c, out_h, out_w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const auto& iv = image.value().data;
    for (int ch = 0; ch < c; ++ch) {
        const double* src = iv.data() + ch * plane;
        double* dst = out.data.data() + ch * count;
        for (std::size_t k = 0; k < count; ++k) {
            const Tap& t = (*taps)[k];
            double acc = 0.0;
            for (int q = 0; q < 4; ++q)
                if (t.idx[q] >= 0) acc += t.wt[q] * src[t.idx[q]];
            dst[k] = acc;
        }
    }
    return ad::make_result(std::move(out), {image}, [taps, c, plane, count](Node& node) {
        Node& pi = *node.parents[0];
        if (!pi.requires_grad) return;
        Tensor& g = pi.grad_buffer();
        for (int ch = 0; ch < c; ++ch) {
            double* dst = g.data.data() + ch * plane;
            const double* go = node.grad.data.data() + ch * count;
            for (std::size_t k = 0; k < count; ++k) {
                const Tap& t = (*taps)[k];
                for (int q = 0; q < 4; ++q)
                    if (t.idx[q] >= 0) dst[t.idx[q]] += t.wt[q] * go[k];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Sequence ops

Var linear(const Var& x, const Var& weight, const Var& bias) {
    require_rank(x, 2, "linear input");
    require_rank(weight, 2, "linear weight");
    const int m = x.shape()[0], in = x.shape()[1], out_dim = weight.shape()[0];
    if (weight.shape()[1] != in)
        throw ShapeError("linear: input width " + std::to_string(in) + " vs weight " + shape_string(weight.shape()));
    Tensor out({m, out_dim});
    store(out.data.data(), owned(x.value().data.data(), m, in) * owned(weight.value().data.data(), out_dim, in).transpose());
    if (bias.defined()) {
        if (bias.numel() != static_cast<std::size_t>(out_dim)) throw ShapeError("linear: bias size");
        for (int r = 0; r < m; ++r)
            for (int o = 0; o < out_dim; ++o) out.data[static_cast<std::size_t>(r) * out_dim + o] += bias.value().data[o];
    }
    std::vector<Var> parents{x, weight};
    if (bias.defined()) parents.push_back(bias);
    return ad::make_result(std::move(out), std::move(parents), [m, in, out_dim](Node& node) {
        Node& px = *node.parents[0];
        Node& pw = *node.parents[1];
        const RowMat gy = owned(node.grad.data.data(), m, out_dim);
        if (px.requires_grad) add_into(px.grad_buffer().data.data(), gy * owned(pw.value.data.data(), out_dim, in));
        if (pw.requires_grad)
            add_into(pw.grad_buffer().data.data(), gy.transpose() * owned(px.value.data.data(), m, in));
        if (node.parents.size() > 2 && node.parents[2]->requires_grad) {
            Tensor& gb = node.parents[2]->grad_buffer();
            for (int r = 0; r < m; ++r)
                for (int o = 0; o < out_dim; ++o) gb.data[o] += node.grad.data[static_cast<std::size_t>(r) * out_dim + o];
        }
    });
}

Var embedding(const Var& table, std::span<const int> ids) {
    require_rank(table, 2, "embedding");
    const int vocab = table.shape()[0], d = table.shape()[1];
    std::vector<int> idv(ids.begin(), ids.end());
    Tensor out({static_cast<int>(idv.size()), d});
    for (std::size_t t = 0; t < idv.size(); ++t) {
        if (idv[t] < 0 || idv[t] >= vocab)
            throw ValueError("embedding: id " + std::to_string(idv[t]) + " outside vocabulary of " + std::to_string(vocab));
        std::copy_n(table.value().data.begin() + static_cast<std::ptrdiff_t>(idv[t]) * d, d,
                    out.data.begin() + static_cast<std::ptrdiff_t>(t) * d);
    }
    return ad::make_result(std::move(out), {table}, [idv, d](Node& node) {
        Node& pt = *node.parents[0];
        if (!pt.requires_grad) return;
        Tensor& g = pt.grad_buffer();
        for (std::size_t t = 0; t < idv.size(); ++t)
            for (int i = 0; i < d; ++i) g.data[static_cast<std::size_t>(idv[t]) * d + i] += node.grad.data[t * d + i];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty list");
    const int d = parts[0].shape().at(1);
    int rows = 0;
    std::vector<Var> parents;
    std::vector<int> offsets;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (p.shape()[1] != d) throw ShapeError("concat_rows: width mismatch");
        offsets.push_back(rows);
        rows += p.shape()[0];
        parents.push_back(p);
    }
    Tensor out({rows, d});
    for (std::size_t i = 0; i < parts.size(); ++i)
        std::copy(parts[i].value().data.begin(), parts[i].value().data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(offsets[i]) * d);
    return ad::make_result(std::move(out), std::move(parents), [offsets, d](Node& node) {
        for (std::size_t i = 0; i < node.parents.size(); ++i) {
            Node& p = *node.parents[i];
            if (!p.requires_grad) continue;
            Tensor& g = p.grad_buffer();
            const double* src = node.grad.data.data() + static_cast<std::size_t>(offsets[i]) * d;
            for (std::size_t k = 0; k < g.numel(); ++k) g.data[k] += src[k];
        }
    });
}

Var slice_rows(const Var& x, int begin, int end) {
    require_rank(x, 2, "slice_rows");
    const int rows = x.shape()[0], d = x.shape()[1];
    if (begin < 0 || end > rows || begin > end) throw ShapeError("slice_rows: range out of bounds");
    Tensor out({end - begin, d});
    std::copy_n(x.value().data.begin() + static_cast<std::ptrdiff_t>(begin) * d, static_cast<std::size_t>(end - begin) * d,
                out.data.begin());
    return ad::make_result(std::move(out), {x}, [begin, d](Node& node) {
        Node& px = *node.parents[0];
        if (!px.requires_grad) return;
        double* g = px.grad_buffer().data.data() + static_cast<std::size_t>(begin) * d;
        for (std::size_t k = 0; k < node.grad.numel(); ++k) g[k] += node.grad.data[k];
    });
}

Var causal_attention(const Var& qkv, int heads) {
    require_rank(qkv, 2, "causal_attention");
    const int t_len = qkv.shape()[0];
    const int d = qkv.shape()[1] / 3;
    if (qkv.shape()[1] != 3 * d || heads <= 0 || d % heads != 0) throw ShapeError("causal_attention: bad qkv width");
    const int hd = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto& in = qkv.value().data;
    const int stride = 3 * d;

    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(heads) * t_len * t_len, 0.0);
    Tensor out({t_len, d});
    std::vector<double> row(t_len);
    for (int h = 0; h < heads; ++h) {
        double* P = probs->data() + static_cast<std::size_t>(h) * t_len * t_len;
        for (int i = 0; i < t_len; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j <= i; ++j) {
                double s = 0.0;
                for (int e = 0; e < hd; ++e) s += in[i * stride + h * hd + e] * in[j * stride + d + h * hd + e];
                row[j] = s * inv;
                mx = std::max(mx, row[j]);
            }
            double z = 0.0;
            for (int j = 0; j <= i; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += row[j];
            }
            for (int j = 0; j <= i; ++j) P[i * t_len + j] = row[j] / z;
            for (int e = 0; e < hd; ++e) {
                double acc = 0.0;
                for (int j = 0; j <= i; ++j) acc += P[i * t_len + j] * in[j * stride + 2 * d + h * hd + e];
                out.data[static_cast<std::size_t>(i) * d + h * hd + e] = acc;
            }
        }
    }
    return ad::make_result(std::move(out), {qkv}, [probs, t_len, d, hd, heads, inv, stride](Node& node) {
        Node& pq = *node.parents[0];
        if (!pq.requires_grad) return;
        const auto& in = pq.value.data;
        Tensor& g = pq.grad_buffer();
        const auto& go = node.grad.data;
        std::vector<double> dp(t_len);
        for (int h = 0; h < heads; ++h) {
            const double* P = probs->data() + static_cast<std::size_t>(h) * t_len * t_len;
            for (int i = 0; i < t_len; ++i) {
                // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (int e = 0; e < hd; ++e) {
                        const double goe = go[static_cast<std::size_t>(i) * d + h * hd + e];
                        s += goe * in[j * stride + 2 * d + h * hd + e];
                        g.data[j * stride + 2 * d + h * hd + e] += P[i * t_len + j] * goe;
                    }
                    dp[j] = s;
                    dot += s * P[i * t_len + j];
                }
                for (int j = 0; j <= i; ++j) {
                    const double ds = P[i * t_len + j] * (dp[j] - dot) * inv;
                    if (ds == 0.0) continue;
                    for (int e = 0; e < hd; ++e) {
                        g.data[i * stride + h * hd + e] += ds * in[j * stride + d + h * hd + e];
                        g.data[j * stride + d + h * hd + e] += ds * in[i * stride + h * hd + e];
                    }
                }
            }
        }
    });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
    require_rank(logits, 2, "cross_entropy");
    const int t_len = logits.shape()[0], vocab = logits.shape()[1];
    if (targets.size() != static_cast<std::size_t>(t_len)) throw ShapeError("cross_entropy: target count");
    std::vector<int> tg(targets.begin(), targets.end());
    auto soft = std::make_shared<std::vector<double>>(logits.numel());
    double total = 0.0;
    const auto& lv = logits.value().data;
    for (int t = 0; t < t_len; ++t) {
        if (tg[t] < 0 || tg[t] >= vocab) throw ValueError("cross_entropy: target outside vocabulary");
        const double* l = lv.data() + static_cast<std::size_t>(t) * vocab;
        const double mx = *std::max_element(l, l + vocab);
        double z = 0.0;
        for (int v = 0; v < vocab; ++v) z += std::exp(l[v] - mx);
        const double lse = mx + std::log(z);
        total += lse - l[tg[t]];
        for (int v = 0; v < vocab; ++v) (*soft)[static_cast<std::size_t>(t) * vocab + v] = std::exp(l[v] - lse);
    }
    return ad::make_result(Tensor({1}, total / t_len), {logits}, [soft, tg, t_len, vocab](Node& node) {
        Node& pl = *node.parents[0];
        if (!pl.requires_grad) return;
        Tensor& g = pl.grad_buffer();
        const double s = node.grad.data[0] / t_len;
        for (int t = 0; t < t_len; ++t)
            for (int v = 0; v < vocab; ++v) {
                const std::size_t k = static_cast<std::size_t>(t) * vocab + v;
                g.data[k] += s * ((*soft)[k] - (v == tg[t] ? 1.0 : 0.0));
            }
    });
}

} // namespace regiontok::ops
