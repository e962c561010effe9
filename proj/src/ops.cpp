#include "vfi/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace vfi {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Gradient buffer of parent i, or nullptr when that parent is not tracked.
double* parent_grad(detail::Node& self, std::size_t i)
{
    detail::Node& p = *self.parents[i];
    return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

const std::vector<double>& parent_value(const detail::Node& self, std::size_t i)
{
    return self.parents[i]->value;
}

void require_rank(const Tensor& t, std::size_t rank, const char* what)
{
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what)
{
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

struct Geometry {
    int n, c, h, w;
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
};

Geometry geometry(const Tensor& t, const char* what)
{
    require_rank(t, 4, what);
    const Shape& s = t.shape();
    return {s[0], s[1], s[2], s[3]};
}

// Output columns [lo, hi) read input columns inside the image for kernel tap kx.
std::pair<int, int> valid_columns(int kx, int stride, int pad, int width, int out_w)
{
    int lo = 0;
    while (lo < out_w && lo * stride - pad + kx < 0) ++lo;
    int hi = out_w;
    while (hi > lo && (hi - 1) * stride - pad + kx >= width) --hi;
    return {lo, hi};
}

void im2col(const double* image, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* cols)
{
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < channels; ++c) {
        const double* src = image + static_cast<std::size_t>(c) * height * width;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* dst = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * out_plane;
                const auto [lo, hi] = valid_columns(kx, stride, pad, width, out_w);
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    double* row = dst + static_cast<std::size_t>(oy) * out_w;
                    if (iy < 0 || iy >= height) {
                        std::fill(row, row + out_w, 0.0);
                        continue;
                    }
                    std::fill(row, row + lo, 0.0);
                    std::fill(row + hi, row + out_w, 0.0);
                    const double* srow = src + static_cast<std::size_t>(iy) * width;
                    const int shift = kx - pad;
                    if (stride == 1) {
                        std::copy(srow + lo + shift, srow + hi + shift, row + lo);
                    } else {
                        for (int ox = lo; ox < hi; ++ox) row[ox] = srow[ox * stride + shift];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, int channels, int height, int width, int k, int stride, int pad,
                int out_h, int out_w, double* image)
{
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < channels; ++c) {
        double* dst = image + static_cast<std::size_t>(c) * height * width;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* src = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * out_plane;
                const auto [lo, hi] = valid_columns(kx, stride, pad, width, out_w);
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= height) continue;
                    const double* row = src + static_cast<std::size_t>(oy) * out_w;
                    double* drow = dst + static_cast<std::size_t>(iy) * width;
                    const int shift = kx - pad;
                    if (stride == 1) {
                        for (int ox = lo; ox < hi; ++ox) drow[ox + shift] += row[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) drow[ox * stride + shift] += row[ox];
                    }
                }
            }
        }
    }
}

// Two-tap interpolation weights for one output coordinate of a x2 upsample.
struct Taps {
    int i0, i1;
    double w0, w1;
};

Taps up_taps(int out_index, int in_size)
{
    const int k = out_index / 2;
    const int neighbour = (out_index % 2 == 0) ? std::max(k - 1, 0) : std::min(k + 1, in_size - 1);
    return {k, neighbour, 0.75, 0.25};
}

int reflect_index(int i, int n)
{
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

}  // namespace

const char* activation_name(Activation kind)
{
    switch (kind) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
    }
    return "?";
}

Activation parse_activation(const std::string& name)
{
    for (Activation a : {Activation::relu, Activation::leaky_relu, Activation::tanh, Activation::sigmoid,
                         Activation::identity})
        if (name == activation_name(a)) return a;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding)
{
    const Geometry in = geometry(input, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    const int co = kernel.dim(0);
    const int k = kernel.dim(2);
    if (kernel.dim(1) != in.c)
        throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)));
    if (kernel.dim(3) != k) throw ShapeError("conv2d: kernel must be square");
    if (bias.shape() != Shape{co}) throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
    if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
    const int out_h = (in.h + 2 * padding - k) / stride + 1;
    const int out_w = (in.w + 2 * padding - k) / stride + 1;
    if (out_h <= 0 || out_w <= 0) throw ShapeError("conv2d: kernel larger than padded input");

    const int patch = in.c * k * k;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    std::vector<double> out(static_cast<std::size_t>(in.n) * co * out_plane);
    std::vector<double> cols(static_cast<std::size_t>(patch) * out_plane);
    const ConstMatMap wmat(kernel.values().data(), co, patch);
    const auto& bvals = bias.values();
    for (int n = 0; n < in.n; ++n) {
        im2col(input.values().data() + n * in.c * in.plane(), in.c, in.h, in.w, k, stride, padding, out_h,
               out_w, cols.data());
        MatMap y(out.data() + n * co * out_plane, co, static_cast<Eigen::Index>(out_plane));
        y.noalias() = wmat * ConstMatMap(cols.data(), patch, static_cast<Eigen::Index>(out_plane));
        for (int o = 0; o < co; ++o) y.row(o).array() += bvals[o];
    }

    auto adjoint = [in, co, k, stride, padding, out_h, out_w, patch](detail::Node& self) {
        const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
        const auto& x = parent_value(self, 0);
        const auto& wv = parent_value(self, 1);
        double* gx = parent_grad(self, 0);
        double* gw = parent_grad(self, 1);
        double* gb = parent_grad(self, 2);
        std::vector<double> cols(static_cast<std::size_t>(patch) * out_plane);
        const ConstMatMap wmat(wv.data(), co, patch);
        for (int n = 0; n < in.n; ++n) {
            const ConstMatMap gy(self.grad.data() + n * co * out_plane, co, static_cast<Eigen::Index>(out_plane));
            if (gb) {
                const double* row = gy.data();
                for (int o = 0; o < co; ++o, row += out_plane) gb[o] += std::accumulate(row, row + out_plane, 0.0);
            }
            if (gw) {
                im2col(x.data() + n * in.c * in.plane(), in.c, in.h, in.w, k, stride, padding, out_h, out_w,
                       cols.data());
                MatMap(gw, co, patch).noalias() +=
                    gy * ConstMatMap(cols.data(), patch, static_cast<Eigen::Index>(out_plane)).transpose();
            }
            if (gx) {
                MatMap(cols.data(), patch, static_cast<Eigen::Index>(out_plane)).noalias() = wmat.transpose() * gy;
                col2im_add(cols.data(), in.c, in.h, in.w, k, stride, padding, out_h, out_w,
                           gx + n * in.c * in.plane());
            }
        }
    };
    return Tensor::make_result({in.n, co, out_h, out_w}, std::move(out), {input, kernel, bias}, adjoint,
                               "conv2d");
}

Tensor activation(const Tensor& input, Activation kind, double slope)
{
    const auto& x = input.values();
    std::vector<double> out(x.size());
    switch (kind) {
    case Activation::relu:
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
        break;
    case Activation::leaky_relu:
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
        break;
    case Activation::tanh: {
        // Saturated values are pulled one ulp inside the open interval.
        const double hi = std::nextafter(1.0, 0.0);
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(std::tanh(x[i]), -hi, hi);
        break;
    }
    case Activation::sigmoid: {
        const double lo = std::numeric_limits<double>::min(), hi = std::nextafter(1.0, 0.0);
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(1.0 / (1.0 + std::exp(-x[i])), lo, hi);
        break;
    }
    case Activation::identity: out.assign(x.begin(), x.end()); break;
    }
    auto adjoint = [kind, slope](detail::Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        const auto& x = parent_value(self, 0);
        const auto& y = self.value;
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double d = 1.0;
            switch (kind) {
            case Activation::relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
            case Activation::leaky_relu: d = x[i] > 0.0 ? 1.0 : slope; break;
            case Activation::tanh: d = 1.0 - y[i] * y[i]; break;
            case Activation::sigmoid: d = y[i] * (1.0 - y[i]); break;
            case Activation::identity: break;
            }
            gx[i] += d * g[i];
        }
    };
    return Tensor::make_result(input.shape(), std::move(out), {input}, adjoint, activation_name(kind));
}

Tensor bilinear_resize(const Tensor& input, ResizeDirection direction)
{
    const Geometry g = geometry(input, "bilinear_resize");
    const auto& x = input.values();
    if (direction == ResizeDirection::down2) {
        if (g.h % 2 != 0 || g.w % 2 != 0)
            throw ShapeError("down x2 requires even dimensions, got " + shape_str(input.shape()));
        const int oh = g.h / 2, ow = g.w / 2;
        std::vector<double> out(static_cast<std::size_t>(g.n) * g.c * oh * ow);
        for (std::size_t p = 0; p < static_cast<std::size_t>(g.n) * g.c; ++p) {
            const double* src = x.data() + p * g.plane();
            double* dst = out.data() + p * oh * ow;
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    const double* r0 = src + static_cast<std::size_t>(2 * y) * g.w + 2 * xx;
                    const double* r1 = r0 + g.w;
                    dst[y * ow + xx] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
                }
        }
        auto adjoint = [g, oh, ow](detail::Node& self) {
            double* gx = parent_grad(self, 0);
            if (!gx) return;
            for (std::size_t p = 0; p < static_cast<std::size_t>(g.n) * g.c; ++p) {
                const double* gy = self.grad.data() + p * oh * ow;
                double* dst = gx + p * g.plane();
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx) {
                        const double v = 0.25 * gy[y * ow + xx];
                        double* r0 = dst + static_cast<std::size_t>(2 * y) * g.w + 2 * xx;
                        r0[0] += v;
                        r0[1] += v;
                        r0[g.w] += v;
                        r0[g.w + 1] += v;
                    }
            }
        };
        return Tensor::make_result({g.n, g.c, oh, ow}, std::move(out), {input}, adjoint, "down2");
    }

    const int oh = g.h * 2, ow = g.w * 2;
    std::vector<Taps> ty(oh), tx(ow);
    for (int y = 0; y < oh; ++y) ty[y] = up_taps(y, g.h);
    for (int xx = 0; xx < ow; ++xx) tx[xx] = up_taps(xx, g.w);
    std::vector<double> out(static_cast<std::size_t>(g.n) * g.c * oh * ow);
    for (std::size_t p = 0; p < static_cast<std::size_t>(g.n) * g.c; ++p) {
        const double* src = x.data() + p * g.plane();
        double* dst = out.data() + p * oh * ow;
        for (int y = 0; y < oh; ++y) {
            const double* ra = src + static_cast<std::size_t>(ty[y].i0) * g.w;
            const double* rb = src + static_cast<std::size_t>(ty[y].i1) * g.w;
            for (int xx = 0; xx < ow; ++xx) {
                const Taps& t = tx[xx];
                const double a = t.w0 * ra[t.i0] + t.w1 * ra[t.i1];
                const double b = t.w0 * rb[t.i0] + t.w1 * rb[t.i1];
                dst[y * ow + xx] = ty[y].w0 * a + ty[y].w1 * b;
            }
        }
    }
    auto adjoint = [g, oh, ow, ty, tx](detail::Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        for (std::size_t p = 0; p < static_cast<std::size_t>(g.n) * g.c; ++p) {
            const double* gy = self.grad.data() + p * oh * ow;
            double* dst = gx + p * g.plane();
            for (int y = 0; y < oh; ++y) {
                double* ra = dst + static_cast<std::size_t>(ty[y].i0) * g.w;
                double* rb = dst + static_cast<std::size_t>(ty[y].i1) * g.w;
                for (int xx = 0; xx < ow; ++xx) {
                    const Taps& t = tx[xx];
                    const double v = gy[y * ow + xx];
                    const double va = ty[y].w0 * v, vb = ty[y].w1 * v;
                    ra[t.i0] += t.w0 * va;
                    ra[t.i1] += t.w1 * va;
                    rb[t.i0] += t.w0 * vb;
                    rb[t.i1] += t.w1 * vb;
                }
            }
        }
    };
    return Tensor::make_result({g.n, g.c, oh, ow}, std::move(out), {input}, adjoint, "up2");
}

Tensor upsample2(const Tensor& input) { return bilinear_resize(input, ResizeDirection::up2); }
Tensor downsample2(const Tensor& input) { return bilinear_resize(input, ResizeDirection::down2); }

Tensor upsample_times(const Tensor& input, int times)
{
    Tensor t = input;
    for (int i = 0; i < times; ++i) t = upsample2(t);
    return t;
}

Tensor downsample_times(const Tensor& input, int times)
{
    Tensor t = input;
    for (int i = 0; i < times; ++i) t = downsample2(t);
    return t;
}

Tensor batch_norm(const Tensor& input, const Tensor& scale_t, const Tensor& shift_t, RunningStats& stats,
                  BatchNormMode mode, double momentum, double eps)
{
    const Geometry g = geometry(input, "batch_norm");
    if (scale_t.shape() != Shape{g.c} || shift_t.shape() != Shape{g.c})
        throw ShapeError("batch_norm: scale/shift must be [" + std::to_string(g.c) + "]");
    if (stats.mean.size() != static_cast<std::size_t>(g.c) || stats.var.size() != stats.mean.size())
        throw ShapeError("batch_norm: running statistics have wrong channel count");
    const std::size_t m = static_cast<std::size_t>(g.n) * g.plane();
    if (mode == BatchNormMode::train && m < 2)
        throw ContractError("batch_norm: degenerate variance, a single element per channel in train mode");

    const auto& x = input.values();
    const auto& gamma = scale_t.values();
    const auto& beta = shift_t.values();
    std::vector<double> mean(g.c), inv_std(g.c);
    for (int c = 0; c < g.c; ++c) {
        if (mode == BatchNormMode::train) {
            double s = 0.0;
            for (int n = 0; n < g.n; ++n) {
                const double* p = x.data() + (static_cast<std::size_t>(n) * g.c + c) * g.plane();
                for (std::size_t i = 0; i < g.plane(); ++i) s += p[i];
            }
            const double mu = s / static_cast<double>(m);
            double v = 0.0;
            for (int n = 0; n < g.n; ++n) {
                const double* p = x.data() + (static_cast<std::size_t>(n) * g.c + c) * g.plane();
                for (std::size_t i = 0; i < g.plane(); ++i) v += (p[i] - mu) * (p[i] - mu);
            }
            const double var = v / static_cast<double>(m);
            mean[c] = mu;
            inv_std[c] = 1.0 / std::sqrt(var + eps);
            stats.mean[c] = momentum * stats.mean[c] + (1.0 - momentum) * mu;
            stats.var[c] = momentum * stats.var[c] + (1.0 - momentum) * v / static_cast<double>(m - 1);
        } else {
            mean[c] = stats.mean[c];
            inv_std[c] = 1.0 / std::sqrt(stats.var[c] + eps);
        }
    }

    std::vector<double> out(x.size());
    for (int n = 0; n < g.n; ++n)
        for (int c = 0; c < g.c; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * g.c + c) * g.plane();
            for (std::size_t i = 0; i < g.plane(); ++i)
                out[off + i] = gamma[c] * (x[off + i] - mean[c]) * inv_std[c] + beta[c];
        }

    const bool batch_stats = mode == BatchNormMode::train;
    auto adjoint = [g, m, mean, inv_std, batch_stats](detail::Node& self) {
        const auto& x = parent_value(self, 0);
        const auto& gamma = parent_value(self, 1);
        double* gx = parent_grad(self, 0);
        double* gg = parent_grad(self, 1);
        double* gbeta = parent_grad(self, 2);
        const auto& gy = self.grad;
        for (int c = 0; c < g.c; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < g.n; ++n) {
                const std::size_t off = (static_cast<std::size_t>(n) * g.c + c) * g.plane();
                for (std::size_t i = 0; i < g.plane(); ++i) {
                    const double xhat = (x[off + i] - mean[c]) * inv_std[c];
                    sum_dy += gy[off + i];
                    sum_dy_xhat += gy[off + i] * xhat;
                }
            }
            if (gg) gg[c] += sum_dy_xhat;
            if (gbeta) gbeta[c] += sum_dy;
            if (!gx) continue;
            const double md = static_cast<double>(m);
            for (int n = 0; n < g.n; ++n) {
                const std::size_t off = (static_cast<std::size_t>(n) * g.c + c) * g.plane();
                for (std::size_t i = 0; i < g.plane(); ++i) {
                    if (batch_stats) {
                        const double xhat = (x[off + i] - mean[c]) * inv_std[c];
                        gx[off + i] += gamma[c] * inv_std[c] / md *
                                       (md * gy[off + i] - sum_dy - xhat * sum_dy_xhat);
                    } else {
                        gx[off + i] += gamma[c] * inv_std[c] * gy[off + i];
                    }
                }
            }
        }
    };
    return Tensor::make_result(input.shape(), std::move(out), {input, scale_t, shift_t}, adjoint, "batch_norm");
}

Tensor mean_abs_error(const Tensor& a, const Tensor& b)
{
    require_same_shape(a, b, "mean_abs_error");
    const auto& av = a.values();
    const auto& bv = b.values();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
    const double n = static_cast<double>(av.size());
    auto adjoint = [n](detail::Node& self) {
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        double* ga = parent_grad(self, 0);
        double* gb = parent_grad(self, 1);
        const double g = self.grad[0] / n;
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double d = av[i] - bv[i];
            const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            if (ga) ga[i] += sgn * g;
            if (gb) gb[i] -= sgn * g;
        }
    };
    return Tensor::make_result({1}, {s / n}, {a, b}, adjoint, "mean_abs_error");
}

Tensor mean_squared_error(const Tensor& a, const Tensor& b)
{
    require_same_shape(a, b, "mean_squared_error");
    const auto& av = a.values();
    const auto& bv = b.values();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double n = static_cast<double>(av.size());
    auto adjoint = [n](detail::Node& self) {
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        double* ga = parent_grad(self, 0);
        double* gb = parent_grad(self, 1);
        const double g = 2.0 * self.grad[0] / n;
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double d = (av[i] - bv[i]) * g;
            if (ga) ga[i] += d;
            if (gb) gb[i] -= d;
        }
    };
    return Tensor::make_result({1}, {s / n}, {a, b}, adjoint, "mean_squared_error");
}

Tensor sum(const Tensor& x)
{
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto adjoint = [](detail::Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        const std::size_t n = self.parents[0]->value.size();
        for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
    };
    return Tensor::make_result({1}, {s}, {x}, adjoint, "sum");
}

Tensor mean(const Tensor& x)
{
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

namespace {

template <class Forward, class Backward>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Forward f, Backward bwd)
{
    require_same_shape(a, b, op);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
    auto adjoint = [bwd](detail::Node& self) {
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        double* ga = parent_grad(self, 0);
        double* gb = parent_grad(self, 1);
        for (std::size_t i = 0; i < av.size(); ++i) {
            const auto [da, db] = bwd(av[i], bv[i]);
            if (ga) ga[i] += da * self.grad[i];
            if (gb) gb[i] += db * self.grad[i];
        }
    };
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, adjoint, op);
}

template <class Forward, class Derivative>
Tensor unary_elementwise(const Tensor& x, const char* op, Forward f, Derivative d)
{
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    auto adjoint = [d](detail::Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        const auto& xv = parent_value(self, 0);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += d(xv[i]) * self.grad[i];
    };
    return Tensor::make_result(x.shape(), std::move(out), {x}, adjoint, op);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b)
{
    return binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    return binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    return binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y) { return std::pair{y, x}; });
}

Tensor scale(const Tensor& x, double factor)
{
    return unary_elementwise(
        x, "scale", [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset)
{
    return unary_elementwise(
        x, "add_scalar", [offset](double v) { return v + offset; }, [](double) { return 1.0; });
}

Tensor log_clamped(const Tensor& x, double floor)
{
    const double lo = floor, hi = 1.0 - floor;
    return unary_elementwise(
        x, "log",
        [=](double v) { return std::log(floor > 0.0 ? std::clamp(v, lo, hi) : v); },
        [=](double v) {
            if (floor > 0.0 && (v < lo || v > hi)) return 0.0;
            return 1.0 / v;
        });
}

Tensor clamp(const Tensor& x, double lo, double hi)
{
    return unary_elementwise(
        x, "clamp", [=](double v) { return std::clamp(v, lo, hi); },
        [=](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor concat_channels(const std::vector<Tensor>& parts)
{
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const Geometry g0 = geometry(parts[0], "concat_channels");
    int total = 0;
    for (const Tensor& p : parts) {
        const Geometry g = geometry(p, "concat_channels");
        if (g.n != g0.n || g.h != g0.h || g.w != g0.w)
            throw ShapeError("concat_channels: incompatible " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
        total += g.c;
    }
    std::vector<double> out(static_cast<std::size_t>(g0.n) * total * g0.plane());
    std::vector<int> channels;
    for (int n = 0; n < g0.n; ++n) {
        double* dst = out.data() + static_cast<std::size_t>(n) * total * g0.plane();
        for (const Tensor& p : parts) {
            const std::size_t len = static_cast<std::size_t>(p.dim(1)) * g0.plane();
            const double* src = p.values().data() + n * len;
            dst = std::copy(src, src + len, dst);
        }
    }
    for (const Tensor& p : parts) channels.push_back(p.dim(1));
    auto adjoint = [g0, total, channels](detail::Node& self) {
        for (int n = 0; n < g0.n; ++n) {
            const double* src = self.grad.data() + static_cast<std::size_t>(n) * total * g0.plane();
            for (std::size_t i = 0; i < channels.size(); ++i) {
                const std::size_t len = static_cast<std::size_t>(channels[i]) * g0.plane();
                if (double* gp = parent_grad(self, i)) {
                    double* dst = gp + n * len;
                    for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
                }
                src += len;
            }
        }
    };
    return Tensor::make_result({g0.n, total, g0.h, g0.w}, std::move(out), parts, adjoint, "concat");
}

Tensor slice_channels(const Tensor& x, int begin, int count)
{
    const Geometry g = geometry(x, "slice_channels");
    if (begin < 0 || count <= 0 || begin + count > g.c)
        throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") outside " + std::to_string(g.c) + " channels");
    const std::size_t len = static_cast<std::size_t>(count) * g.plane();
    std::vector<double> out(static_cast<std::size_t>(g.n) * len);
    for (int n = 0; n < g.n; ++n) {
        const double* src = x.values().data() + (static_cast<std::size_t>(n) * g.c + begin) * g.plane();
        std::copy(src, src + len, out.data() + n * len);
    }
    auto adjoint = [g, begin, len](detail::Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        for (int n = 0; n < g.n; ++n) {
            double* dst = gx + (static_cast<std::size_t>(n) * g.c + begin) * g.plane();
            const double* src = self.grad.data() + n * len;
            for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
        }
    };
    return Tensor::make_result({g.n, count, g.h, g.w}, std::move(out), {x}, adjoint, "slice");
}

namespace {

// Output pixel (y, x) reads input pixel (rows[y], cols[x]); adjoint scatters back.
Tensor gather_pixels(const Tensor& x, std::vector<int> rows, std::vector<int> cols, const char* op)
{
    const Geometry g = geometry(x, op);
    const int oh = static_cast<int>(rows.size()), ow = static_cast<int>(cols.size());
    std::vector<double> out(static_cast<std::size_t>(g.n) * g.c * oh * ow);
    for (std::size_t p = 0; p < static_cast<std::size_t>(g.n) * g.c; ++p) {
        const double* src = x.values().data() + p * g.plane();
        double* dst = out.data() + p * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[rows[y] * g.w + cols[xx]];
    }
    auto adjoint = [g, rows = std::move(rows), cols = std::move(cols)](detail::Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        const int oh = static_cast<int>(rows.size()), ow = static_cast<int>(cols.size());
        for (std::size_t p = 0; p < static_cast<std::size_t>(g.n) * g.c; ++p) {
            const double* src = self.grad.data() + p * oh * ow;
            double* dst = gx + p * g.plane();
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) dst[rows[y] * g.w + cols[xx]] += src[y * ow + xx];
        }
    };
    return Tensor::make_result({g.n, g.c, oh, ow}, std::move(out), {x}, adjoint, op);
}

}  // namespace

Tensor reflect_pad(const Tensor& x, int top, int bottom, int left, int right)
{
    const Geometry g = geometry(x, "reflect_pad");
    if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("reflect_pad: negative padding");
    std::vector<int> rows, cols;
    for (int y = -top; y < g.h + bottom; ++y) rows.push_back(reflect_index(y, g.h));
    for (int xx = -left; xx < g.w + right; ++xx) cols.push_back(reflect_index(xx, g.w));
    return gather_pixels(x, std::move(rows), std::move(cols), "reflect_pad");
}

Tensor crop(const Tensor& x, int top, int left, int height, int width)
{
    const Geometry g = geometry(x, "crop");
    if (top < 0 || left < 0 || height <= 0 || width <= 0 || top + height > g.h || left + width > g.w)
        throw ShapeError("crop window outside " + shape_str(x.shape()));
    std::vector<int> rows(height), cols(width);
    for (int y = 0; y < height; ++y) rows[y] = top + y;
    for (int xx = 0; xx < width; ++xx) cols[xx] = left + xx;
    return gather_pixels(x, std::move(rows), std::move(cols), "crop");
}

Tensor global_avg_pool(const Tensor& x)
{
    const Geometry g = geometry(x, "global_avg_pool");
    std::vector<double> out(static_cast<std::size_t>(g.n) * g.c);
    for (std::size_t p = 0; p < out.size(); ++p) {
        const double* src = x.values().data() + p * g.plane();
        double s = 0.0;
        for (std::size_t i = 0; i < g.plane(); ++i) s += src[i];
        out[p] = s / static_cast<double>(g.plane());
    }
    auto adjoint = [g](detail::Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        for (std::size_t p = 0; p < self.grad.size(); ++p) {
            const double v = self.grad[p] / static_cast<double>(g.plane());
            double* dst = gx + p * g.plane();
            for (std::size_t i = 0; i < g.plane(); ++i) dst[i] += v;
        }
    };
    return Tensor::make_result({g.n, g.c}, std::move(out), {x}, adjoint, "global_avg_pool");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias)
{
    require_rank(x, 2, "linear input");
    require_rank(weight, 2, "linear weight");
    const int n = x.dim(0), f = x.dim(1), o = weight.dim(0);
    if (weight.dim(1) != f) throw ShapeError("linear: feature mismatch");
    if (bias.shape() != Shape{o}) throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
    std::vector<double> out(static_cast<std::size_t>(n) * o);
    MatMap y(out.data(), n, o);
    y.noalias() = ConstMatMap(x.values().data(), n, f) * ConstMatMap(weight.values().data(), o, f).transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) y(i, j) += bias.values()[j];
    auto adjoint = [n, f, o](detail::Node& self) {
        const ConstMatMap gy(self.grad.data(), n, o);
        const ConstMatMap xv(parent_value(self, 0).data(), n, f);
        const ConstMatMap wv(parent_value(self, 1).data(), o, f);
        if (double* gx = parent_grad(self, 0)) MatMap(gx, n, f).noalias() += gy * wv;
        if (double* gw = parent_grad(self, 1)) MatMap(gw, o, f).noalias() += gy.transpose() * xv;
        if (double* gb = parent_grad(self, 2))
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < o; ++j) gb[j] += gy(i, j);
    };
    return Tensor::make_result({n, o}, std::move(out), {x, weight, bias}, adjoint, "linear");
}

namespace {

// Clamped bilinear sample position along one axis.
struct Sample1d {
    int i0, i1;
    double frac;
    bool inside;  // false when the position was clamped to the border
};

Sample1d sample_axis(double pos, int size)
{
    Sample1d s{0, 0, 0.0, true};
    // Rounding in x + u * W leaves integer displacements a few ulps off the grid.
    if (const double r = std::round(pos); std::abs(pos - r) < 1e-9) pos = r;
    const double hi = static_cast<double>(size - 1);
    if (pos < 0.0 || pos > hi) {
        s.inside = false;
        pos = std::clamp(pos, 0.0, hi);
    }
    if (size == 1) return s;
    s.i0 = std::min(static_cast<int>(std::floor(pos)), size - 2);
    s.i1 = s.i0 + 1;
    s.frac = pos - s.i0;
    return s;
}

}  // namespace

Tensor warp(const Tensor& image, const Tensor& flow, double sign)
{
    const Geometry g = geometry(image, "warp image");
    const Geometry gf = geometry(flow, "warp flow");
    if (gf.n != g.n || gf.c != 2 || gf.h != g.h || gf.w != g.w)
        throw ShapeError("warp: flow " + shape_str(flow.shape()) + " incompatible with image " +
                         shape_str(image.shape()));
    const auto& img = image.values();
    const auto& fl = flow.values();
    std::vector<double> out(img.size());
    for (int n = 0; n < g.n; ++n) {
        const double* u = fl.data() + static_cast<std::size_t>(n) * 2 * g.plane();
        const double* v = u + g.plane();
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * g.w + x;
                const Sample1d sx = sample_axis(x + sign * u[p] * g.w, g.w);
                const Sample1d sy = sample_axis(y + sign * v[p] * g.h, g.h);
                for (int c = 0; c < g.c; ++c) {
                    const double* src = img.data() + (static_cast<std::size_t>(n) * g.c + c) * g.plane();
                    const double top = (1.0 - sx.frac) * src[sy.i0 * g.w + sx.i0] + sx.frac * src[sy.i0 * g.w + sx.i1];
                    const double bot = (1.0 - sx.frac) * src[sy.i1 * g.w + sx.i0] + sx.frac * src[sy.i1 * g.w + sx.i1];
                    out[(static_cast<std::size_t>(n) * g.c + c) * g.plane() + p] = (1.0 - sy.frac) * top + sy.frac * bot;
                }
            }
    }
    auto adjoint = [g, sign](detail::Node& self) {
        const auto& img = parent_value(self, 0);
        const auto& fl = parent_value(self, 1);
        double* gimg = parent_grad(self, 0);
        double* gfl = parent_grad(self, 1);
        for (int n = 0; n < g.n; ++n) {
            const double* u = fl.data() + static_cast<std::size_t>(n) * 2 * g.plane();
            const double* v = u + g.plane();
            for (int y = 0; y < g.h; ++y)
                for (int x = 0; x < g.w; ++x) {
                    const std::size_t p = static_cast<std::size_t>(y) * g.w + x;
                    const Sample1d sx = sample_axis(x + sign * u[p] * g.w, g.w);
                    const Sample1d sy = sample_axis(y + sign * v[p] * g.h, g.h);
                    double dsx = 0.0, dsy = 0.0;
                    for (int c = 0; c < g.c; ++c) {
                        const std::size_t base = (static_cast<std::size_t>(n) * g.c + c) * g.plane();
                        const double gout = self.grad[base + p];
                        if (gout == 0.0) continue;
                        const std::size_t i00 = sy.i0 * g.w + sx.i0, i01 = sy.i0 * g.w + sx.i1;
                        const std::size_t i10 = sy.i1 * g.w + sx.i0, i11 = sy.i1 * g.w + sx.i1;
                        if (gimg) {
                            gimg[base + i00] += (1.0 - sy.frac) * (1.0 - sx.frac) * gout;
                            gimg[base + i01] += (1.0 - sy.frac) * sx.frac * gout;
                            gimg[base + i10] += sy.frac * (1.0 - sx.frac) * gout;
                            gimg[base + i11] += sy.frac * sx.frac * gout;
                        }
                        if (gfl) {
                            const double* src = img.data() + base;
                            dsx += gout * ((1.0 - sy.frac) * (src[i01] - src[i00]) + sy.frac * (src[i11] - src[i10]));
                            dsy += gout * ((1.0 - sx.frac) * (src[i10] - src[i00]) + sx.frac * (src[i11] - src[i01]));
                        }
                    }
                    if (gfl) {
                        const std::size_t fbase = static_cast<std::size_t>(n) * 2 * g.plane();
                        if (sx.inside) gfl[fbase + p] += dsx * sign * g.w;
                        if (sy.inside) gfl[fbase + g.plane() + p] += dsy * sign * g.h;
                    }
                }
        }
    };
    return Tensor::make_result(image.shape(), std::move(out), {image, flow}, adjoint, "warp");
}

Tensor blend(const Tensor& a, const Tensor& b, const Tensor& weight)
{
    require_same_shape(a, b, "blend");
    const Geometry g = geometry(a, "blend");
    const Geometry gw = geometry(weight, "blend weight");
    if (gw.n != g.n || gw.c != 1 || gw.h != g.h || gw.w != g.w)
        throw ShapeError("blend: weight " + shape_str(weight.shape()) + " incompatible with " + shape_str(a.shape()));
    const auto& av = a.values();
    const auto& bv = b.values();
    const auto& wv = weight.values();
    std::vector<double> out(av.size());
    for (int n = 0; n < g.n; ++n)
        for (int c = 0; c < g.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * g.c + c) * g.plane();
            const double* w = wv.data() + static_cast<std::size_t>(n) * g.plane();
            for (std::size_t i = 0; i < g.plane(); ++i)
                out[base + i] = w[i] * av[base + i] + (1.0 - w[i]) * bv[base + i];
        }
    auto adjoint = [g](detail::Node& self) {
        const auto& av = parent_value(self, 0);
        const auto& bv = parent_value(self, 1);
        const auto& wv = parent_value(self, 2);
        double* ga = parent_grad(self, 0);
        double* gb = parent_grad(self, 1);
        double* gw = parent_grad(self, 2);
        for (int n = 0; n < g.n; ++n)
            for (int c = 0; c < g.c; ++c) {
                const std::size_t base = (static_cast<std::size_t>(n) * g.c + c) * g.plane();
                const std::size_t wbase = static_cast<std::size_t>(n) * g.plane();
                for (std::size_t i = 0; i < g.plane(); ++i) {
                    const double gy = self.grad[base + i];
                    if (ga) ga[base + i] += wv[wbase + i] * gy;
                    if (gb) gb[base + i] += (1.0 - wv[wbase + i]) * gy;
                    if (gw) gw[wbase + i] += (av[base + i] - bv[base + i]) * gy;
                }
            }
    };
    return Tensor::make_result(a.shape(), std::move(out), {a, b, weight}, adjoint, "blend");
}

}  // namespace vfi
