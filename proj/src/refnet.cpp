#include "volseg/refnet.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>
#include <sstream>

#include "volseg/rng.hpp"

namespace volseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

constexpr double norm_eps = 1e-5;
constexpr double leaky_slope = 0.01;
constexpr std::size_t npos = static_cast<std::size_t>(-1);

struct Kernel {
    int d = 1, h = 3, w = 3;
    [[nodiscard]] int volume() const { return d * h * w; }
};

struct ConvSpec {
    std::size_t w = 0, b = 0;
    int cin = 0, cout = 0;
    Kernel k;
};

struct NormSpec {
    std::size_t g = npos, beta = npos;
    int ch = 0;
};

struct Stage {
    ConvSpec conv;
    NormSpec norm;
};

struct Block {
    Stage a, b;
};

struct UpSpec {
    std::size_t w = 0, b = 0;
    int cin = 0, cout = 0;
    int pd = 1; // pooling factor along z
};

struct StageTape {
    Tensor in;                   // convolution input
    Tensor xhat;                 // normalized conv output (empty without norm)
    std::vector<double> inv_std; // per statistics group
    Tensor pre;                  // activation input
};

struct BlockTape {
    StageTape a, b;
};

struct PoolTape {
    Extent in_extent;
    std::size_t channels = 0;
    std::vector<std::uint32_t> argmax;
};

} // namespace

struct TapeData {
    std::vector<BlockTape> enc;
    std::vector<PoolTape> pool;
    BlockTape bottleneck;
    std::vector<Tensor> up_in;
    std::vector<BlockTape> dec;
    Tensor head_in;
};

Tape::Tape() : data(std::make_unique<TapeData>()) {}
Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

struct Network::Impl {
    std::vector<Block> enc;
    Block bottleneck;
    std::vector<UpSpec> up;   // up[l]: level l+1 -> level l
    std::vector<Block> dec;   // dec[l]: decoder block at level l
    ConvSpec head;
    std::vector<ParamBlock> layout;
    std::size_t total = 0;
    NormKind norm = NormKind::batch;
    Activation act = Activation::relu;
    int pd = 1;

    std::size_t reserve(const std::string& name, std::size_t n)
    {
        layout.push_back({name, total, n});
        total += n;
        return total - n;
    }

    ConvSpec conv(const std::string& name, int cin, int cout, Kernel k)
    {
        ConvSpec c{0, 0, cin, cout, k};
        c.w = reserve(name + ".weight", static_cast<std::size_t>(cout) * static_cast<std::size_t>(cin * k.volume()));
        c.b = reserve(name + ".bias", static_cast<std::size_t>(cout));
        return c;
    }

    NormSpec normspec(const std::string& name, int ch)
    {
        NormSpec n;
        n.ch = ch;
        if (norm != NormKind::none) {
            n.g = reserve(name + ".scale", static_cast<std::size_t>(ch));
            n.beta = reserve(name + ".shift", static_cast<std::size_t>(ch));
        }
        return n;
    }

    Block block(const std::string& name, int cin, int cout, Kernel k)
    {
        Block b;
        b.a.conv = conv(name + ".conv1", cin, cout, k);
        b.a.norm = normspec(name + ".norm1", cout);
        b.b.conv = conv(name + ".conv2", cout, cout, k);
        b.b.norm = normspec(name + ".norm2", cout);
        return b;
    }

    explicit Impl(const NetDescriptor& d) : norm(d.norm), act(d.activation), pd(d.dims == 3 ? 2 : 1)
    {
        const Kernel k3 = d.dims == 3 ? Kernel{3, 3, 3} : Kernel{1, 3, 3};
        auto filters = [&](int l) { return d.base_filters << l; };
        int cin = d.in_channels;
        for (int l = 0; l < d.depth; ++l) {
            enc.push_back(block("enc" + std::to_string(l), cin, filters(l), k3));
            cin = filters(l);
        }
        bottleneck = block("bottleneck", cin, filters(d.depth), k3);
        up.resize(static_cast<std::size_t>(d.depth));
        dec.resize(static_cast<std::size_t>(d.depth));
        for (int l = d.depth - 1; l >= 0; --l) {
            const auto name = std::to_string(l);
            UpSpec u{0, 0, filters(l + 1), filters(l), pd};
            u.w = reserve("up" + name + ".weight",
                          static_cast<std::size_t>(u.cout * pd * 4) * static_cast<std::size_t>(u.cin));
            u.b = reserve("up" + name + ".bias", static_cast<std::size_t>(u.cout));
            up[static_cast<std::size_t>(l)] = u;
            dec[static_cast<std::size_t>(l)] = block("dec" + name, 2 * filters(l), filters(l), k3);
        }
        head = conv("head", filters(0), d.num_classes, Kernel{1, 1, 1});
    }
};

namespace {

// ---------------------------------------------------------------------------
// convolution

// cols is (cin * kvol) x P, row-major
void im2col(const double* x, int cin, const Extent& e, const Kernel& k, double* cols)
{
    const auto P = e.size();
    const auto D = static_cast<std::ptrdiff_t>(e.depth);
    const auto H = static_cast<std::ptrdiff_t>(e.height);
    const auto W = static_cast<std::ptrdiff_t>(e.width);
    double* row = cols;
    for (int ci = 0; ci < cin; ++ci) {
        const double* src_c = x + static_cast<std::size_t>(ci) * P;
        for (int a = 0; a < k.d; ++a)
            for (int b = 0; b < k.h; ++b)
                for (int c = 0; c < k.w; ++c, row += P) {
                    const std::ptrdiff_t oz = a - k.d / 2, oy = b - k.h / 2, ox = c - k.w / 2;
                    const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -ox);
                    const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - ox);
                    for (std::ptrdiff_t z = 0; z < D; ++z) {
                        const std::ptrdiff_t sz = z + oz;
                        for (std::ptrdiff_t y = 0; y < H; ++y) {
                            double* dst = row + (z * H + y) * W;
                            const std::ptrdiff_t sy = y + oy;
                            if (sz < 0 || sz >= D || sy < 0 || sy >= H) {
                                std::fill(dst, dst + W, 0.0);
                                continue;
                            }
                            const double* src = src_c + (sz * H + sy) * W + ox;
                            std::fill(dst, dst + x0, 0.0);
                            std::copy(src + x0, src + x1, dst + x0);
                            std::fill(dst + x1, dst + W, 0.0);
                        }
                    }
                }
    }
}

void col2im_add(const double* cols, int cin, const Extent& e, const Kernel& k, double* dx)
{
    const auto P = e.size();
    const auto D = static_cast<std::ptrdiff_t>(e.depth);
    const auto H = static_cast<std::ptrdiff_t>(e.height);
    const auto W = static_cast<std::ptrdiff_t>(e.width);
    const double* row = cols;
    for (int ci = 0; ci < cin; ++ci) {
        double* dst_c = dx + static_cast<std::size_t>(ci) * P;
        for (int a = 0; a < k.d; ++a)
            for (int b = 0; b < k.h; ++b)
                for (int c = 0; c < k.w; ++c, row += P) {
                    const std::ptrdiff_t oz = a - k.d / 2, oy = b - k.h / 2, ox = c - k.w / 2;
                    const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -ox);
                    const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - ox);
                    for (std::ptrdiff_t z = 0; z < D; ++z) {
                        const std::ptrdiff_t sz = z + oz;
                        if (sz < 0 || sz >= D)
                            continue;
                        for (std::ptrdiff_t y = 0; y < H; ++y) {
                            const std::ptrdiff_t sy = y + oy;
                            if (sy < 0 || sy >= H)
                                continue;
                            const double* src = row + (z * H + y) * W;
                            double* dst = dst_c + (sz * H + sy) * W + ox;
                            for (std::ptrdiff_t xx = x0; xx < x1; ++xx)
                                dst[xx] += src[xx];
                        }
                    }
                }
    }
}

Tensor conv_forward(const ConvSpec& s, const double* p, const Tensor& x)
{
    Tensor y(x.n, static_cast<std::size_t>(s.cout), x.extent);
    const auto P = static_cast<Eigen::Index>(x.spatial());
    const auto K = static_cast<Eigen::Index>(s.cin * s.k.volume());
    CMapMat w(p + s.w, s.cout, K);
    std::vector<double> cols;
    if (s.k.volume() > 1)
        cols.resize(static_cast<std::size_t>(K * P));
    for (std::size_t i = 0; i < x.n; ++i) {
        MapMat out(y.plane(i, 0), s.cout, P);
        if (s.k.volume() == 1) {
            out.noalias() = w * CMapMat(x.plane(i, 0), K, P);
        } else {
            im2col(x.plane(i, 0), s.cin, x.extent, s.k, cols.data());
            out.noalias() = w * CMapMat(cols.data(), K, P);
        }
        for (int co = 0; co < s.cout; ++co)
            out.row(co).array() += p[s.b + static_cast<std::size_t>(co)];
    }
    return y;
}

Tensor conv_backward(const ConvSpec& s, const double* p, const Tensor& x, const Tensor& dy, double* g, bool need_dx)
{
    const auto P = static_cast<Eigen::Index>(x.spatial());
    const auto K = static_cast<Eigen::Index>(s.cin * s.k.volume());
    CMapMat w(p + s.w, s.cout, K);
    MapMat dw(g + s.w, s.cout, K);
    Tensor dx;
    if (need_dx)
        dx = Tensor(x.n, x.c, x.extent);
    std::vector<double> cols;
    if (s.k.volume() > 1)
        cols.resize(static_cast<std::size_t>(K * P));
    RowMat dcols;
    for (std::size_t i = 0; i < x.n; ++i) {
        CMapMat d(dy.plane(i, 0), s.cout, P);
        for (int co = 0; co < s.cout; ++co)
            g[s.b + static_cast<std::size_t>(co)] += d.row(co).sum();
        if (s.k.volume() == 1) {
            CMapMat xi(x.plane(i, 0), K, P);
            dw.noalias() += d * xi.transpose();
            if (need_dx)
                MapMat(dx.plane(i, 0), K, P).noalias() = w.transpose() * d;
            continue;
        }
        im2col(x.plane(i, 0), s.cin, x.extent, s.k, cols.data());
        dw.noalias() += d * CMapMat(cols.data(), K, P).transpose();
        if (need_dx) {
            dcols.noalias() = w.transpose() * d;
            col2im_add(dcols.data(), s.cin, x.extent, s.k, dx.plane(i, 0));
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// normalization: statistics per channel over the batch, or per (sample, channel)

struct Groups {
    std::size_t count = 0;
    std::size_t members = 0;
};

Groups norm_groups(NormKind kind, const Tensor& x)
{
    if (kind == NormKind::batch)
        return {x.c, x.n * x.spatial()};
    return {x.n * x.c, x.spatial()};
}

// visits the contiguous runs of group g
template <class F>
void for_runs(NormKind kind, const Tensor& x, std::size_t g, F&& f)
{
    const auto S = x.spatial();
    if (kind == NormKind::batch) {
        for (std::size_t i = 0; i < x.n; ++i)
            f((i * x.c + g) * S, S);
    } else {
        f(g * S, S);
    }
}

std::size_t group_channel(NormKind kind, const Tensor& x, std::size_t g) { return kind == NormKind::batch ? g : g % x.c; }

Tensor norm_forward(NormKind kind, const NormSpec& s, const double* p, const Tensor& x, StageTape* tape)
{
    if (kind == NormKind::none)
        return x;
    const Groups gr = norm_groups(kind, x);
    Tensor xhat(x.n, x.c, x.extent);
    Tensor y(x.n, x.c, x.extent);
    std::vector<double> inv(gr.count);
    for (std::size_t g = 0; g < gr.count; ++g) {
        double sum = 0.0;
        for_runs(kind, x, g, [&](std::size_t o, std::size_t n) {
            for (std::size_t j = 0; j < n; ++j)
                sum += x.v[o + j];
        });
        const double mean = sum / static_cast<double>(gr.members);
        double sq = 0.0;
        for_runs(kind, x, g, [&](std::size_t o, std::size_t n) {
            for (std::size_t j = 0; j < n; ++j) {
                const double d = x.v[o + j] - mean;
                sq += d * d;
            }
        });
        inv[g] = 1.0 / std::sqrt(sq / static_cast<double>(gr.members) + norm_eps);
        const std::size_t c = group_channel(kind, x, g);
        const double gamma = p[s.g + c];
        const double beta = p[s.beta + c];
        for_runs(kind, x, g, [&](std::size_t o, std::size_t n) {
            for (std::size_t j = 0; j < n; ++j) {
                const double h = (x.v[o + j] - mean) * inv[g];
                xhat.v[o + j] = h;
                y.v[o + j] = gamma * h + beta;
            }
        });
    }
    if (tape) {
        tape->xhat = std::move(xhat);
        tape->inv_std = std::move(inv);
    }
    return y;
}

Tensor norm_backward(NormKind kind, const NormSpec& s, const double* p, const StageTape& t, const Tensor& dy, double* grad)
{
    if (kind == NormKind::none)
        return dy;
    const Tensor& xhat = t.xhat;
    const Groups gr = norm_groups(kind, xhat);
    Tensor dx(xhat.n, xhat.c, xhat.extent);
    const double m = static_cast<double>(gr.members);
    for (std::size_t g = 0; g < gr.count; ++g) {
        const std::size_t c = group_channel(kind, xhat, g);
        const double gamma = p[s.g + c];
        double sum_dy = 0.0, sum_dy_h = 0.0;
        for_runs(kind, xhat, g, [&](std::size_t o, std::size_t n) {
            for (std::size_t j = 0; j < n; ++j) {
                sum_dy += dy.v[o + j];
                sum_dy_h += dy.v[o + j] * xhat.v[o + j];
            }
        });
        grad[s.g + c] += sum_dy_h;
        grad[s.beta + c] += sum_dy;
        // with dh = gamma dy: dx = inv/m (m dh - sum dh - h sum(dh h))
        const double k = gamma * t.inv_std[g] / m;
        for_runs(kind, xhat, g, [&](std::size_t o, std::size_t n) {
            for (std::size_t j = 0; j < n; ++j)
                dx.v[o + j] = k * (m * dy.v[o + j] - sum_dy - xhat.v[o + j] * sum_dy_h);
        });
    }
    return dx;
}

// ---------------------------------------------------------------------------
// activation

Tensor act_forward(Activation a, const Tensor& x)
{
    Tensor y = x;
    const double slope = a == Activation::relu ? 0.0 : leaky_slope;
    for (auto& v : y.v)
        if (v <= 0.0)
            v *= slope;
    return y;
}

Tensor act_backward(Activation a, const Tensor& pre, const Tensor& dy)
{
    Tensor dx = dy;
    const double slope = a == Activation::relu ? 0.0 : leaky_slope;
    for (std::size_t i = 0; i < dx.v.size(); ++i)
        if (pre.v[i] <= 0.0)
            dx.v[i] *= slope;
    return dx;
}

// ---------------------------------------------------------------------------
// pooling

Tensor pool_forward(const Tensor& x, int pd, PoolTape* tape)
{
    const Extent ie = x.extent;
    const Extent oe{ie.depth / static_cast<std::size_t>(pd), ie.height / 2, ie.width / 2};
    Tensor y(x.n, x.c, oe);
    std::vector<std::uint32_t> arg(y.v.size());
    for (std::size_t i = 0; i < x.n; ++i)
        for (std::size_t c = 0; c < x.c; ++c) {
            const double* src = x.plane(i, c);
            double* dst = y.plane(i, c);
            std::uint32_t* am = arg.data() + (i * x.c + c) * oe.size();
            for (std::size_t z = 0; z < oe.depth; ++z)
                for (std::size_t yy = 0; yy < oe.height; ++yy)
                    for (std::size_t xx = 0; xx < oe.width; ++xx) {
                        double best = 0.0;
                        std::size_t best_i = npos;
                        for (int a = 0; a < pd; ++a)
                            for (int b = 0; b < 2; ++b)
                                for (int cc = 0; cc < 2; ++cc) {
                                    const std::size_t j = ((z * static_cast<std::size_t>(pd) + static_cast<std::size_t>(a)) * ie.height
                                                           + yy * 2 + static_cast<std::size_t>(b))
                                                              * ie.width
                                                          + xx * 2 + static_cast<std::size_t>(cc);
                                    if (best_i == npos || src[j] > best) {
                                        best = src[j];
                                        best_i = j;
                                    }
                                }
                        const std::size_t o = (z * oe.height + yy) * oe.width + xx;
                        dst[o] = best;
                        am[o] = static_cast<std::uint32_t>(best_i);
                    }
        }
    if (tape) {
        tape->in_extent = ie;
        tape->channels = x.c;
        tape->argmax = std::move(arg);
    }
    return y;
}

Tensor pool_backward(const PoolTape& t, const Tensor& dy)
{
    Tensor dx(dy.n, t.channels, t.in_extent);
    const std::size_t os = dy.spatial();
    for (std::size_t i = 0; i < dy.n; ++i)
        for (std::size_t c = 0; c < dy.c; ++c) {
            const double* src = dy.plane(i, c);
            double* dst = dx.plane(i, c);
            const std::uint32_t* am = t.argmax.data() + (i * dy.c + c) * os;
            for (std::size_t o = 0; o < os; ++o)
                dst[am[o]] += src[o];
        }
    return dx;
}

// ---------------------------------------------------------------------------
// 2x transposed convolution (kernel = stride); weight rows are co * A + a

Extent up_extent(const Extent& e, int pd) { return {e.depth * static_cast<std::size_t>(pd), e.height * 2, e.width * 2}; }

Tensor up_forward(const UpSpec& s, const double* p, const Tensor& x)
{
    const Extent ie = x.extent;
    const Extent oe = up_extent(ie, s.pd);
    const int A = s.pd * 4;
    Tensor y(x.n, static_cast<std::size_t>(s.cout), oe);
    CMapMat w(p + s.w, s.cout * A, s.cin);
    RowMat z;
    const auto P = static_cast<Eigen::Index>(ie.size());
    for (std::size_t i = 0; i < x.n; ++i) {
        z.noalias() = w * CMapMat(x.plane(i, 0), s.cin, P);
        for (int co = 0; co < s.cout; ++co) {
            double* dst = y.plane(i, static_cast<std::size_t>(co));
            const double bias = p[s.b + static_cast<std::size_t>(co)];
            for (int a = 0; a < A; ++a) {
                const auto az = static_cast<std::size_t>(a / 4), ay = static_cast<std::size_t>((a / 2) % 2),
                           ax = static_cast<std::size_t>(a % 2);
                const double* row = z.data() + static_cast<std::ptrdiff_t>(co * A + a) * P;
                for (std::size_t zz = 0; zz < ie.depth; ++zz)
                    for (std::size_t yy = 0; yy < ie.height; ++yy)
                        for (std::size_t xx = 0; xx < ie.width; ++xx) {
                            const std::size_t o = ((zz * static_cast<std::size_t>(s.pd) + az) * oe.height + yy * 2 + ay) * oe.width
                                                  + xx * 2 + ax;
                            dst[o] = row[(zz * ie.height + yy) * ie.width + xx] + bias;
                        }
            }
        }
    }
    return y;
}

Tensor up_backward(const UpSpec& s, const double* p, const Tensor& x, const Tensor& dy, double* g)
{
    const Extent ie = x.extent;
    const Extent oe = dy.extent;
    const int A = s.pd * 4;
    const auto P = static_cast<Eigen::Index>(ie.size());
    CMapMat w(p + s.w, s.cout * A, s.cin);
    MapMat dw(g + s.w, s.cout * A, s.cin);
    Tensor dx(x.n, x.c, ie);
    RowMat dz(s.cout * A, P);
    for (std::size_t i = 0; i < x.n; ++i) {
        for (int co = 0; co < s.cout; ++co) {
            const double* src = dy.plane(i, static_cast<std::size_t>(co));
            double bsum = 0.0;
            for (std::size_t o = 0; o < oe.size(); ++o)
                bsum += src[o];
            g[s.b + static_cast<std::size_t>(co)] += bsum;
            for (int a = 0; a < A; ++a) {
                const auto az = static_cast<std::size_t>(a / 4), ay = static_cast<std::size_t>((a / 2) % 2),
                           ax = static_cast<std::size_t>(a % 2);
                double* row = dz.data() + static_cast<std::ptrdiff_t>(co * A + a) * P;
                for (std::size_t zz = 0; zz < ie.depth; ++zz)
                    for (std::size_t yy = 0; yy < ie.height; ++yy)
                        for (std::size_t xx = 0; xx < ie.width; ++xx) {
                            const std::size_t o = ((zz * static_cast<std::size_t>(s.pd) + az) * oe.height + yy * 2 + ay) * oe.width
                                                  + xx * 2 + ax;
                            row[(zz * ie.height + yy) * ie.width + xx] = src[o];
                        }
            }
        }
        CMapMat xi(x.plane(i, 0), s.cin, P);
        dw.noalias() += dz * xi.transpose();
        MapMat(dx.plane(i, 0), s.cin, P).noalias() = w.transpose() * dz;
    }
    return dx;
}

// ---------------------------------------------------------------------------

Tensor concat(const Tensor& a, const Tensor& b)
{
    Tensor y(a.n, a.c + b.c, a.extent);
    const auto S = a.spatial();
    for (std::size_t i = 0; i < a.n; ++i) {
        std::copy_n(a.plane(i, 0), a.c * S, y.plane(i, 0));
        std::copy_n(b.plane(i, 0), b.c * S, y.plane(i, a.c));
    }
    return y;
}

std::pair<Tensor, Tensor> split(const Tensor& y, std::size_t first)
{
    Tensor a(y.n, first, y.extent), b(y.n, y.c - first, y.extent);
    const auto S = y.spatial();
    for (std::size_t i = 0; i < y.n; ++i) {
        std::copy_n(y.plane(i, 0), a.c * S, a.plane(i, 0));
        std::copy_n(y.plane(i, first), b.c * S, b.plane(i, 0));
    }
    return {std::move(a), std::move(b)};
}

void add_into(Tensor& a, const Tensor& b)
{
    for (std::size_t i = 0; i < a.v.size(); ++i)
        a.v[i] += b.v[i];
}

Tensor stage_forward(const Network::Impl& net, const Stage& s, const double* p, const Tensor& x, StageTape* t)
{
    Tensor c = conv_forward(s.conv, p, x);
    Tensor pre = norm_forward(net.norm, s.norm, p, c, t);
    Tensor y = act_forward(net.act, pre);
    if (t) {
        t->in = x;
        t->pre = std::move(pre);
    }
    return y;
}

Tensor stage_backward(const Network::Impl& net, const Stage& s, const double* p, const StageTape& t, const Tensor& dy,
                      double* g, bool need_dx)
{
    const Tensor dpre = act_backward(net.act, t.pre, dy);
    const Tensor dc = norm_backward(net.norm, s.norm, p, t, dpre, g);
    return conv_backward(s.conv, p, t.in, dc, g, need_dx);
}

Tensor block_forward(const Network::Impl& net, const Block& b, const double* p, const Tensor& x, BlockTape* t)
{
    Tensor h = stage_forward(net, b.a, p, x, t ? &t->a : nullptr);
    return stage_forward(net, b.b, p, h, t ? &t->b : nullptr);
}

Tensor block_backward(const Network::Impl& net, const Block& b, const double* p, const BlockTape& t, const Tensor& dy,
                      double* g, bool need_dx)
{
    const Tensor dh = stage_backward(net, b.b, p, t.b, dy, g, true);
    return stage_backward(net, b.a, p, t.a, dh, g, need_dx);
}

Tensor run_forward(const Network::Impl& net, const double* p, const Tensor& input, TapeData* t)
{
    const std::size_t D = net.enc.size();
    if (t) {
        *t = TapeData{};
        t->enc.resize(D);
        t->pool.resize(D);
        t->up_in.resize(D);
        t->dec.resize(D);
    }
    std::vector<Tensor> skips(D);
    Tensor x = input;
    for (std::size_t l = 0; l < D; ++l) {
        x = block_forward(net, net.enc[l], p, x, t ? &t->enc[l] : nullptr);
        skips[l] = x;
        x = pool_forward(x, net.pd, t ? &t->pool[l] : nullptr);
    }
    x = block_forward(net, net.bottleneck, p, x, t ? &t->bottleneck : nullptr);
    for (std::size_t l = D; l-- > 0;) {
        if (t)
            t->up_in[l] = x;
        Tensor u = up_forward(net.up[l], p, x);
        x = block_forward(net, net.dec[l], p, concat(skips[l], u), t ? &t->dec[l] : nullptr);
    }
    if (t)
        t->head_in = x;
    return conv_forward(net.head, p, x);
}

} // namespace

// ---------------------------------------------------------------------------

NormKind parse_norm(std::string_view s)
{
    if (s == "batch")
        return NormKind::batch;
    if (s == "instance")
        return NormKind::instance;
    if (s == "none")
        return NormKind::none;
    throw ConfigError("unknown normalization '" + std::string(s) + "'");
}

Activation parse_activation(std::string_view s)
{
    if (s == "relu")
        return Activation::relu;
    if (s == "leaky_relu" || s == "leaky-relu" || s == "leaky")
        return Activation::leaky_relu;
    throw ConfigError("unknown activation '" + std::string(s) + "'");
}

std::string_view to_string(NormKind n)
{
    switch (n) {
    case NormKind::none: return "none";
    case NormKind::batch: return "batch";
    case NormKind::instance: return "instance";
    }
    return "?";
}

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "leaky_relu"; }

void validate(const NetDescriptor& d)
{
    if (d.dims != 2 && d.dims != 3)
        throw ConfigError("network dims must be 2 or 3");
    if (d.depth < 1 || d.depth > 8)
        throw ConfigError("network depth must be in [1, 8]");
    if (d.base_filters < 1 || (static_cast<long long>(d.base_filters) << d.depth) > 65536)
        throw ConfigError("base filter count out of range");
    if (d.in_channels < 1)
        throw ConfigError("network needs at least one input channel");
    if (d.num_classes < 2 || d.num_classes > 255)
        throw ConfigError("network needs between 2 and 255 classes");
}

Network::Network(const NetDescriptor& descriptor, std::uint64_t seed) : descriptor_(descriptor)
{
    validate(descriptor);
    impl_ = std::make_unique<Impl>(descriptor);
    params_.assign(impl_->total, 0.0);
    Rng rng(hash_combine(seed, 0x6e6574));
    auto fill_uniform = [&](std::size_t off, std::size_t n, double fan_in) {
        const double bound = std::sqrt(6.0 / fan_in);
        for (std::size_t i = 0; i < n; ++i)
            params_[off + i] = rng.uniform(-bound, bound);
    };
    auto init_conv = [&](const ConvSpec& c) {
        fill_uniform(c.w, static_cast<std::size_t>(c.cout * c.cin * c.k.volume()), c.cin * c.k.volume());
    };
    auto init_norm = [&](const NormSpec& n) {
        if (n.g != npos)
            std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(n.g), n.ch, 1.0);
    };
    auto init_block = [&](const Block& b) {
        init_conv(b.a.conv);
        init_norm(b.a.norm);
        init_conv(b.b.conv);
        init_norm(b.b.norm);
    };
    for (const auto& b : impl_->enc)
        init_block(b);
    init_block(impl_->bottleneck);
    for (std::size_t l = impl_->up.size(); l-- > 0;) {
        const auto& u = impl_->up[l];
        fill_uniform(u.w, static_cast<std::size_t>(u.cout * u.pd * 4 * u.cin), u.cin);
        init_block(impl_->dec[l]);
    }
    init_conv(impl_->head);
}

Network::Network(const NetDescriptor& descriptor, std::vector<double> parameters)
    : descriptor_(descriptor), params_(std::move(parameters))
{
    validate(descriptor);
    impl_ = std::make_unique<Impl>(descriptor);
    if (params_.size() != impl_->total)
        throw ShapeError("parameter vector has " + std::to_string(params_.size()) + " entries, network needs "
                         + std::to_string(impl_->total));
}

Network::~Network() = default;
Network::Network(const Network& o) : descriptor_(o.descriptor_), params_(o.params_), impl_(std::make_unique<Impl>(*o.impl_)) {}
Network& Network::operator=(const Network& o)
{
    if (this != &o) {
        descriptor_ = o.descriptor_;
        params_ = o.params_;
        impl_ = std::make_unique<Impl>(*o.impl_);
    }
    return *this;
}
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;

const std::vector<ParamBlock>& Network::layout() const { return impl_->layout; }

void Network::check_input(const Tensor& x) const
{
    if (x.n == 0)
        throw ShapeError("empty batch");
    if (x.c != static_cast<std::size_t>(descriptor_.in_channels))
        throw ShapeError("network expects " + std::to_string(descriptor_.in_channels) + " input channel(s), got "
                         + std::to_string(x.c));
    const std::size_t f = std::size_t{1} << descriptor_.depth;
    if (descriptor_.dims == 2 && x.extent.depth != 1)
        throw ShapeError("2D network expects depth-1 input");
    if ((descriptor_.dims == 3 && x.extent.depth % f != 0) || x.extent.height % f != 0 || x.extent.width % f != 0)
        throw ShapeError("spatial input size must be divisible by " + std::to_string(f) + " for depth "
                         + std::to_string(descriptor_.depth));
}

Tensor Network::forward(const Tensor& x) const
{
    check_input(x);
    return run_forward(*impl_, params_.data(), x, nullptr);
}

Tensor Network::forward(const Tensor& x, Tape& tape) const
{
    check_input(x);
    if (!tape.data)
        tape.data = std::make_unique<TapeData>();
    return run_forward(*impl_, params_.data(), x, tape.data.get());
}

std::vector<double> Network::backward(const Tape& tape, const Tensor& grad_logits, Tensor* grad_input) const
{
    if (!tape.data || tape.data->enc.size() != impl_->enc.size())
        throw ValueError("backward needs the tape of a forward pass through this network");
    const TapeData& t = *tape.data;
    const Impl& net = *impl_;
    const double* p = params_.data();
    if (grad_logits.n != t.head_in.n || grad_logits.c != static_cast<std::size_t>(descriptor_.num_classes)
        || grad_logits.extent != t.head_in.extent)
        throw ShapeError("logit gradient does not match the recorded forward pass");
    std::vector<double> g(params_.size(), 0.0);
    const std::size_t D = net.enc.size();

    Tensor dx = conv_backward(net.head, p, t.head_in, grad_logits, g.data(), true);
    std::vector<Tensor> dskip(D);
    for (std::size_t l = 0; l < D; ++l) {
        const Tensor dcat = block_backward(net, net.dec[l], p, t.dec[l], dx, g.data(), true);
        auto [ds, du] = split(dcat, static_cast<std::size_t>(net.up[l].cout));
        dskip[l] = std::move(ds);
        dx = up_backward(net.up[l], p, t.up_in[l], du, g.data());
    }
    dx = block_backward(net, net.bottleneck, p, t.bottleneck, dx, g.data(), true);
    for (std::size_t l = D; l-- > 0;) {
        dx = pool_backward(t.pool[l], dx);
        add_into(dx, dskip[l]);
        dx = block_backward(net, net.enc[l], p, t.enc[l], dx, g.data(), l > 0 || grad_input != nullptr);
    }
    if (grad_input)
        *grad_input = std::move(dx);
    return g;
}

Network build_net(const NetDescriptor& descriptor, std::uint64_t seed) { return Network(descriptor, seed); }

// ---------------------------------------------------------------------------

Tensor to_batch(std::span<const Image* const> images)
{
    if (images.empty())
        throw ShapeError("empty batch");
    const Extent e = images[0]->extent();
    Tensor x(images.size(), 1, e);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->extent() != e || images[i]->rank() != images[0]->rank())
            throw ShapeError("batch images differ in shape");
        std::copy(images[i]->values().begin(), images[i]->values().end(), x.plane(i, 0));
    }
    return x;
}

Tensor to_batch(const Image& image)
{
    const Image* one[] = {&image};
    return to_batch(one);
}

Logits sample_logits(const Tensor& logits, std::size_t i, int rank)
{
    const auto n = logits.c * logits.spatial();
    std::vector<double> v(logits.plane(i, 0), logits.plane(i, 0) + n);
    return Logits(static_cast<int>(logits.c), rank, logits.extent, std::move(v));
}

BatchLoss loss_and_gradient(const Network& net, std::span<const Image* const> images,
                            std::span<const LabelMask* const> targets, const LossFn& loss)
{
    if (images.size() != targets.size())
        throw ShapeError("images and targets must pair up");
    const Tensor x = to_batch(images);
    Tape tape;
    const Tensor out = net.forward(x, tape);
    Tensor dlogits(out.n, out.c, out.extent);
    const double inv_n = 1.0 / static_cast<double>(out.n);
    BatchLoss result;
    for (std::size_t i = 0; i < out.n; ++i) {
        const LossReport r = loss(sample_logits(out, i, images[i]->rank()), *targets[i]);
        result.value += r.value * inv_n;
        double* dst = dlogits.plane(i, 0);
        for (std::size_t j = 0; j < r.grad.size(); ++j)
            dst[j] = r.grad[j] * inv_n;
    }
    result.grad = net.backward(tape, dlogits);
    return result;
}

// ---------------------------------------------------------------------------

Schedule parse_schedule(std::string_view s)
{
    if (s == "cosine")
        return Schedule::cosine;
    if (s == "poly")
        return Schedule::poly;
    if (s == "constant")
        return Schedule::constant;
    throw ConfigError("unknown learning-rate schedule '" + std::string(s) + "'");
}

std::string_view to_string(Schedule s)
{
    switch (s) {
    case Schedule::cosine: return "cosine";
    case Schedule::poly: return "poly";
    case Schedule::constant: return "constant";
    }
    return "?";
}

void validate(const TrainConfig& c)
{
    if (!(c.lr0 >= 0.0) || !std::isfinite(c.lr0))
        throw ConfigError("learning rate must be finite and non-negative");
    if (c.epochs < 1)
        throw ConfigError("epochs must be at least 1");
    if (c.batch_size < 1)
        throw ConfigError("batch size must be at least 1");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0))
        throw ConfigError("momentum must be in [0, 1)");
    if (!(c.grad_clip >= 0.0))
        throw ConfigError("gradient clip must be non-negative");
    if (!(c.poly_power > 0.0))
        throw ConfigError("poly power must be positive");
}

double lr_at(const TrainConfig& config, int epoch)
{
    if (epoch < 0 || epoch > config.epochs)
        throw RangeError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) + "]");
    const double f = static_cast<double>(epoch) / static_cast<double>(config.epochs);
    switch (config.schedule) {
    case Schedule::cosine: return config.lr0 * (1.0 + std::cos(std::numbers::pi * f)) / 2.0;
    case Schedule::poly: return config.lr0 * std::pow(1.0 - f, config.poly_power);
    case Schedule::constant: return config.lr0;
    }
    return config.lr0;
}

TrainResult train(Network& net, std::span<const Sample> data, const TrainConfig& config, const EpochCallback& on_epoch)
{
    validate(config);
    if (data.empty())
        throw ValueError("training set is empty");
    const auto& d = net.descriptor();
    for (const auto& s : data) {
        if (s.mask.num_classes() != d.num_classes)
            throw ShapeError("sample '" + s.subject_id + "' has " + std::to_string(s.mask.num_classes())
                             + " classes, network predicts " + std::to_string(d.num_classes));
        if (s.image.extent() != s.mask.extent())
            throw ShapeError("sample '" + s.subject_id + "' image and mask differ in shape");
    }
    const LossFn loss = make_loss(config.loss);
    const bool momentum = config.optimizer == OptimizerKind::sgd_momentum;
    std::vector<double> velocity(momentum ? net.parameter_count() : 0, 0.0);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(hash_combine(config.seed, 0x747261696e));
    const auto bs = static_cast<std::size_t>(config.batch_size);
    auto params = net.parameters();

    TrainResult result;
    for (int e = 0; e < config.epochs; ++e) {
        const double lr = lr_at(config, e);
        rng.shuffle(order);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t stop = std::min(order.size(), start + bs);
            std::vector<const Image*> images;
            std::vector<const LabelMask*> targets;
            for (std::size_t k = start; k < stop; ++k) {
                images.push_back(&data[order[k]].image);
                targets.push_back(&data[order[k]].mask);
            }
            BatchLoss bl = loss_and_gradient(net, images, targets, loss);
            if (!std::isfinite(bl.value))
                throw ValueError("training diverged at epoch " + std::to_string(e));
            total += bl.value * static_cast<double>(stop - start);
            if (config.grad_clip > 0.0) {
                double sq = 0.0;
                for (double v : bl.grad)
                    sq += v * v;
                const double norm = std::sqrt(sq);
                if (norm > config.grad_clip)
                    for (auto& v : bl.grad)
                        v *= config.grad_clip / norm;
            }
            if (momentum) {
                for (std::size_t i = 0; i < params.size(); ++i) {
                    velocity[i] = config.momentum * velocity[i] - lr * bl.grad[i];
                    params[i] += velocity[i];
                }
            } else {
                for (std::size_t i = 0; i < params.size(); ++i)
                    params[i] -= lr * bl.grad[i];
            }
        }
        const EpochRecord rec{e, lr, total / static_cast<double>(data.size())};
        result.curve.push_back(rec);
        if (on_epoch)
            on_epoch(rec, net);
    }
    return result;
}

std::string loss_curve_csv(const TrainResult& result)
{
    std::ostringstream out;
    out.precision(17);
    out << "epoch,lr,loss\n";
    for (const auto& r : result.curve)
        out << r.epoch << ',' << r.lr << ',' << r.loss << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------

Logits infer_logits(const Network& net, const Image& image)
{
    const auto& d = net.descriptor();
    if (d.dims == 3 && image.rank() != 3)
        throw RankError("3D network needs a rank-3 volume");
    if (d.dims == 2 && image.rank() == 3) {
        const auto K = static_cast<std::size_t>(d.num_classes);
        const std::size_t plane = image.extent().plane();
        std::vector<double> v(K * image.size());
        for (std::size_t z = 0; z < image.depth(); ++z) {
            const Tensor out = net.forward(to_batch(extract_slice(image, z)));
            for (std::size_t c = 0; c < K; ++c)
                std::copy_n(out.plane(0, c), plane, v.begin() + static_cast<std::ptrdiff_t>(c * image.size() + z * plane));
        }
        return Logits(d.num_classes, 3, image.extent(), std::move(v));
    }
    return sample_logits(net.forward(to_batch(image)), 0, image.rank());
}

LabelMask predict(const Network& net, const Image& image) { return argmax(infer_logits(net, image)); }

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t checkpoint_version = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
    std::uint64_t get(int n)
    {
        if (pos_ + static_cast<std::size_t>(n) > bytes_.size())
            throw FormatError("checkpoint is truncated");
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i)
            v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const Network& net)
{
    const auto& d = net.descriptor();
    std::vector<std::uint8_t> out{'V', 'S', 'C', 'K'};
    put_u32(out, checkpoint_version);
    for (int v : {d.dims, d.depth, d.base_filters, static_cast<int>(d.norm), static_cast<int>(d.activation), d.in_channels,
                  d.num_classes})
        put_u32(out, static_cast<std::uint32_t>(v));
    put_u64(out, net.parameter_count());
    for (double v : net.parameters())
        put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

Network decode_checkpoint(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "VSCK", 4) != 0)
        throw FormatError("not a checkpoint (bad magic)");
    Reader r(bytes.subspan(4));
    const auto version = r.get(4);
    if (version != checkpoint_version)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    std::array<int, 7> f{};
    for (auto& v : f)
        v = static_cast<int>(static_cast<std::int32_t>(r.get(4)));
    if (f[3] < 0 || f[3] > 2 || f[4] < 0 || f[4] > 1)
        throw FormatError("checkpoint has an invalid normalization or activation code");
    NetDescriptor d{f[0], f[1], f[2], static_cast<NormKind>(f[3]), static_cast<Activation>(f[4]), f[5], f[6]};
    try {
        validate(d);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint descriptor invalid: ") + e.what());
    }
    const auto count = r.get(8);
    if (r.remaining() != count * 8)
        throw FormatError("checkpoint parameter payload has the wrong length");
    std::vector<double> params(count);
    for (auto& v : params)
        v = std::bit_cast<double>(r.get(8));
    try {
        return Network(d, std::move(params));
    } catch (const ShapeError& e) {
        throw FormatError(std::string("checkpoint does not match its descriptor: ") + e.what());
    }
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) { write_file_atomic(path, encode_checkpoint(net)); }

Network load_checkpoint(const std::filesystem::path& path)
{
    const auto bytes = read_file(path);
    return decode_checkpoint(bytes);
}

} // namespace volseg
