// Multi-scale structural similarity between a class probability map and its
// one-hot target, with the gradient pulled back through every scale.
//
// Per scale m the local statistics come from a normalised Gaussian window
// applied in "valid" mode; l(x) and cs(x) are the luminance and
// contrast-structure terms, L_m and CS_m their means over the window
// positions, and the loss is 1 - prod_m L_m^beta_m * CS_m^gamma_m. Scales are
// linked by 2x average pooling.

#include <cmath>
#include <string>

#include "volseg/losses.hpp"

namespace volseg {

namespace {

struct Field {
    Extent extent;
    std::vector<double> v;

    Field() = default;
    explicit Field(Extent e, double fill = 0.0) : extent(e), v(e.size(), fill) {}
    double& at(std::size_t z, std::size_t y, std::size_t x) { return v[(z * extent.height + y) * extent.width + x]; }
    double at(std::size_t z, std::size_t y, std::size_t x) const { return v[(z * extent.height + y) * extent.width + x]; }
};

std::vector<double> gaussian_window(int size, double sigma)
{
    std::vector<double> w(static_cast<std::size_t>(size));
    const double centre = (size - 1) / 2.0;
    double total = 0.0;
    for (int i = 0; i < size; ++i) {
        const double d = i - centre;
        w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += w[static_cast<std::size_t>(i)];
    }
    for (auto& x : w)
        x /= total;
    return w;
}

std::size_t& axis_len(Extent& e, int axis) { return axis == 0 ? e.depth : axis == 1 ? e.height : e.width; }
std::size_t axis_len(const Extent& e, int axis) { return axis == 0 ? e.depth : axis == 1 ? e.height : e.width; }

// Valid-mode correlation along one axis.
Field correlate_axis(const Field& in, const std::vector<double>& w, int axis)
{
    Extent oe = in.extent;
    axis_len(oe, axis) = axis_len(in.extent, axis) - w.size() + 1;
    Field out(oe);
    for (std::size_t z = 0; z < oe.depth; ++z)
        for (std::size_t y = 0; y < oe.height; ++y)
            for (std::size_t x = 0; x < oe.width; ++x) {
                double acc = 0.0;
                for (std::size_t k = 0; k < w.size(); ++k)
                    acc += w[k] * (axis == 0 ? in.at(z + k, y, x) : axis == 1 ? in.at(z, y + k, x) : in.at(z, y, x + k));
                out.at(z, y, x) = acc;
            }
    return out;
}

// Adjoint of correlate_axis: scatters each output back over its window.
Field correlate_axis_adjoint(const Field& out, const std::vector<double>& w, int axis, const Extent& in_extent)
{
    Field in(in_extent);
    const Extent oe = out.extent;
    for (std::size_t z = 0; z < oe.depth; ++z)
        for (std::size_t y = 0; y < oe.height; ++y)
            for (std::size_t x = 0; x < oe.width; ++x) {
                const double g = out.at(z, y, x);
                for (std::size_t k = 0; k < w.size(); ++k) {
                    double& dst = axis == 0 ? in.at(z + k, y, x) : axis == 1 ? in.at(z, y + k, x) : in.at(z, y, x + k);
                    dst += w[k] * g;
                }
            }
    return in;
}

class SeparableFilter {
public:
    SeparableFilter(std::vector<double> w, bool volumetric) : w_(std::move(w))
    {
        if (volumetric)
            axes_.push_back(0);
        axes_.push_back(1);
        axes_.push_back(2);
    }

    Field apply(Field f) const
    {
        for (int a : axes_)
            f = correlate_axis(f, w_, a);
        return f;
    }

    Field adjoint(Field g, const Extent& in_extent) const
    {
        std::vector<Extent> extents{in_extent};
        for (int a : axes_) {
            Extent e = extents.back();
            axis_len(e, a) -= w_.size() - 1;
            extents.push_back(e);
        }
        for (std::size_t i = axes_.size(); i-- > 0;)
            g = correlate_axis_adjoint(g, w_, axes_[i], extents[i]);
        return g;
    }

    const std::vector<int>& axes() const { return axes_; }

private:
    std::vector<double> w_;
    std::vector<int> axes_;
};

Extent pooled_extent(const Extent& e, bool volumetric)
{
    return {volumetric ? e.depth / 2 : e.depth, e.height / 2, e.width / 2};
}

Field avg_pool(const Field& in, bool volumetric)
{
    const Extent oe = pooled_extent(in.extent, volumetric);
    const std::size_t fz = volumetric ? 2 : 1;
    const double scale = 1.0 / static_cast<double>(fz * 4);
    Field out(oe);
    for (std::size_t z = 0; z < oe.depth; ++z)
        for (std::size_t y = 0; y < oe.height; ++y)
            for (std::size_t x = 0; x < oe.width; ++x) {
                double acc = 0.0;
                for (std::size_t a = 0; a < fz; ++a)
                    for (std::size_t b = 0; b < 2; ++b)
                        for (std::size_t c = 0; c < 2; ++c)
                            acc += in.at(z * fz + a, y * 2 + b, x * 2 + c);
                out.at(z, y, x) = acc * scale;
            }
    return out;
}

Field avg_pool_adjoint(const Field& g, bool volumetric, const Extent& in_extent)
{
    const std::size_t fz = volumetric ? 2 : 1;
    const double scale = 1.0 / static_cast<double>(fz * 4);
    Field in(in_extent);
    for (std::size_t z = 0; z < g.extent.depth; ++z)
        for (std::size_t y = 0; y < g.extent.height; ++y)
            for (std::size_t x = 0; x < g.extent.width; ++x)
                for (std::size_t a = 0; a < fz; ++a)
                    for (std::size_t b = 0; b < 2; ++b)
                        for (std::size_t c = 0; c < 2; ++c)
                            in.at(z * fz + a, y * 2 + b, x * 2 + c) += g.at(z, y, x) * scale;
    return in;
}

Field product(const Field& a, const Field& b)
{
    Field out(a.extent);
    for (std::size_t i = 0; i < a.v.size(); ++i)
        out.v[i] = a.v[i] * b.v[i];
    return out;
}

bool integral(double e) { return e == std::floor(e); }

struct ScaleStats {
    Field p, g;
    Field mu_p, mu_g, e_pp, e_gg, e_pg;
    double lum = 0.0; // mean luminance term
    double cs = 0.0;  // mean contrast-structure term, after clamping
    bool cs_clamped = false;
};

constexpr double cs_floor = 1e-8;

} // namespace

int max_ms_ssim_scales(const Extent& extent, int rank, int window)
{
    const bool volumetric = rank == 3 && extent.depth > 1;
    std::size_t smallest = std::min(extent.height, extent.width);
    if (volumetric)
        smallest = std::min(smallest, extent.depth);
    int m = 0;
    std::size_t needed = static_cast<std::size_t>(window);
    while (smallest >= needed) {
        ++m;
        needed *= 2;
    }
    return m;
}

ProbLoss prob_ms_ssim(const ProbMap& probs, const LabelMask& target, const MsSsimParams& params)
{
    if (probs.rank() != target.rank() || probs.extent() != target.extent())
        throw ShapeError("probabilities and target spatial shapes differ");
    if (probs.channels() < 2)
        throw ShapeError("losses need at least two classes");
    const int m_scales = params.num_scales;
    if (m_scales < 1)
        throw ValueError("MS-SSIM needs at least one scale");
    if (!(params.c1 > 0.0 && params.c2 > 0.0))
        throw ValueError("MS-SSIM stabilisers c1 and c2 must be positive");
    if (params.window < 1 || !(params.sigma > 0.0))
        throw ValueError("MS-SSIM window must be non-empty with positive sigma");
    const int feasible = max_ms_ssim_scales(probs.extent(), probs.rank(), params.window);
    if (feasible < m_scales)
        throw ShapeError("image too small for " + std::to_string(m_scales) + " MS-SSIM scales with window "
                         + std::to_string(params.window) + "; at most " + std::to_string(feasible) + " scale(s) fit");
    auto exponents = [&](const std::vector<double>& given, const char* name) {
        if (given.empty())
            return std::vector<double>(static_cast<std::size_t>(m_scales), 1.0 / m_scales);
        if (static_cast<int>(given.size()) != m_scales)
            throw ValueError(std::string("MS-SSIM ") + name + " exponents must have one entry per scale");
        return given;
    };
    const auto beta = exponents(params.beta, "beta");
    const auto gamma = exponents(params.gamma, "gamma");

    const bool volumetric = probs.rank() == 3 && probs.extent().depth > 1;
    const SeparableFilter filter(gaussian_window(params.window, params.sigma), volumetric);
    const double c1 = params.c1;
    const double c2 = params.c2;
    const int k = probs.channels();
    const double class_scale = 1.0 / static_cast<double>(k - 1);
    ProbLoss out{0.0, ProbMap(k, probs.rank(), probs.extent(), 0.0)};

    for (int c = 1; c < k; ++c) {
        std::vector<ScaleStats> scales(static_cast<std::size_t>(m_scales));
        Field p(probs.extent()), g(probs.extent());
        for (std::size_t s = 0; s < p.v.size(); ++s) {
            p.v[s] = probs.at(c, s);
            g.v[s] = target[s] == c ? 1.0 : 0.0;
        }

        double total = 1.0;
        for (int m = 0; m < m_scales; ++m) {
            auto& st = scales[static_cast<std::size_t>(m)];
            if (m > 0) {
                p = avg_pool(scales[static_cast<std::size_t>(m - 1)].p, volumetric);
                g = avg_pool(scales[static_cast<std::size_t>(m - 1)].g, volumetric);
            }
            st.p = p;
            st.g = g;
            st.mu_p = filter.apply(p);
            st.mu_g = filter.apply(g);
            st.e_pp = filter.apply(product(p, p));
            st.e_gg = filter.apply(product(g, g));
            st.e_pg = filter.apply(product(p, g));
            const std::size_t q = st.mu_p.v.size();
            double lum = 0.0, cs = 0.0;
            for (std::size_t i = 0; i < q; ++i) {
                const double mp = st.mu_p.v[i], mg = st.mu_g.v[i];
                const double vp = st.e_pp.v[i] - mp * mp;
                const double vg = st.e_gg.v[i] - mg * mg;
                const double cov = st.e_pg.v[i] - mp * mg;
                lum += (2.0 * mp * mg + c1) / (mp * mp + mg * mg + c1);
                cs += (2.0 * cov + c2) / (vp + vg + c2);
            }
            st.lum = lum / static_cast<double>(q);
            st.cs = cs / static_cast<double>(q);
            const double gm = gamma[static_cast<std::size_t>(m)];
            // a negative mean CS has no real fractional power
            if (st.cs < cs_floor && !integral(gm)) {
                st.cs = cs_floor;
                st.cs_clamped = true;
            }
            total *= std::pow(st.lum, beta[static_cast<std::size_t>(m)]) * std::pow(st.cs, gm);
        }
        out.value += class_scale * (1.0 - total);

        // Backward, coarsest scale first so pooled gradients flow down.
        Field carry;
        for (int m = m_scales - 1; m >= 0; --m) {
            const auto& st = scales[static_cast<std::size_t>(m)];
            const double bm = beta[static_cast<std::size_t>(m)];
            const double gm = gamma[static_cast<std::size_t>(m)];
            const std::size_t q = st.mu_p.v.size();
            // d(total)/d(L_m) and d(total)/d(CS_m), spread over the q window positions.
            // Written as products of the other factors so a zero CS_m needs no division.
            double others = 1.0;
            for (int j = 0; j < m_scales; ++j)
                if (j != m) {
                    const auto& o = scales[static_cast<std::size_t>(j)];
                    others *= std::pow(o.lum, beta[static_cast<std::size_t>(j)])
                        * std::pow(o.cs, gamma[static_cast<std::size_t>(j)]);
                }
            const double lum_term = std::pow(st.lum, bm);
            const double cs_term = std::pow(st.cs, gm);
            const double d_lum = others * cs_term * bm * std::pow(st.lum, bm - 1.0) / static_cast<double>(q);
            const double d_cs = st.cs_clamped ? 0.0
                                              : others * lum_term * gm * std::pow(st.cs, gm - 1.0) / static_cast<double>(q);

            Field a_mu_p(st.mu_p.extent), a_pp(st.mu_p.extent), a_pg(st.mu_p.extent);
            for (std::size_t i = 0; i < q; ++i) {
                const double mp = st.mu_p.v[i], mg = st.mu_g.v[i];
                const double vp = st.e_pp.v[i] - mp * mp;
                const double vg = st.e_gg.v[i] - mg * mg;
                const double cov = st.e_pg.v[i] - mp * mg;
                const double n1 = 2.0 * mp * mg + c1, d1 = mp * mp + mg * mg + c1;
                const double n2 = 2.0 * cov + c2, d2 = vp + vg + c2;
                const double dl_dmp = (2.0 * mg * d1 - n1 * 2.0 * mp) / (d1 * d1);
                const double dcs_dcov = 2.0 / d2;
                const double dcs_dvp = -n2 / (d2 * d2);
                a_mu_p.v[i] = d_lum * dl_dmp + d_cs * (dcs_dvp * (-2.0 * mp) + dcs_dcov * (-mg));
                a_pp.v[i] = d_cs * dcs_dvp;
                a_pg.v[i] = d_cs * dcs_dcov;
            }
            const Extent ext = st.p.extent;
            const Field b_mu = filter.adjoint(a_mu_p, ext);
            const Field b_pp = filter.adjoint(a_pp, ext);
            const Field b_pg = filter.adjoint(a_pg, ext);
            Field grad(ext);
            for (std::size_t i = 0; i < grad.v.size(); ++i)
                grad.v[i] = b_mu.v[i] + 2.0 * st.p.v[i] * b_pp.v[i] + st.g.v[i] * b_pg.v[i];
            if (m + 1 < m_scales) {
                const Field pooled = avg_pool_adjoint(carry, volumetric, ext);
                for (std::size_t i = 0; i < grad.v.size(); ++i)
                    grad.v[i] += pooled.v[i];
            }
            carry = std::move(grad);
        }
        for (std::size_t s = 0; s < carry.v.size(); ++s)
            out.grad.at(c, s) = -class_scale * carry.v[s];
    }
    return out;
}

} // namespace volseg
