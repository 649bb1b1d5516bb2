#ifndef HOPFLOW_OBJECTIVES_HPP
#define HOPFLOW_OBJECTIVES_HPP

// Training losses: cross-entropy on logits, the Barlow-Twins-style feature
// decorrelation loss between two stochastic views, and a supervised contrastive
// loss over both views. Each is a single tape op with a hand-written adjoint.

#include <cmath>
#include <span>

#include "autodiff.hpp"

namespace hopflow {

enum class SslKind { none, barlow, scl };

inline SslKind parse_ssl_kind(std::string_view s)
{
    if (s == "none") return SslKind::none;
    if (s == "barlow") return SslKind::barlow;
    if (s == "scl") return SslKind::scl;
    throw ConfigError("unknown ssl_kind '" + std::string(s) + "' (expected none, barlow or scl)");
}

inline std::string to_string(SslKind k)
{
    switch (k) {
    case SslKind::none: return "none";
    case SslKind::barlow: return "barlow";
    case SslKind::scl: return "scl";
    }
    return "?";
}

/// Auxiliary-objective settings.
///
/// The Barlow loss compares the two views' flattened post-interaction hop
/// representations (b x (L+1)d); the contrastive loss compares fused node
/// embeddings (b x d) from both views, stacked into 2b rows.
struct LossConfig {
    SslKind ssl_kind = SslKind::none;
    double lambda = 5e-4;  // weight of the auxiliary loss
    double alpha = 0.1;    // off-diagonal (redundancy) weight in the Barlow loss
    double tau = 0.5;      // contrastive temperature
    bool scl_normalize = true;
    double barlow_eps = 1e-5;

    void validate() const
    {
        if (lambda < 0) throw ConfigError("loss.lambda must be >= 0");
        if (alpha < 0) throw ConfigError("loss.alpha must be >= 0");
        if (!(tau > 0)) throw ConfigError("loss.tau must be > 0");
    }
};

namespace ad {

/// Mean over labeled rows of -log softmax(logits)[label], via log-sum-exp.
/// Rows whose label is kUnlabeled are excluded.
template <class Real>
Var cross_entropy(Tape<Real>& t, Var logits, std::span<const std::int32_t> labels)
{
    const auto& s = t.shape(logits);
    detail::require(s.size() == 2 && s[0] == labels.size(), "cross_entropy: logits must be b x c with b labels");
    const std::size_t b = s[0], c = s[1];
    const auto& lv = t.value(logits);
    std::vector<Real> probs(b * c, Real(0));
    std::vector<std::uint32_t> rows;
    double total = 0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] == kUnlabeled) continue;
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw ConfigError("cross_entropy: label " + std::to_string(labels[i]) + " >= num_classes " + std::to_string(c));
        const Real* row = &lv[i * c];
        Real mx = *std::max_element(row, row + c);
        Real z = 0;
        for (std::size_t k = 0; k < c; ++k) z += std::exp(row[k] - mx);
        const Real lse = mx + std::log(z);
        total += static_cast<double>(lse - row[labels[i]]);
        for (std::size_t k = 0; k < c; ++k) probs[i * c + k] = std::exp(row[k] - lse);
        rows.push_back(static_cast<std::uint32_t>(i));
    }
    if (rows.empty()) throw ConfigError("cross_entropy: no labeled rows in mask");
    const Real count = static_cast<Real>(rows.size());
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    auto& rec = t.emit(OpKind::cross_entropy, {}, {static_cast<Real>(total / static_cast<double>(rows.size()))}, {logits},
                       [c, count, lab = std::move(lab)](Tape<Real>& t, const auto& r) {
                           const Real g = t.grad_buffer(r.output)[0] / count;
                           auto& gl = t.grad_buffer(r.inputs[0]);
                           for (auto i : r.index) {
                               for (std::size_t k = 0; k < c; ++k) gl[i * c + k] += g * r.saved[i * c + k];
                               gl[i * c + static_cast<std::size_t>(lab[i])] -= g;
                           }
                       });
    rec.saved = std::move(probs);
    rec.index = std::move(rows);
    return rec.output;
}

namespace detail {

/// Column-standardizes an n x D matrix with biased variance; returns 1/sqrt(var + eps) per column.
template <class Real>
std::vector<Real> standardize_columns(const std::vector<Real>& x, std::size_t n, std::size_t D, double eps, std::vector<Real>& z)
{
    std::vector<double> mean(D, 0.0), var(D, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < D; ++j) mean[j] += x[i * D + j];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            double dlt = x[i * D + j] - mean[j];
            var[j] += dlt * dlt;
        }
    std::vector<Real> inv_std(D);
    for (std::size_t j = 0; j < D; ++j) inv_std[j] = static_cast<Real>(1.0 / std::sqrt(var[j] / static_cast<double>(n) + eps));
    z.resize(n * D);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < D; ++j) z[i * D + j] = static_cast<Real>(x[i * D + j] - mean[j]) * inv_std[j];
    return inv_std;
}

/// Adjoint of column standardization: dx = inv_std * (dz - mean(dz) - z * mean(dz * z)).
template <class Real>
void standardize_columns_backward(const Real* z, const Real* dz, const Real* inv_std, std::size_t n, std::size_t D, Real* dx)
{
    std::vector<double> m1(D, 0.0), m2(D, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            m1[j] += dz[i * D + j];
            m2[j] += static_cast<double>(dz[i * D + j]) * z[i * D + j];
        }
    for (std::size_t j = 0; j < D; ++j) {
        m1[j] /= static_cast<double>(n);
        m2[j] /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < D; ++j)
            dx[i * D + j] += inv_std[j] * static_cast<Real>(dz[i * D + j] - m1[j] - z[i * D + j] * m2[j]);
}

} // namespace detail

/// Cross-correlation C = Za^T Zb / b of the column-standardized views, and
/// loss = sum_i (1 - C_ii)^2 + alpha * sum_{i != j} C_ij^2. Inputs are b x D, or
/// b x (L+1) x d views that are flattened first.
template <class Real>
Var barlow_loss(Tape<Real>& t, Var ha, Var hb, double alpha, double eps = 1e-5)
{
    if (t.shape(ha).size() == 3 && t.shape(hb).size() == 3) {
        ha = flatten(t, ha);
        hb = flatten(t, hb);
    }
    const auto& s = t.shape(ha);
    ad::detail::require(s.size() == 2 && t.shape(hb) == s, "barlow_loss: views must share a b x D shape");
    const std::size_t b = s[0], D = s[1];
    if (b < 2) throw ConfigError("barlow_loss: need at least 2 rows per view, got " + std::to_string(b));
    std::vector<Real> za, zb;
    auto isa = detail::standardize_columns(t.value(ha), b, D, eps, za);
    auto isb = detail::standardize_columns(t.value(hb), b, D, eps, zb);
    RowMat<Real> C = ConstMatMap<Real>(za.data(), b, D).transpose() * ConstMatMap<Real>(zb.data(), b, D);
    C /= static_cast<Real>(b);
    double loss = 0;
    for (std::size_t i = 0; i < D; ++i)
        for (std::size_t j = 0; j < D; ++j) {
            const double cij = C(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            loss += i == j ? (1.0 - cij) * (1.0 - cij) : alpha * cij * cij;
        }
    auto& rec = t.emit(OpKind::barlow, {}, {static_cast<Real>(loss)}, {ha, hb}, [b, D, alpha](Tape<Real>& t, const auto& r) {
        const Real up = t.grad_buffer(r.output)[0];
        const Real* za = r.saved.data();
        const Real* zb = za + b * D;
        const Real* isa = zb + b * D;
        const Real* isb = isa + D;
        RowMat<Real> G = ConstMatMap<Real>(za, b, D).transpose() * ConstMatMap<Real>(zb, b, D);
        G /= static_cast<Real>(b);
        for (Eigen::Index i = 0; i < G.rows(); ++i)
            for (Eigen::Index j = 0; j < G.cols(); ++j)
                G(i, j) = up * (i == j ? Real(-2) * (Real(1) - G(i, j)) : static_cast<Real>(2 * alpha) * G(i, j));
        G /= static_cast<Real>(b);
        if (t.requires_grad(r.inputs[0])) {
            RowMat<Real> dza = ConstMatMap<Real>(zb, b, D) * G.transpose();
            detail::standardize_columns_backward(za, dza.data(), isa, b, D, t.grad_buffer(r.inputs[0]).data());
        }
        if (t.requires_grad(r.inputs[1])) {
            RowMat<Real> dzb = ConstMatMap<Real>(za, b, D) * G;
            detail::standardize_columns_backward(zb, dzb.data(), isb, b, D, t.grad_buffer(r.inputs[1]).data());
        }
    });
    rec.saved.reserve(2 * b * D + 2 * D);
    rec.saved.insert(rec.saved.end(), za.begin(), za.end());
    rec.saved.insert(rec.saved.end(), zb.begin(), zb.end());
    rec.saved.insert(rec.saved.end(), isa.begin(), isa.end());
    rec.saved.insert(rec.saved.end(), isb.begin(), isb.end());
    return rec.output;
}

/// Supervised contrastive loss over n embeddings (both views stacked). For each anchor i
/// with at least one positive: -(1/|P(i)|) sum_p log softmax_{a != i}(s_ia / tau)[p],
/// summed over anchors. s is cosine similarity when `normalize`, else the raw dot product.
/// Rows labeled kUnlabeled take no part. Anchors without positives are skipped.
template <class Real>
Var supcon_loss(Tape<Real>& t, Var z, std::span<const std::int32_t> labels, double tau, bool normalize = true,
                std::size_t* skipped_anchors = nullptr)
{
    if (!(tau > 0)) throw ConfigError("supcon_loss: tau must be > 0");
    const auto& s = t.shape(z);
    ad::detail::require(s.size() == 2 && s[0] == labels.size(), "supcon_loss: z must be n x d with n labels");
    const std::size_t n = s[0], d = s[1];
    const auto& zv = t.value(z);
    std::vector<Real> zn(zv);
    std::vector<Real> norms(n, Real(1));
    if (normalize)
        for (std::size_t i = 0; i < n; ++i) {
            Real sq = 0;
            for (std::size_t c = 0; c < d; ++c) sq += zv[i * d + c] * zv[i * d + c];
            norms[i] = std::max(std::sqrt(sq), Real(1e-12));
            for (std::size_t c = 0; c < d; ++c) zn[i * d + c] = zv[i * d + c] / norms[i];
        }
    RowMat<Real> S = ConstMatMap<Real>(zn.data(), n, d) * ConstMatMap<Real>(zn.data(), n, d).transpose();
    S /= static_cast<Real>(tau);

    // coefficient matrix dL/dS, filled in the forward pass
    RowMat<Real> G = RowMat<Real>::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    double loss = 0;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] == kUnlabeled) continue;
        const auto I = static_cast<Eigen::Index>(i);
        std::size_t npos = 0;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t a = 0; a < n; ++a) {
            if (a == i || labels[a] == kUnlabeled) continue;
            mx = std::max(mx, S(I, static_cast<Eigen::Index>(a)));
            if (labels[a] == labels[i]) ++npos;
        }
        if (npos == 0) {
            ++skipped;
            continue;
        }
        double zsum = 0;
        for (std::size_t a = 0; a < n; ++a)
            if (a != i && labels[a] != kUnlabeled) zsum += std::exp(static_cast<double>(S(I, static_cast<Eigen::Index>(a)) - mx));
        const double lse = mx + std::log(zsum);
        double pos_mean = 0;
        for (std::size_t a = 0; a < n; ++a) {
            if (a == i || labels[a] == kUnlabeled) continue;
            const auto A = static_cast<Eigen::Index>(a);
            G(I, A) += static_cast<Real>(std::exp(static_cast<double>(S(I, A)) - lse));
            if (labels[a] == labels[i]) {
                pos_mean += S(I, A);
                G(I, A) -= Real(1) / static_cast<Real>(npos);
            }
        }
        loss += lse - pos_mean / static_cast<double>(npos);
    }
    if (skipped) warn("supcon_loss: " + std::to_string(skipped) + " anchor(s) without positives skipped");
    if (skipped_anchors) *skipped_anchors = skipped;

    auto& rec = t.emit(OpKind::supcon, {}, {static_cast<Real>(loss)}, {z}, [n, d, tau, normalize](Tape<Real>& t, const auto& r) {
        const Real up = t.grad_buffer(r.output)[0];
        const Real* zn = r.saved.data();
        const Real* norms = zn + n * d;
        ConstMatMap<Real> G(norms + n, n, n);
        RowMat<Real> dzn = (G + G.transpose()) * ConstMatMap<Real>(zn, n, d);
        dzn *= up / static_cast<Real>(tau);
        auto& gz = t.grad_buffer(r.inputs[0]);
        for (std::size_t i = 0; i < n; ++i) {
            const auto I = static_cast<Eigen::Index>(i);
            if (!normalize) {
                for (std::size_t c = 0; c < d; ++c) gz[i * d + c] += dzn(I, static_cast<Eigen::Index>(c));
                continue;
            }
            Real dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += dzn(I, static_cast<Eigen::Index>(c)) * zn[i * d + c];
            for (std::size_t c = 0; c < d; ++c)
                gz[i * d + c] += (dzn(I, static_cast<Eigen::Index>(c)) - zn[i * d + c] * dot) / norms[i];
        }
    });
    rec.saved.reserve(n * d + n + n * n);
    rec.saved.insert(rec.saved.end(), zn.begin(), zn.end());
    rec.saved.insert(rec.saved.end(), norms.begin(), norms.end());
    rec.saved.insert(rec.saved.end(), G.data(), G.data() + n * n);
    return rec.output;
}

/// ce + lambda * ssl.
template <class Real>
Var total_loss(Tape<Real>& t, Var ce, Var ssl, double lambda)
{
    if (!ssl.valid() || lambda == 0.0) return ce;
    return add(t, ce, scale(t, ssl, static_cast<Real>(lambda)));
}

} // namespace ad

/// Plain-value wrappers for callers that do not need gradients.
template <class Real>
double cross_entropy_value(const Tensor<Real>& logits, std::span<const std::int32_t> labels)
{
    ad::Tape<Real> t;
    return static_cast<double>(t.scalar(ad::cross_entropy(t, t.constant(logits), labels)));
}

} // namespace hopflow

#endif
