#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ganseg/core/autodiff.hpp"
#include "ganseg/core/tensor.hpp"

namespace ganseg::losses {

/// Training regimes. `supervised` is the plain segmentation baseline; the GAN
/// regimes differ in the generator objective.
enum class GanMode { supervised, normal_gan, fm_gan, bad_gan };

inline const char* to_string(GanMode m) {
    switch (m) {
        case GanMode::supervised: return "supervised";
        case GanMode::normal_gan: return "normal_gan";
        case GanMode::fm_gan: return "fm_gan";
        case GanMode::bad_gan: return "bad_gan";
    }
    return "?";
}

inline std::optional<GanMode> parse_mode(const std::string& s) {
    if (s == "supervised") return GanMode::supervised;
    if (s == "normal_gan") return GanMode::normal_gan;
    if (s == "fm_gan") return GanMode::fm_gan;
    if (s == "bad_gan") return GanMode::bad_gan;
    return std::nullopt;
}

/// Mean activation of a tapped discriminator layer, kept on the tape so the
/// generator objective can differentiate through it.
template <typename T>
struct FeatureSummary {
    Var<T> mean_activation; // (C)
    std::string tap_id;
};

/// Diagonal Gaussian q(z|x) with variance bounded by theta.
template <typename T>
struct GaussianPosterior {
    Var<T> mu;    // (B, d)
    Var<T> sigma; // (B, d), entries in (0, theta]
    T theta = T(1);
};

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite())
        throw invalid_input_error(std::string(what) + ": non-finite entries in input");
}

namespace detail {

template <typename T>
std::size_t class_count(const Tensor<T>& logits, const char* what) {
    if (logits.rank() < 2)
        throw shape_error(std::string(what) + ": logits need a class axis, got " +
                          ganseg::to_string(logits.shape()));
    return logits.shape().back();
}

} // namespace detail

/// (K+1)-way softmax of the augmented per-voxel logit vector [l_1..l_K, 0].
/// Output shape appends one channel: the last channel is the fake-class
/// probability 1/(Z+1).
template <typename T>
Tensor<T> softmax_kplus1(const Tensor<T>& logits) {
    require_finite(logits, "softmax_kplus1");
    const std::size_t k = detail::class_count(logits, "softmax_kplus1");
    const std::size_t rows = logits.size() / k;
    Shape os = logits.shape();
    os.back() = k + 1;
    Tensor<T> out(os);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* l = logits.data() + r * k;
        T* o = out.data() + r * (k + 1);
        T m = T(0);
        for (std::size_t j = 0; j < k; ++j) m = std::max(m, l[j]);
        T denom = std::exp(-m);
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(l[j] - m);
        for (std::size_t j = 0; j < k; ++j) o[j] = std::exp(l[j] - m) / denom;
        o[k] = std::exp(-m) / denom;
    }
    return out;
}

/// Z_i = sum_k exp(l_ik), computed with a max shift. Shape drops the class axis.
template <typename T>
Tensor<T> partition(const Tensor<T>& logits) {
    require_finite(logits, "partition");
    const std::size_t k = detail::class_count(logits, "partition");
    const std::size_t rows = logits.size() / k;
    Shape os(logits.shape().begin(), logits.shape().end() - 1);
    if (os.empty()) os = Shape{1};
    Tensor<T> out(os);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* l = logits.data() + r * k;
        T m = l[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, l[j]);
        T s = T(0);
        for (std::size_t j = 0; j < k; ++j) s += std::exp(l[j] - m);
        out[r] = std::exp(m + std::log(s));
    }
    return out;
}

/// Mean cross-entropy of true-class probabilities under the augmented
/// softmax: per voxel, log(Z+1) - l_y. Optional mask re-weights voxels; the
/// mean is then over mask weight.
template <typename T>
Var<T> labeled_loss(const Var<T>& logits, const std::vector<std::int64_t>& labels,
                    const Tensor<T>* weight_mask = nullptr) {
    require_finite(logits.value(), "labeled_loss");
    const std::size_t k = detail::class_count(logits.value(), "labeled_loss");
    if (labels.size() != logits.value().size() / k)
        throw shape_error("labeled_loss: label count " + std::to_string(labels.size()) +
                          " vs voxel count " + std::to_string(logits.value().size() / k));
    Var<T> per_voxel = ad::sub(ad::logsumexp1p_last(logits), ad::gather_last(logits, labels));
    if (!weight_mask) return ad::mean(per_voxel);
    Tensor<T> w = *weight_mask;
    if (w.size() != labels.size())
        throw shape_error("labeled_loss: weight mask size mismatch");
    return ad::weighted_mean(per_voxel, w.reshaped(per_voxel.value().shape()));
}

/// Unlabeled-real term: per voxel -log[Z/(Z+1)] = log(Z+1) - log(Z), averaged.
template <typename T>
Var<T> unlabeled_loss(const Var<T>& logits) {
    require_finite(logits.value(), "unlabeled_loss");
    detail::class_count(logits.value(), "unlabeled_loss");
    return ad::mean(ad::sub(ad::logsumexp1p_last(logits), ad::logsumexp_last(logits)));
}

/// Fake term: per voxel -log[1/(Z+1)] = log(Z+1), averaged.
template <typename T>
Var<T> fake_loss(const Var<T>& logits) {
    require_finite(logits.value(), "fake_loss");
    detail::class_count(logits.value(), "fake_loss");
    return ad::mean(ad::logsumexp1p_last(logits));
}

template <typename T>
struct DiscriminatorLoss {
    Var<T> total;
    T labeled = T(0);
    T unlabeled = T(0);
    T fake = T(0);
};

/// Three-term discriminator objective. Absent batches contribute exactly zero
/// (supervised mode passes only the labeled batch).
template <typename T>
DiscriminatorLoss<T> discriminator_loss(const std::optional<Var<T>>& labeled_logits,
                                        const std::vector<std::int64_t>& labels,
                                        const std::optional<Var<T>>& unlabeled_logits,
                                        const std::optional<Var<T>>& fake_logits,
                                        const Tensor<T>* weight_mask = nullptr) {
    DiscriminatorLoss<T> out;
    Var<T> total = Var<T>::scalar(T(0));
    if (labeled_logits && labeled_logits->value().size() > 0) {
        Var<T> l = labeled_loss(*labeled_logits, labels, weight_mask);
        out.labeled = l.item();
        total = ad::add(total, l);
    }
    if (unlabeled_logits && unlabeled_logits->value().size() > 0) {
        Var<T> l = unlabeled_loss(*unlabeled_logits);
        out.unlabeled = l.item();
        total = ad::add(total, l);
    }
    if (fake_logits && fake_logits->value().size() > 0) {
        Var<T> l = fake_loss(*fake_logits);
        out.fake = l.item();
        total = ad::add(total, l);
    }
    out.total = total;
    return out;
}

/// Squared L2 distance between the mean tapped activations of a real and a
/// generated batch.
template <typename T>
Var<T> feature_matching_loss(const FeatureSummary<T>& real, const FeatureSummary<T>& fake) {
    if (real.tap_id != fake.tap_id)
        throw contract_error("feature_matching_loss: tap mismatch '" + real.tap_id +
                             "' vs '" + fake.tap_id + "'");
    if (!real.mean_activation.value().same_shape(fake.mean_activation.value()))
        throw contract_error("feature_matching_loss: summary dimension mismatch");
    return ad::sum(ad::square(ad::sub(real.mean_activation, fake.mean_activation)));
}

/// Variational upper bound on -H(p_G): batch mean of -log q(z|x) for the
/// diagonal Gaussian posterior.
template <typename T>
Var<T> negative_entropy_bound(const Var<T>& z, const GaussianPosterior<T>& q) {
    const auto& zs = z.value().shape();
    if (zs.size() != 2 || !z.value().same_shape(q.mu.value()) ||
        !z.value().same_shape(q.sigma.value()))
        throw contract_error("negative_entropy_bound: z/mu/sigma must share shape (B,d)");
    const Tensor<T>& sig = q.sigma.value();
    for (std::size_t i = 0; i < sig.size(); ++i)
        if (!(sig[i] > T(0)) || sig[i] > q.theta)
            throw contract_error("negative_entropy_bound: sigma outside (0, theta]");
    const std::size_t batch = zs[0];
    // per element: 0.5*log(2*pi) + log(sigma) + (z-mu)^2 / (2*sigma^2)
    const T half_log_2pi = T(0.5) * std::log(T(2) * T(3.14159265358979323846));
    Var<T> log_sig = ad::add_scalar(ad::log(q.sigma), half_log_2pi);
    Var<T> diff = ad::sub(z, q.mu);
    Var<T> quad = ad::div(ad::square(diff), ad::scale(ad::square(q.sigma), T(2)));
    Var<T> elem = ad::add(log_sig, quad);
    return ad::scale(ad::sum(elem), T(1) / static_cast<T>(batch));
}

/// Generator objective for the selected regime:
///   normal_gan: -fake_loss (the generator climbs the discriminator's fake term)
///   fm_gan:     feature matching
///   bad_gan:    feature matching + lambda_ent * negative-entropy bound
template <typename T>
Var<T> generator_loss(GanMode mode, const std::optional<Var<T>>& fake_logits,
                      const std::optional<FeatureSummary<T>>& real_summary,
                      const std::optional<FeatureSummary<T>>& fake_summary,
                      const std::optional<Var<T>>& z,
                      const std::optional<GaussianPosterior<T>>& posterior,
                      T lambda_ent = T(1)) {
    switch (mode) {
        case GanMode::supervised:
            throw contract_error("generator_loss: supervised mode has no generator");
        case GanMode::normal_gan:
            if (!fake_logits) throw contract_error("generator_loss: normal_gan needs fake logits");
            return ad::neg(fake_loss(*fake_logits));
        case GanMode::fm_gan:
            if (!real_summary || !fake_summary)
                throw contract_error("generator_loss: fm_gan needs feature summaries");
            return feature_matching_loss(*real_summary, *fake_summary);
        case GanMode::bad_gan: {
            if (!real_summary || !fake_summary)
                throw contract_error("generator_loss: bad_gan needs feature summaries");
            Var<T> fm = feature_matching_loss(*real_summary, *fake_summary);
            if (lambda_ent == T(0)) return fm;
            if (!z || !posterior)
                throw contract_error("generator_loss: bad_gan needs z and posterior");
            return ad::add(fm, ad::scale(negative_entropy_bound(*z, *posterior), lambda_ent));
        }
    }
    throw contract_error("generator_loss: unknown mode");
}

} // namespace ganseg::losses
