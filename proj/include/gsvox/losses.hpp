// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/core.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace gsvox {

// Rows with a norm at or below this are excluded from the cosine loss
// (exclusion is counted, not silently epsilon-regularized).
inline constexpr double kZeroNormThreshold = 1e-12;

/// Scalar loss with its analytic gradient w.r.t. the prediction.
struct LossValue {
    double value = 0.0;
    std::vector<double> grad;
    std::size_t excluded_rows = 0; // zero-norm rows skipped under the mask
};

/// Mean over masked rows of (1 − cos(pred_i, target_i)); gradient w.r.t.
/// pred. Masked rows where either side has (near-)zero norm are excluded and
/// counted. An empty effective mask yields loss 0 with zero gradient.
inline LossValue cosine_feature_loss(const std::vector<double>& pred,
                                     const std::vector<double>& target, int dim,
                                     const std::vector<std::uint8_t>& mask) {
    if (dim <= 0)
        throw ValidationError("cosine_feature_loss: dim must be positive");
    const std::size_t rows = mask.size();
    if (pred.size() != rows * static_cast<std::size_t>(dim) || pred.size() != target.size())
        throw ValidationError("cosine_feature_loss: shape mismatch");
    LossValue out;
    out.grad.assign(pred.size(), 0.0);

    // First pass: which rows count.
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < rows; ++i) {
        if (!mask[i])
            continue;
        const double* p = pred.data() + i * dim;
        const double* t = target.data() + i * dim;
        double pn = 0.0, tn = 0.0;
        for (int c = 0; c < dim; ++c) {
            pn += p[c] * p[c];
            tn += t[c] * t[c];
        }
        if (std::sqrt(pn) <= kZeroNormThreshold || std::sqrt(tn) <= kZeroNormThreshold) {
            out.excluded_rows++;
            continue;
        }
        active.push_back(i);
    }
    if (active.empty())
        return out;

    const double inv_n = 1.0 / static_cast<double>(active.size());
    for (std::size_t i : active) {
        const double* p = pred.data() + i * dim;
        const double* t = target.data() + i * dim;
        double dot = 0.0, pn2 = 0.0, tn2 = 0.0;
        for (int c = 0; c < dim; ++c) {
            dot += p[c] * t[c];
            pn2 += p[c] * p[c];
            tn2 += t[c] * t[c];
        }
        const double pn = std::sqrt(pn2);
        const double tn = std::sqrt(tn2);
        const double cosv = dot / (pn * tn);
        out.value += (1.0 - cosv) * inv_n;
        // d(1-cos)/dp = −t/(|p||t|) + cos·p/|p|²
        double* g = out.grad.data() + i * dim;
        for (int c = 0; c < dim; ++c)
            g[c] = inv_n * (-t[c] / (pn * tn) + cosv * p[c] / pn2);
    }
    return out;
}

/// Mean |pred − target| over the mask; subgradient sign(pred−target)/count.
/// Empty mask → 0 with zero gradient.
inline LossValue l1_depth_loss(const std::vector<double>& pred, const std::vector<double>& target,
                               const std::vector<std::uint8_t>& mask) {
    if (pred.size() != target.size() || pred.size() != mask.size())
        throw ValidationError("l1_depth_loss: shape mismatch");
    LossValue out;
    out.grad.assign(pred.size(), 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i])
            ++n;
    if (n == 0)
        return out;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i])
            continue;
        const double r = pred[i] - target[i];
        out.value += std::abs(r) * inv_n;
        out.grad[i] = (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0)) * inv_n;
    }
    return out;
}

/// Scale-invariant logarithmic depth loss: with g = log(pred) − log(target)
/// over the mask, loss = sqrt(mean(g²) − λ·mean(g)²). Exactly scale-invariant
/// at λ = 1. Nonpositive depth under the mask is an error.
inline LossValue silog_depth_loss(const std::vector<double>& pred,
                                  const std::vector<double>& target,
                                  const std::vector<std::uint8_t>& mask, double lambda = 0.85) {
    if (pred.size() != target.size() || pred.size() != mask.size())
        throw ValidationError("silog_depth_loss: shape mismatch");
    LossValue out;
    out.grad.assign(pred.size(), 0.0);
    std::size_t n = 0;
    double sum_g = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i])
            continue;
        if (!(pred[i] > 0.0) || !(target[i] > 0.0))
            throw ValidationError("silog_depth_loss: nonpositive depth under mask at " +
                                  std::to_string(i));
        sum_g += std::log(pred[i]) - std::log(target[i]);
        ++n;
    }
    if (n == 0)
        return out;
    const double inv_n = 1.0 / static_cast<double>(n);
    const double mean_g = sum_g * inv_n;
    // mean(g²) − λ·mean(g)² = var(g) + (1−λ)·mean(g)², with the variance in
    // its cancellation-free two-pass form (uniform scaling stays ~0 at λ=1).
    double var_g = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i])
            continue;
        const double d = std::log(pred[i]) - std::log(target[i]) - mean_g;
        var_g += d * d;
    }
    var_g *= inv_n;
    const double inner = var_g + (1.0 - lambda) * mean_g * mean_g;
    out.value = std::sqrt(std::max(inner, 0.0));
    if (out.value <= 1e-300)
        return out; // gradient singular at 0; identical maps get zero grad
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i])
            continue;
        const double g = std::log(pred[i]) - std::log(target[i]);
        out.grad[i] = (g - lambda * mean_g) * inv_n / (pred[i] * out.value);
    }
    return out;
}

/// Softplus-stabilized binary cross entropy on raw logits:
/// mean(softplus(x) − y·x); gradient (σ(x) − y)/N. Total on all finite logits.
inline LossValue bce_occupancy_loss(const std::vector<double>& logits,
                                    const std::vector<std::uint8_t>& labels) {
    if (logits.size() != labels.size())
        throw ValidationError("bce_occupancy_loss: length mismatch");
    LossValue out;
    out.grad.assign(logits.size(), 0.0);
    if (logits.empty())
        return out;
    const double inv_n = 1.0 / static_cast<double>(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double x = logits[i];
        const double y = labels[i] ? 1.0 : 0.0;
        const double softplus = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
        out.value += (softplus - y * x) * inv_n;
        const double sigmoid = 1.0 / (1.0 + std::exp(-x));
        out.grad[i] = (sigmoid - y) * inv_n;
    }
    return out;
}

/// Per-term weights for the combined objective. `unit` is the overall-loss
/// form with weight 1 on every term; `ablation` is the best supplementary
/// configuration (2D terms 1.0, 3D BCE 8.0, 3D feature 16.0).
struct LossWeights {
    double feat2d = 1.0;
    double depth2d = 1.0;
    double silog2d = 1.0;
    double bce3d = 1.0;
    double feat3d = 1.0;

    static LossWeights unit() { return {}; }
    static LossWeights ablation() { return {1.0, 1.0, 1.0, 8.0, 16.0}; }
    static LossWeights preset(const std::string& name) {
        if (name == "unit")
            return unit();
        if (name == "ablation")
            return ablation();
        throw ValidationError("unknown loss weight preset '" + name + "'");
    }
};

struct LossReport {
    double feat2d = 0.0;
    double depth2d = 0.0;
    double silog2d = 0.0;
    double bce3d = 0.0;
    double feat3d = 0.0;
    LossWeights weights;

    double total() const {
        return weights.feat2d * feat2d + weights.depth2d * depth2d + weights.silog2d * silog2d +
               weights.bce3d * bce3d + weights.feat3d * feat3d;
    }
};

} // namespace gsvox
