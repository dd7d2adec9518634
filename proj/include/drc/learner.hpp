#pragma once

#include <cmath>
#include <cstring>
#include <span>
#include <vector>

#include "drc/bridge.hpp"
#include "drc/fabric.hpp"
#include "drc/wire.hpp"

namespace drc {

// Minimal learning stage: a linear regressor (optionally with one tanh hidden
// layer) trained by mini-batch SGD on mean-squared error, with gradients
// averaged across ranks through the fabric's deterministic allreduce.

struct LinearModel {
    struct Hidden {
        size_t units = 0;
        std::vector<double> w1;  // units x features, row-major
        std::vector<double> b1;  // units
        std::vector<double> v;   // units (output weights)
    };

    std::vector<double> weights;  // features (unused direct path when hidden)
    double bias = 0.0;
    std::optional<Hidden> hidden;

    size_t feature_width() const { return weights.size(); }

    bool finite() const {
        auto ok = [](std::span<const double> xs) {
            for (double x : xs)
                if (!std::isfinite(x)) return false;
            return true;
        };
        if (!ok(weights) || !std::isfinite(bias)) return false;
        if (hidden) return ok(hidden->w1) && ok(hidden->b1) && ok(hidden->v);
        return true;
    }
};

struct TrainConfig {
    double learning_rate = 0.01;
    uint32_t epochs = 1;
    uint64_t init_seed = 0;
    uint32_t hidden_units = 0;  // 0 = plain linear model
};

/// Weights drawn uniform[-0.1, 0.1) from SplitMix64(init_seed); identical on
/// every rank that shares the seed.
inline LinearModel init_model(size_t features, uint32_t hidden_units, uint64_t init_seed) {
    SplitMix64 rng(init_seed);
    LinearModel m;
    m.weights.resize(features);
    for (auto& w : m.weights) w = rng.next_uniform(-0.1, 0.1);
    m.bias = rng.next_uniform(-0.1, 0.1);
    if (hidden_units > 0) {
        LinearModel::Hidden h;
        h.units = hidden_units;
        h.w1.resize(size_t(hidden_units) * features);
        for (auto& w : h.w1) w = rng.next_uniform(-0.1, 0.1);
        h.b1.resize(hidden_units);
        for (auto& w : h.b1) w = rng.next_uniform(-0.1, 0.1);
        h.v.resize(hidden_units);
        for (auto& w : h.v) w = rng.next_uniform(-0.1, 0.1);
        m.hidden = std::move(h);
    }
    return m;
}

namespace learner_detail {

inline double forward_one(const LinearModel& m, const Batch& batch, size_t row,
                          std::vector<double>* hidden_act) {
    const size_t F = m.feature_width();
    if (!m.hidden) {
        double y = m.bias;
        for (size_t k = 0; k < F; ++k) y += m.weights[k] * batch.feature(row, k);
        return y;
    }
    const auto& h = *m.hidden;
    double y = m.bias;
    if (hidden_act) hidden_act->resize(h.units);
    for (size_t u = 0; u < h.units; ++u) {
        double pre = h.b1[u];
        for (size_t k = 0; k < F; ++k) pre += h.w1[u * F + k] * batch.feature(row, k);
        double act = std::tanh(pre);
        if (hidden_act) (*hidden_act)[u] = act;
        y += h.v[u] * act;
    }
    return y;
}

}  // namespace learner_detail

/// Number of parameters in the flat gradient/update layout:
/// [weights..., bias, (w1..., b1..., v...)].
inline size_t param_count(const LinearModel& m) {
    size_t n = m.weights.size() + 1;
    if (m.hidden) n += m.hidden->w1.size() + m.hidden->b1.size() + m.hidden->v.size();
    return n;
}

/// Gradient of the batch's mean squared error, in the flat layout above.
/// Linear part: dL/dw = (2/B) X^T (Xw + b - y), dL/db = (2/B) sum(residual);
/// the hidden layer backpropagates through tanh.
inline std::vector<double> batch_gradient(const LinearModel& m, const Batch& batch) {
    const size_t F = m.feature_width();
    const size_t B = batch.size();
    if (B == 0) throw Error("sgd: empty batch");
    if (batch.feature_width() != F) throw Error("sgd: feature width mismatch");

    std::vector<double> grad(param_count(m), 0.0);
    const double scale = 2.0 / static_cast<double>(B);

    if (!m.hidden) {
        for (size_t i = 0; i < B; ++i) {
            double r = learner_detail::forward_one(m, batch, i, nullptr) - batch.label(i);
            for (size_t k = 0; k < F; ++k) grad[k] += scale * r * batch.feature(i, k);
            grad[F] += scale * r;
        }
        return grad;
    }

    const auto& h = *m.hidden;
    const size_t off_w1 = F + 1;
    const size_t off_b1 = off_w1 + h.w1.size();
    const size_t off_v = off_b1 + h.b1.size();
    // The direct weights are unused by the MLP forward pass, so their
    // gradient entries stay zero.
    std::vector<double> act;
    for (size_t i = 0; i < B; ++i) {
        double r = learner_detail::forward_one(m, batch, i, &act) - batch.label(i);
        grad[F] += scale * r;  // output bias
        for (size_t u = 0; u < h.units; ++u) {
            grad[off_v + u] += scale * r * act[u];
            double dpre = r * h.v[u] * (1.0 - act[u] * act[u]);
            grad[off_b1 + u] += scale * dpre;
            for (size_t k = 0; k < F; ++k)
                grad[off_w1 + u * F + k] += scale * dpre * batch.feature(i, k);
        }
    }
    return grad;
}

inline void apply_update(LinearModel& m, std::span<const double> grad, double lr) {
    const size_t F = m.weights.size();
    for (size_t k = 0; k < F; ++k) m.weights[k] -= lr * grad[k];
    m.bias -= lr * grad[F];
    if (m.hidden) {
        auto& h = *m.hidden;
        size_t off = F + 1;
        for (auto& w : h.w1) w -= lr * grad[off++];
        for (auto& w : h.b1) w -= lr * grad[off++];
        for (auto& w : h.v) w -= lr * grad[off++];
    }
    if (!m.finite()) throw Error("sgd: non-finite parameters (diverged)");
}

/// One SGD step on a single batch.
inline void sgd_step(LinearModel& m, const Batch& batch, double lr) {
    apply_update(m, batch_gradient(m, batch), lr);
}

/// Collective data-parallel SGD: every rank walks its loader slice, gradients
/// are summed with the deterministic allreduce and divided by the rank count,
/// and the identical update is applied everywhere. Final models are
/// bit-identical across ranks.
inline LinearModel data_parallel_train(const Communicator& comm, BatchLoader& loader,
                                       size_t feature_width, const TrainConfig& cfg) {
    LinearModel model = init_model(feature_width, cfg.hidden_units, cfg.init_seed);
    const double P = static_cast<double>(comm.size());
    for (uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0) loader.reset();
        while (auto batch = loader.next_batch()) {
            std::vector<double> grad = batch_gradient(model, *batch);
            std::vector<double> total = comm.allreduce_f64(grad, ReduceOp::Sum);
            for (auto& g : total) g /= P;
            apply_update(model, total, cfg.learning_rate);
        }
    }
    return model;
}

/// Predictions for a row-major B x F matrix.
inline std::vector<double> predict(const LinearModel& m, std::span<const double> features,
                                   size_t rows) {
    const size_t F = m.feature_width();
    if (rows * F != features.size()) throw Error("predict: feature width mismatch");
    std::vector<double> out(rows);
    for (size_t i = 0; i < rows; ++i) {
        double y = m.bias;
        if (!m.hidden) {
            for (size_t k = 0; k < F; ++k) y += m.weights[k] * features[i * F + k];
        } else {
            const auto& h = *m.hidden;
            for (size_t u = 0; u < h.units; ++u) {
                double pre = h.b1[u];
                for (size_t k = 0; k < F; ++k) pre += h.w1[u * F + k] * features[i * F + k];
                y += h.v[u] * std::tanh(pre);
            }
        }
        out[i] = y;
    }
    return out;
}

/// Predictions for a loader batch (view-based).
inline std::vector<double> predict(const LinearModel& m, const Batch& batch) {
    std::vector<double> out(batch.size());
    for (size_t i = 0; i < batch.size(); ++i)
        out[i] = learner_detail::forward_one(m, batch, i, nullptr);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
    double mae = 0.0;
    double mse = 0.0;
    double mape_percent = 0.0;
    double nnse = 0.0;
    uint64_t mape_excluded = 0;  // zero-target entries skipped by MAPE
};

/// MAE, MSE, MAPE% (excluding zero targets) and normalized Nash-Sutcliffe
/// efficiency NNSE = 1/(2 - NSE), NSE = 1 - sum((y-yhat)^2)/sum((y-ybar)^2).
inline MetricsReport evaluate(std::span<const double> y, std::span<const double> y_hat) {
    if (y.size() != y_hat.size()) throw Error("evaluate: length mismatch");
    if (y.empty()) throw Error("evaluate: empty input");
    const size_t n = y.size();

    MetricsReport rep;
    double abs_sum = 0, sq_sum = 0, ape_sum = 0, y_sum = 0;
    size_t ape_n = 0;
    for (size_t i = 0; i < n; ++i) {
        double d = y[i] - y_hat[i];
        abs_sum += std::abs(d);
        sq_sum += d * d;
        y_sum += y[i];
        if (y[i] != 0.0) {
            ape_sum += std::abs(d) / std::abs(y[i]);
            ++ape_n;
        }
    }
    rep.mae = abs_sum / n;
    rep.mse = sq_sum / n;
    rep.mape_excluded = n - ape_n;
    if (ape_n == 0) throw Error("evaluate: all targets zero, MAPE undefined");
    rep.mape_percent = 100.0 * ape_sum / ape_n;

    double y_bar = y_sum / n;
    double var_sum = 0;
    for (size_t i = 0; i < n; ++i) var_sum += (y[i] - y_bar) * (y[i] - y_bar);
    if (var_sum == 0.0) throw Error("evaluate: zero-variance targets, NNSE undefined");
    double nse = 1.0 - sq_sum / var_sum;
    rep.nnse = 1.0 / (2.0 - nse);
    return rep;
}

// ---------------------------------------------------------------------------
// Model encoding (task outputs)
//
// magic "DRCM" | u32 F | F x f64 LE weights | f64 LE bias | u8 has_hidden |
// hidden: u32 H | H*F x f64 w1 (row-major) | H x f64 b1 | H x f64 v
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[4] = {'D', 'R', 'C', 'M'};

inline Bytes encode_model(const LinearModel& m) {
    ByteWriter w;
    w.raw(kModelMagic, 4);
    w.u32(static_cast<uint32_t>(m.weights.size()));
    for (double x : m.weights) w.f64(x);
    w.f64(m.bias);
    w.u8(m.hidden ? 1 : 0);
    if (m.hidden) {
        const auto& h = *m.hidden;
        w.u32(static_cast<uint32_t>(h.units));
        for (double x : h.w1) w.f64(x);
        for (double x : h.b1) w.f64(x);
        for (double x : h.v) w.f64(x);
    }
    return w.take();
}

inline LinearModel decode_model(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::memcmp(magic.data(), kModelMagic, 4) != 0) throw DecodeError("bad magic");
    LinearModel m;
    uint32_t F = r.u32();
    m.weights.resize(F);
    for (auto& x : m.weights) x = r.f64();
    m.bias = r.f64();
    if (r.u8()) {
        LinearModel::Hidden h;
        h.units = r.u32();
        h.w1.resize(size_t(h.units) * F);
        for (auto& x : h.w1) x = r.f64();
        h.b1.resize(h.units);
        for (auto& x : h.b1) x = r.f64();
        h.v.resize(h.units);
        for (auto& x : h.v) x = r.f64();
        m.hidden = std::move(h);
    }
    if (!r.done()) throw DecodeError("trailing bytes after model");
    return m;
}

}  // namespace drc
