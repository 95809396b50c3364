#pragma once

#include <random>
#include <vector>

#include <Eigen/Dense>

namespace drainsim {

/**
 * Feed-forward network shape: dims = {input, hidden..., output}. Hidden
 * layers use tanh, the output layer is linear. Parameters live in a flat
 * vector, per layer: weights [out×in] followed by biases [out].
 */
struct MlpShape {
    std::vector<int> dims;

    int layers() const { return static_cast<int>(dims.size()) - 1; }
    int input_dim() const { return dims.front(); }
    int output_dim() const { return dims.back(); }

    int param_count() const {
        int n = 0;
        for (int l = 0; l < layers(); ++l) n += dims[l] * dims[l + 1] + dims[l + 1];
        return n;
    }
    int weight_offset(int l) const {
        int off = 0;
        for (int k = 0; k < l; ++k) off += dims[k] * dims[k + 1] + dims[k + 1];
        return off;
    }
    int bias_offset(int l) const { return weight_offset(l) + dims[l] * dims[l + 1]; }
};

/// Fan-in-scaled uniform weights, zero biases.
inline void mlp_init(const MlpShape& shape, double* params, std::mt19937_64& rng) {
    for (int l = 0; l < shape.layers(); ++l) {
        const int in = shape.dims[l], out = shape.dims[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        double* w = params + shape.weight_offset(l);
        for (int k = 0; k < in * out; ++k) w[k] = dist(rng);
        double* b = params + shape.bias_offset(l);
        for (int k = 0; k < out; ++k) b[k] = 0.0;
    }
}

/// Post-activation values per layer; act[0] is the input batch.
struct MlpCache {
    std::vector<Eigen::MatrixXd> act;
};

/// Batched forward pass, one column per sample. Returns act.back().
inline const Eigen::MatrixXd& mlp_forward(const MlpShape& shape, const double* params,
                                          const Eigen::MatrixXd& input, MlpCache& cache) {
    cache.act.resize(shape.layers() + 1);
    cache.act[0] = input;
    for (int l = 0; l < shape.layers(); ++l) {
        const int in = shape.dims[l], out = shape.dims[l + 1];
        Eigen::Map<const Eigen::MatrixXd> W(params + shape.weight_offset(l), out, in);
        Eigen::Map<const Eigen::VectorXd> b(params + shape.bias_offset(l), out);
        Eigen::MatrixXd& z = cache.act[l + 1];
        z.noalias() = W * cache.act[l];
        z.colwise() += b;
        if (l + 1 < shape.layers()) z = z.array().tanh();
    }
    return cache.act.back();
}

/**
 * Reverse pass. `d_out` is dLoss/d(output); parameter gradients accumulate
 * into `grad` (same flat layout). When `d_input` is non-null it receives
 * dLoss/d(input).
 */
inline void mlp_backward(const MlpShape& shape, const double* params, const MlpCache& cache,
                         Eigen::MatrixXd d_out, double* grad, Eigen::MatrixXd* d_input) {
    for (int l = shape.layers() - 1; l >= 0; --l) {
        const int in = shape.dims[l], out = shape.dims[l + 1];
        if (l + 1 < shape.layers())  // undo tanh; act holds tanh(z)
            d_out.array() *= 1.0 - cache.act[l + 1].array().square();
        Eigen::Map<Eigen::MatrixXd> dW(grad + shape.weight_offset(l), out, in);
        Eigen::Map<Eigen::VectorXd> db(grad + shape.bias_offset(l), out);
        dW.noalias() += d_out * cache.act[l].transpose();
        db += d_out.rowwise().sum();
        if (l > 0 || d_input) {
            Eigen::Map<const Eigen::MatrixXd> W(params + shape.weight_offset(l), out, in);
            Eigen::MatrixXd d_prev = W.transpose() * d_out;
            if (l == 0) {
                *d_input = std::move(d_prev);
            } else {
                d_out = std::move(d_prev);
            }
        }
    }
}

}  // namespace drainsim
