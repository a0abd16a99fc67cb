#pragma once

#include <cmath>
#include <vector>

#include "pdarts/rng.hpp"
#include "pdarts/tensor.hpp"

namespace pdarts {

// Small stateful building blocks. Each owns its learnable tensors, exposes
// them through collect_params, and reports its learnable element count.

struct Conv2d {
    Tensor weight;  // (Cout, Cin/groups, kh, kw)
    Conv2dOpts opts;

    Conv2d() = default;
    Conv2d(int cin, int cout, int k, Conv2dOpts o, Rng& rng) : opts(o) {
        weight = param({cout, cin / o.groups, k, k});
        const double fan_in = static_cast<double>(cin / o.groups) * k * k;
        const double stddev = std::sqrt(2.0 / fan_in);
        for (auto& v : *weight.data) v = rng.normal(0.0, stddev);
    }

    Tensor forward(Tape& tape, const Tensor& x) { return conv2d(tape, x, weight, opts); }
    void collect_params(std::vector<Tensor*>& out) { out.push_back(&weight); }
    std::int64_t param_count() const { return weight.size(); }
};

struct BatchNorm2d {
    Tensor gamma, beta;
    BatchNormState state;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels) : state(channels) {
        gamma = param({channels});
        beta = param({channels});
        std::fill(gamma.data->begin(), gamma.data->end(), 1.0);
    }

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        return batch_norm(tape, x, gamma, beta, state, training);
    }
    void collect_params(std::vector<Tensor*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
    std::int64_t param_count() const { return gamma.size() + beta.size(); }
};

// ReLU -> 1x1 conv -> BN, the cell input adapter.
struct ReLUConvBN {
    Conv2d conv;
    BatchNorm2d bn;

    ReLUConvBN() = default;
    ReLUConvBN(int cin, int cout, int k, int stride, int padding, Rng& rng)
        : conv(cin, cout, k, {stride, padding, 1, 1}, rng), bn(cout) {}

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        return bn.forward(tape, conv.forward(tape, relu(tape, x)), training);
    }
    void collect_params(std::vector<Tensor*>& out) {
        conv.collect_params(out);
        bn.collect_params(out);
    }
    std::int64_t param_count() const { return conv.param_count() + bn.param_count(); }
};

// ReLU -> depthwise conv -> pointwise conv -> BN, applied twice; the first
// depthwise carries the stride.
struct SepConv {
    Conv2d dw1, pw1, dw2, pw2;
    BatchNorm2d bn1, bn2;

    SepConv() = default;
    SepConv(int channels, int k, int stride, Rng& rng)
        : dw1(channels, channels, k, {stride, k / 2, 1, channels}, rng),
          pw1(channels, channels, 1, {1, 0, 1, 1}, rng),
          dw2(channels, channels, k, {1, k / 2, 1, channels}, rng),
          pw2(channels, channels, 1, {1, 0, 1, 1}, rng),
          bn1(channels),
          bn2(channels) {}

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        Tensor h = bn1.forward(tape, pw1.forward(tape, dw1.forward(tape, relu(tape, x))), training);
        return bn2.forward(tape, pw2.forward(tape, dw2.forward(tape, relu(tape, h))), training);
    }
    void collect_params(std::vector<Tensor*>& out) {
        dw1.collect_params(out);
        pw1.collect_params(out);
        bn1.collect_params(out);
        dw2.collect_params(out);
        pw2.collect_params(out);
        bn2.collect_params(out);
    }
    std::int64_t param_count() const {
        return dw1.param_count() + pw1.param_count() + bn1.param_count() + dw2.param_count() +
               pw2.param_count() + bn2.param_count();
    }
};

// ReLU -> dilated depthwise conv -> pointwise conv -> BN, once.
struct DilConv {
    Conv2d dw, pw;
    BatchNorm2d bn;

    DilConv() = default;
    DilConv(int channels, int k, int stride, Rng& rng)
        : dw(channels, channels, k, {stride, (k / 2) * 2, 2, channels}, rng),
          pw(channels, channels, 1, {1, 0, 1, 1}, rng),
          bn(channels) {}

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        return bn.forward(tape, pw.forward(tape, dw.forward(tape, relu(tape, x))), training);
    }
    void collect_params(std::vector<Tensor*>& out) {
        dw.collect_params(out);
        pw.collect_params(out);
        bn.collect_params(out);
    }
    std::int64_t param_count() const {
        return dw.param_count() + pw.param_count() + bn.param_count();
    }
};

struct PoolBN {
    PoolMode mode;
    int stride = 1;
    BatchNorm2d bn;

    PoolBN() = default;
    PoolBN(PoolMode m, int channels, int stride_) : mode(m), stride(stride_), bn(channels) {}

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        return bn.forward(tape, pool2d(tape, x, mode, 3, stride, 1), training);
    }
    void collect_params(std::vector<Tensor*>& out) { bn.collect_params(out); }
    std::int64_t param_count() const { return bn.param_count(); }
};

// Stride-2 identity surrogate: two strided 1x1 convolutions on offset pixels,
// concatenated and normalized. Halves spatial size, preserves channel count.
struct FactorizedReduce {
    Conv2d conv1, conv2;
    BatchNorm2d bn;

    FactorizedReduce() = default;
    FactorizedReduce(int cin, int cout, Rng& rng)
        : conv1(cin, cout / 2, 1, {2, 0, 1, 1}, rng),
          conv2(cin, cout - cout / 2, 1, {2, 0, 1, 1}, rng),
          bn(cout) {}

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        Tensor r = relu(tape, x);
        Tensor a = conv1.forward(tape, r);
        Tensor b = conv2.forward(tape, crop_offset(tape, r, 1, 1));
        return bn.forward(tape, concat_channels(tape, {a, b}), training);
    }
    void collect_params(std::vector<Tensor*>& out) {
        conv1.collect_params(out);
        conv2.collect_params(out);
        bn.collect_params(out);
    }
    std::int64_t param_count() const {
        return conv1.param_count() + conv2.param_count() + bn.param_count();
    }
};

struct Linear {
    Tensor weight;  // (D, K)
    Tensor bias;    // (K)

    Linear() = default;
    Linear(int in, int out, Rng& rng) {
        weight = param({in, out});
        bias = param({out});
        const double stddev = std::sqrt(2.0 / in);
        for (auto& v : *weight.data) v = rng.normal(0.0, stddev);
    }

    Tensor forward(Tape& tape, const Tensor& x) { return linear(tape, x, weight, bias); }
    void collect_params(std::vector<Tensor*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
    std::int64_t param_count() const { return weight.size() + bias.size(); }
};

}  // namespace pdarts
