#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdarts/rng.hpp"

namespace pdarts {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

// Dense 64-bit float tensor. Value type with shared storage: copies alias the
// same data and gradient buffers, which is how architecture parameters are
// shared across cells.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;  // null unless requires grad
    std::int64_t tape_id = -1;

    Tensor() = default;
    Tensor(Shape s, bool requires_grad) : shape(std::move(s)) {
        const auto n = static_cast<std::size_t>(numel(shape));
        data = std::make_shared<std::vector<double>>(n, 0.0);
        if (requires_grad) grad = std::make_shared<std::vector<double>>(n, 0.0);
    }

    bool defined() const { return data != nullptr; }
    bool requires_grad() const { return grad != nullptr; }
    std::int64_t size() const { return numel(shape); }

    double& operator[](std::int64_t i) { return (*data)[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    }
};

inline Tensor zeros(Shape s) { return Tensor(std::move(s), false); }

inline Tensor full(Shape s, double v) {
    Tensor t(std::move(s), false);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
}

inline Tensor scalar_tensor(double v) { return full({1}, v); }

// Learnable parameter: always carries a gradient buffer.
inline Tensor param(Shape s) { return Tensor(std::move(s), true); }

inline Tensor from_vector(Shape s, const std::vector<double>& v, bool requires_grad = false) {
    Tensor t(std::move(s), requires_grad);
    if (static_cast<std::int64_t>(v.size()) != t.size())
        throw ShapeError("from_vector: " + std::to_string(v.size()) + " values for shape " +
                         shape_str(t.shape));
    *t.data = v;
    return t;
}

// Append-only record of primitive applications. Backward replays the stored
// rules in exact reverse insertion order; a tape may run backward once and
// must be reset (or discarded) before being reused.
class Tape {
public:
    std::int64_t record(const char* op, std::function<void()> backward_rule) {
        nodes_.push_back({op, std::move(backward_rule)});
        return next_id_++;
    }

    // Id for a value that enters the tape without a producing node.
    std::int64_t fresh_id() { return next_id_++; }

    void backward(Tensor& loss) {
        if (loss.size() != 1) throw TapeError("backward: loss is not scalar, shape " + shape_str(loss.shape));
        if (!loss.requires_grad()) throw TapeError("backward: loss does not require grad");
        if (backward_done_) throw TapeError("backward: called twice on the same tape without reset");
        if (!std::isfinite((*loss.data)[0]))
            throw NonFiniteError("backward: non-finite loss at tape node " + std::to_string(loss.tape_id));
        backward_done_ = true;
        (*loss.grad)[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
    }

    void reset() {
        nodes_.clear();
        next_id_ = 0;
        backward_done_ = false;
    }

    std::size_t node_count() const { return nodes_.size(); }
    const char* op_name(std::size_t i) const { return nodes_[i].op; }

private:
    struct Node {
        const char* op;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    std::int64_t next_id_ = 0;
    bool backward_done_ = false;
};

namespace detail {

// Finite-difference checks must not straddle a nondifferentiable point; relu
// and max-pool report how close the current forward pass came to one.
inline thread_local std::int64_t g_kink_events = 0;
inline constexpr double kKinkMargin = 1e-3;

inline Tensor make_output(Shape s, bool requires_grad) { return Tensor(std::move(s), requires_grad); }

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    Tensor y = detail::make_output(a.shape, a.requires_grad() || b.requires_grad());
    const std::int64_t n = y.size();
    for (std::int64_t i = 0; i < n; ++i) (*y.data)[i] = (*a.data)[i] + (*b.data)[i];
    if (y.requires_grad()) {
        y.tape_id = tape.record("add", [ag = a.grad, bg = b.grad, yg = y.grad, n] {
            for (std::int64_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*yg)[i];
                if (bg) (*bg)[i] += (*yg)[i];
            }
        });
    }
    return y;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    Tensor y = detail::make_output(a.shape, a.requires_grad() || b.requires_grad());
    const std::int64_t n = y.size();
    for (std::int64_t i = 0; i < n; ++i) (*y.data)[i] = (*a.data)[i] * (*b.data)[i];
    if (y.requires_grad()) {
        y.tape_id = tape.record("mul", [ad = a.data, bd = b.data, ag = a.grad, bg = b.grad,
                                        yg = y.grad, n] {
            for (std::int64_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*bd)[i] * (*yg)[i];
                if (bg) (*bg)[i] += (*ad)[i] * (*yg)[i];
            }
        });
    }
    return y;
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
    Tensor y = detail::make_output(x.shape, x.requires_grad());
    const std::int64_t n = y.size();
    for (std::int64_t i = 0; i < n; ++i) (*y.data)[i] = c * (*x.data)[i];
    if (y.requires_grad()) {
        y.tape_id = tape.record("scale", [xg = x.grad, yg = y.grad, c, n] {
            for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += c * (*yg)[i];
        });
    }
    return y;
}

inline Tensor relu(Tape& tape, const Tensor& x) {
    Tensor y = detail::make_output(x.shape, x.requires_grad());
    const std::int64_t n = y.size();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = (*x.data)[i];
        if (v > -detail::kKinkMargin && v < detail::kKinkMargin) ++detail::g_kink_events;
        (*y.data)[i] = v > 0.0 ? v : 0.0;
    }
    if (y.requires_grad()) {
        y.tape_id = tape.record("relu", [xd = x.data, xg = x.grad, yg = y.grad, n] {
            for (std::int64_t i = 0; i < n; ++i)
                if ((*xd)[i] > 0.0) (*xg)[i] += (*yg)[i];
        });
    }
    return y;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
    Tensor y = detail::make_output({1}, x.requires_grad());
    const std::int64_t n = x.size();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += (*x.data)[i];
    (*y.data)[0] = acc;
    if (y.requires_grad()) {
        y.tape_id = tape.record("sum", [xg = x.grad, yg = y.grad, n] {
            const double g = (*yg)[0];
            for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += g;
        });
    }
    return y;
}

// out = sum_i w[i] * xs[i]; the gradient w.r.t. w[i] is <dout, xs[i]>.
inline Tensor weighted_sum(Tape& tape, const std::vector<Tensor>& xs, const Tensor& w) {
    if (xs.empty()) throw ShapeError("weighted_sum: empty input list");
    if (w.size() != static_cast<std::int64_t>(xs.size()))
        throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " inputs but " +
                         std::to_string(w.size()) + " weights");
    for (const auto& x : xs) detail::check_same_shape("weighted_sum", xs[0], x);
    bool rg = w.requires_grad();
    for (const auto& x : xs) rg = rg || x.requires_grad();
    Tensor y = detail::make_output(xs[0].shape, rg);
    const std::int64_t n = y.size();
    const std::int64_t k = static_cast<std::int64_t>(xs.size());
    for (std::int64_t j = 0; j < k; ++j) {
        const double wj = (*w.data)[j];
        for (std::int64_t i = 0; i < n; ++i) (*y.data)[i] += wj * (*xs[j].data)[i];
    }
    if (y.requires_grad()) {
        std::vector<std::shared_ptr<std::vector<double>>> xd(k), xg(k);
        for (std::int64_t j = 0; j < k; ++j) {
            xd[j] = xs[j].data;
            xg[j] = xs[j].grad;
        }
        y.tape_id = tape.record("weighted_sum", [xd, xg, wd = w.data, wg = w.grad, yg = y.grad,
                                                 n, k] {
            for (std::int64_t j = 0; j < k; ++j) {
                if (xg[j]) {
                    const double wj = (*wd)[j];
                    for (std::int64_t i = 0; i < n; ++i) (*xg[j])[i] += wj * (*yg)[i];
                }
                if (wg) {
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) acc += (*xd[j])[i] * (*yg)[i];
                    (*wg)[j] += acc;
                }
            }
        });
    }
    return y;
}

// Multiplies every element of batch row b by factors[b]. The factors are
// constants (per-sample stochastic masks), not learnable.
inline Tensor scale_rows(Tape& tape, const Tensor& x, const std::vector<double>& factors) {
    if (x.shape.empty() || x.shape[0] != static_cast<int>(factors.size()))
        throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for shape " +
                         shape_str(x.shape));
    Tensor y = detail::make_output(x.shape, x.requires_grad());
    const std::int64_t row = x.size() / x.shape[0];
    for (int b = 0; b < x.shape[0]; ++b)
        for (std::int64_t i = 0; i < row; ++i)
            (*y.data)[b * row + i] = factors[b] * (*x.data)[b * row + i];
    if (y.requires_grad()) {
        y.tape_id = tape.record("scale_rows", [factors, xg = x.grad, yg = y.grad, row,
                                               nb = x.shape[0]] {
            for (int b = 0; b < nb; ++b)
                for (std::int64_t i = 0; i < row; ++i)
                    (*xg)[b * row + i] += factors[b] * (*yg)[b * row + i];
        });
    }
    return y;
}

// Inverted Bernoulli dropout: kept entries scale by 1/(1-rate) at train time.
inline Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw ShapeError("dropout: rate " + std::to_string(rate) + " outside [0,1)");
    if (!training || rate == 0.0) return x;
    Tensor y = detail::make_output(x.shape, x.requires_grad());
    const std::int64_t n = y.size();
    auto mask = std::make_shared<std::vector<double>>(n);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::int64_t i = 0; i < n; ++i) {
        (*mask)[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
        (*y.data)[i] = (*mask)[i] * (*x.data)[i];
    }
    if (y.requires_grad()) {
        y.tape_id = tape.record("dropout", [mask, xg = x.grad, yg = y.grad, n] {
            for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += (*mask)[i] * (*yg)[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Matrix / vector primitives
// ---------------------------------------------------------------------------

// a: (m,k), b: (k,n) -> (m,n)
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                         shape_str(b.shape));
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor y = detail::make_output({m, n}, a.requires_grad() || b.requires_grad());
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = (*a.data)[i * k + p];
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) (*y.data)[i * n + j] += av * (*b.data)[p * n + j];
        }
    if (y.requires_grad()) {
        y.tape_id = tape.record("matmul", [ad = a.data, bd = b.data, ag = a.grad, bg = b.grad,
                                           yg = y.grad, m, k, n] {
            if (ag) {  // dA = dY B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += (*yg)[i * n + j] * (*bd)[p * n + j];
                        (*ag)[i * k + p] += acc;
                    }
            }
            if (bg) {  // dB = A^T dY
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += (*ad)[i * k + p] * (*yg)[i * n + j];
                        (*bg)[p * n + j] += acc;
                    }
            }
        });
    }
    return y;
}

// x: (B,D), w: (D,K), b: (K) -> (B,K)
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(tape, x, w);
    if (b.shape.size() != 1 || b.shape[0] != y.shape[1])
        throw ShapeError("linear: bias shape " + shape_str(b.shape) + " for output " +
                         shape_str(y.shape));
    const int bsz = y.shape[0], k = y.shape[1];
    for (int i = 0; i < bsz; ++i)
        for (int j = 0; j < k; ++j) (*y.data)[i * k + j] += (*b.data)[j];
    if (b.requires_grad()) {
        // y already carries the matmul node; bias accumulation is its own rule.
        tape.record("linear_bias", [bg = b.grad, yg = y.grad, bsz, k] {
            for (int j = 0; j < k; ++j) {
                double acc = 0.0;
                for (int i = 0; i < bsz; ++i) acc += (*yg)[i * k + j];
                (*bg)[j] += acc;
            }
        });
    }
    return y;
}

// Softmax over a 1-D tensor.
inline Tensor softmax(Tape& tape, const Tensor& x) {
    if (x.shape.size() != 1) throw ShapeError("softmax: expected 1-D input, got " + shape_str(x.shape));
    const std::int64_t n = x.size();
    Tensor y = detail::make_output(x.shape, x.requires_grad());
    double mx = (*x.data)[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, (*x.data)[i]);
    double z = 0.0;
    for (std::int64_t i = 0; i < n; ++i) z += std::exp((*x.data)[i] - mx);
    for (std::int64_t i = 0; i < n; ++i) (*y.data)[i] = std::exp((*x.data)[i] - mx) / z;
    if (y.requires_grad()) {
        y.tape_id = tape.record("softmax", [yd = y.data, xg = x.grad, yg = y.grad, n] {
            double dot = 0.0;
            for (std::int64_t i = 0; i < n; ++i) dot += (*yd)[i] * (*yg)[i];
            for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += (*yd)[i] * ((*yg)[i] - dot);
        });
    }
    return y;
}

// Mean cross-entropy of logits (B,K) against integer labels, fused with a
// numerically stable log-softmax.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2) throw ShapeError("cross_entropy: logits must be 2-D, got " + shape_str(logits.shape));
    const int bsz = logits.shape[0], k = logits.shape[1];
    if (static_cast<int>(labels.size()) != bsz)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(bsz));
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(bsz) * k);
    double loss = 0.0;
    for (int i = 0; i < bsz; ++i) {
        const double* row = logits.data->data() + static_cast<std::size_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double logz = std::log(z) + mx;
        for (int j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(i) * k + j] = std::exp(row[j] - logz);
        if (labels[i] < 0 || labels[i] >= k)
            throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                             std::to_string(k) + ")");
        loss -= row[labels[i]] - logz;
    }
    loss /= bsz;
    Tensor y = detail::make_output({1}, logits.requires_grad());
    (*y.data)[0] = loss;
    if (!std::isfinite(loss))
        throw NonFiniteError("cross_entropy: non-finite loss at tape node " +
                             std::to_string(tape.fresh_id()));
    if (y.requires_grad()) {
        auto lab = std::make_shared<std::vector<int>>(labels);
        y.tape_id = tape.record("cross_entropy", [probs, lab, xg = logits.grad, yg = y.grad, bsz, k] {
            const double g = (*yg)[0] / bsz;
            for (int i = 0; i < bsz; ++i)
                for (int j = 0; j < k; ++j) {
                    double d = (*probs)[static_cast<std::size_t>(i) * k + j];
                    if (j == (*lab)[i]) d -= 1.0;
                    (*xg)[static_cast<std::size_t>(i) * k + j] += g * d;
                }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Spatial primitives (NCHW layout)
// ---------------------------------------------------------------------------

struct Conv2dOpts {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

// x: (B,Cin,H,W), w: (Cout,Cin/groups,kh,kw)
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Conv2dOpts& o) {
    if (x.shape.size() != 4 || w.shape.size() != 4)
        throw ShapeError("conv2d: need 4-D input and weight, got " + shape_str(x.shape) + " and " +
                         shape_str(w.shape));
    const int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Cout = w.shape[0], Cg = w.shape[1], kh = w.shape[2], kw = w.shape[3];
    if (Cin % o.groups != 0 || Cout % o.groups != 0 || Cg != Cin / o.groups)
        throw ShapeError("conv2d: group mismatch, input " + shape_str(x.shape) + " weight " +
                         shape_str(w.shape) + " groups " + std::to_string(o.groups));
    const int Ho = (H + 2 * o.padding - o.dilation * (kh - 1) - 1) / o.stride + 1;
    const int Wo = (W + 2 * o.padding - o.dilation * (kw - 1) - 1) / o.stride + 1;
    if (Ho < 1 || Wo < 1)
        throw ShapeError("conv2d: empty output for input " + shape_str(x.shape));
    Tensor y = detail::make_output({B, Cout, Ho, Wo}, x.requires_grad() || w.requires_grad());
    const int cog = Cout / o.groups;
    const auto* xd = x.data->data();
    const auto* wd = w.data->data();
    auto* yd = y.data->data();
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co) {
            const int g = co / cog;
            for (int ci = 0; ci < Cg; ++ci) {
                const double* xp = xd + ((static_cast<std::int64_t>(b) * Cin + g * Cg + ci) * H) * W;
                const double* wp = wd + ((static_cast<std::int64_t>(co) * Cg + ci) * kh) * kw;
                double* yp = yd + ((static_cast<std::int64_t>(b) * Cout + co) * Ho) * Wo;
                for (int r = 0; r < kh; ++r)
                    for (int c = 0; c < kw; ++c) {
                        const double wv = wp[r * kw + c];
                        if (wv == 0.0) continue;
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * o.stride - o.padding + r * o.dilation;
                            if (ih < 0 || ih >= H) continue;
                            const double* xrow = xp + ih * W;
                            double* yrow = yp + oh * Wo;
                            for (int ow = 0; ow < Wo; ++ow) {
                                const int iw = ow * o.stride - o.padding + c * o.dilation;
                                if (iw < 0 || iw >= W) continue;
                                yrow[ow] += wv * xrow[iw];
                            }
                        }
                    }
            }
        }
    if (y.requires_grad()) {
        y.tape_id = tape.record("conv2d", [xd2 = x.data, wd2 = w.data, xg = x.grad, wg = w.grad,
                                           yg = y.grad, B, Cin, H, W, Cout, Cg, kh, kw, Ho, Wo, o,
                                           cog] {
            const auto* gy = yg->data();
            if (xg) {
                auto* gx = xg->data();
                for (int b = 0; b < B; ++b)
                    for (int co = 0; co < Cout; ++co) {
                        const int g = co / cog;
                        for (int ci = 0; ci < Cg; ++ci) {
                            double* gxp = gx + ((static_cast<std::int64_t>(b) * Cin + g * Cg + ci) * H) * W;
                            const double* wp = wd2->data() + ((static_cast<std::int64_t>(co) * Cg + ci) * kh) * kw;
                            const double* gyp = gy + ((static_cast<std::int64_t>(b) * Cout + co) * Ho) * Wo;
                            for (int r = 0; r < kh; ++r)
                                for (int c = 0; c < kw; ++c) {
                                    const double wv = wp[r * kw + c];
                                    if (wv == 0.0) continue;
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        const int ih = oh * o.stride - o.padding + r * o.dilation;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int ow = 0; ow < Wo; ++ow) {
                                            const int iw = ow * o.stride - o.padding + c * o.dilation;
                                            if (iw < 0 || iw >= W) continue;
                                            gxp[ih * W + iw] += wv * gyp[oh * Wo + ow];
                                        }
                                    }
                                }
                        }
                    }
            }
            if (wg) {
                auto* gw = wg->data();
                for (int co = 0; co < Cout; ++co) {
                    const int g = co / cog;
                    for (int ci = 0; ci < Cg; ++ci)
                        for (int r = 0; r < kh; ++r)
                            for (int c = 0; c < kw; ++c) {
                                double acc = 0.0;
                                for (int b = 0; b < B; ++b) {
                                    const double* xp = xd2->data() +
                                        ((static_cast<std::int64_t>(b) * Cin + g * Cg + ci) * H) * W;
                                    const double* gyp = gy +
                                        ((static_cast<std::int64_t>(b) * Cout + co) * Ho) * Wo;
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        const int ih = oh * o.stride - o.padding + r * o.dilation;
                                        if (ih < 0 || ih >= H) continue;
                                        for (int ow = 0; ow < Wo; ++ow) {
                                            const int iw = ow * o.stride - o.padding + c * o.dilation;
                                            if (iw < 0 || iw >= W) continue;
                                            acc += xp[ih * W + iw] * gyp[oh * Wo + ow];
                                        }
                                    }
                                }
                                gw[((static_cast<std::int64_t>(co) * Cg + ci) * kh + r) * kw + c] += acc;
                            }
                }
            }
        });
    }
    return y;
}

enum class PoolMode { max, avg };

// kxk pooling; average pooling divides by the count of in-bounds cells.
inline Tensor pool2d(Tape& tape, const Tensor& x, PoolMode mode, int k, int stride, int padding) {
    if (x.shape.size() != 4) throw ShapeError("pool2d: need 4-D input, got " + shape_str(x.shape));
    const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Ho = (H + 2 * padding - k) / stride + 1;
    const int Wo = (W + 2 * padding - k) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("pool2d: empty output for input " + shape_str(x.shape));
    Tensor y = detail::make_output({B, C, Ho, Wo}, x.requires_grad());
    const std::int64_t out_n = y.size();
    auto argmax = mode == PoolMode::max ? std::make_shared<std::vector<std::int64_t>>(out_n)
                                        : nullptr;
    auto counts = mode == PoolMode::avg ? std::make_shared<std::vector<double>>(out_n) : nullptr;
    std::int64_t oi = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xp = x.data->data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    double second = -std::numeric_limits<double>::infinity();
                    std::int64_t best_i = -1;
                    double acc = 0.0;
                    int cnt = 0;
                    for (int r = 0; r < k; ++r) {
                        const int ih = oh * stride - padding + r;
                        if (ih < 0 || ih >= H) continue;
                        for (int c2 = 0; c2 < k; ++c2) {
                            const int iw = ow * stride - padding + c2;
                            if (iw < 0 || iw >= W) continue;
                            const double v = xp[ih * W + iw];
                            if (v > best) {
                                second = best;
                                best = v;
                                best_i = (static_cast<std::int64_t>(b) * C + c) * H * W + ih * W + iw;
                            } else if (v > second) {
                                second = v;
                            }
                            acc += v;
                            ++cnt;
                        }
                    }
                    if (mode == PoolMode::max) {
                        if (best - second < detail::kKinkMargin) ++detail::g_kink_events;
                        (*y.data)[oi] = best;
                        (*argmax)[oi] = best_i;
                    } else {
                        (*y.data)[oi] = acc / cnt;
                        (*counts)[oi] = cnt;
                    }
                }
        }
    if (y.requires_grad()) {
        if (mode == PoolMode::max) {
            y.tape_id = tape.record("max_pool", [argmax, xg = x.grad, yg = y.grad, out_n] {
                for (std::int64_t i = 0; i < out_n; ++i) (*xg)[(*argmax)[i]] += (*yg)[i];
            });
        } else {
            y.tape_id = tape.record("avg_pool", [counts, xg = x.grad, yg = y.grad, B, C, H, W, Ho,
                                                 Wo, k, stride, padding] {
                std::int64_t oi = 0;
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        double* gxp = xg->data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
                        for (int oh = 0; oh < Ho; ++oh)
                            for (int ow = 0; ow < Wo; ++ow, ++oi) {
                                const double g = (*yg)[oi] / (*counts)[oi];
                                for (int r = 0; r < k; ++r) {
                                    const int ih = oh * stride - padding + r;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int c2 = 0; c2 < k; ++c2) {
                                        const int iw = ow * stride - padding + c2;
                                        if (iw < 0 || iw >= W) continue;
                                        gxp[ih * W + iw] += g;
                                    }
                                }
                            }
                    }
            });
        }
    }
    return y;
}

inline Tensor concat_channels(Tape& tape, const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input list");
    const int B = xs[0].shape[0], H = xs[0].shape[2], W = xs[0].shape[3];
    int Ctot = 0;
    bool rg = false;
    for (const auto& x : xs) {
        if (x.shape.size() != 4 || x.shape[0] != B || x.shape[2] != H || x.shape[3] != W)
            throw ShapeError("concat_channels: mismatched input " + shape_str(x.shape) + " vs " +
                             shape_str(xs[0].shape));
        Ctot += x.shape[1];
        rg = rg || x.requires_grad();
    }
    Tensor y = detail::make_output({B, Ctot, H, W}, rg);
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::int64_t coff = 0;
    for (const auto& x : xs) {
        const int C = x.shape[1];
        for (int b = 0; b < B; ++b)
            std::copy_n(x.data->data() + static_cast<std::int64_t>(b) * C * plane, C * plane,
                        y.data->data() + (static_cast<std::int64_t>(b) * Ctot + coff) * plane);
        coff += C;
    }
    if (y.requires_grad()) {
        std::vector<std::shared_ptr<std::vector<double>>> grads;
        std::vector<int> chans;
        for (const auto& x : xs) {
            grads.push_back(x.grad);
            chans.push_back(x.shape[1]);
        }
        y.tape_id = tape.record("concat_channels", [grads, chans, yg = y.grad, B, Ctot, plane] {
            std::int64_t coff = 0;
            for (std::size_t j = 0; j < grads.size(); ++j) {
                const int C = chans[j];
                if (grads[j]) {
                    for (int b = 0; b < B; ++b) {
                        const double* src = yg->data() + (static_cast<std::int64_t>(b) * Ctot + coff) * plane;
                        double* dst = grads[j]->data() + static_cast<std::int64_t>(b) * C * plane;
                        for (std::int64_t i = 0; i < C * plane; ++i) dst[i] += src[i];
                    }
                }
                coff += C;
            }
        });
    }
    return y;
}

// Channel slice [c0, c0+C) of a NCHW tensor; the backward of concat.
inline Tensor slice_channels(Tape& tape, const Tensor& x, int c0, int C) {
    if (x.shape.size() != 4 || c0 < 0 || c0 + C > x.shape[1])
        throw ShapeError("slice_channels: slice [" + std::to_string(c0) + "," +
                         std::to_string(c0 + C) + ") of " + shape_str(x.shape));
    const int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor y = detail::make_output({B, C, H, W}, x.requires_grad());
    for (int b = 0; b < B; ++b)
        std::copy_n(x.data->data() + (static_cast<std::int64_t>(b) * Cin + c0) * plane, C * plane,
                    y.data->data() + static_cast<std::int64_t>(b) * C * plane);
    if (y.requires_grad()) {
        y.tape_id = tape.record("slice_channels", [xg = x.grad, yg = y.grad, B, Cin, C, c0, plane] {
            for (int b = 0; b < B; ++b) {
                const double* src = yg->data() + static_cast<std::int64_t>(b) * C * plane;
                double* dst = xg->data() + (static_cast<std::int64_t>(b) * Cin + c0) * plane;
                for (std::int64_t i = 0; i < C * plane; ++i) dst[i] += src[i];
            }
        });
    }
    return y;
}

// Drop the first `dr` rows and `dc` columns (used by the factorized reduce's
// offset branch).
inline Tensor crop_offset(Tape& tape, const Tensor& x, int dr, int dc) {
    if (x.shape.size() != 4 || dr >= x.shape[2] || dc >= x.shape[3])
        throw ShapeError("crop_offset: offset (" + std::to_string(dr) + "," + std::to_string(dc) +
                         ") of " + shape_str(x.shape));
    const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Ho = H - dr, Wo = W - dc;
    Tensor y = detail::make_output({B, C, Ho, Wo}, x.requires_grad());
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xp = x.data->data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
            double* yp = y.data->data() + (static_cast<std::int64_t>(b) * C + c) * Ho * Wo;
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) yp[i * Wo + j] = xp[(i + dr) * W + (j + dc)];
        }
    if (y.requires_grad()) {
        y.tape_id = tape.record("crop_offset", [xg = x.grad, yg = y.grad, B, C, H, W, Ho, Wo, dr, dc] {
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    double* gxp = xg->data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
                    const double* gyp = yg->data() + (static_cast<std::int64_t>(b) * C + c) * Ho * Wo;
                    for (int i = 0; i < Ho; ++i)
                        for (int j = 0; j < Wo; ++j) gxp[(i + dr) * W + (j + dc)] += gyp[i * Wo + j];
                }
        });
    }
    return y;
}

// (B,C,H,W) -> (B,C) spatial mean.
inline Tensor global_avg_pool(Tape& tape, const Tensor& x) {
    if (x.shape.size() != 4) throw ShapeError("global_avg_pool: need 4-D input, got " + shape_str(x.shape));
    const int B = x.shape[0], C = x.shape[1];
    const std::int64_t plane = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
    Tensor y = detail::make_output({B, C}, x.requires_grad());
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xp = x.data->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
            (*y.data)[static_cast<std::int64_t>(b) * C + c] = acc / plane;
        }
    if (y.requires_grad()) {
        y.tape_id = tape.record("global_avg_pool", [xg = x.grad, yg = y.grad, B, C, plane] {
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double g = (*yg)[static_cast<std::int64_t>(b) * C + c] / plane;
                    double* gxp = xg->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) gxp[i] += g;
                }
        });
    }
    return y;
}

// Per-channel batch normalization over (B,H,W) with affine parameters and
// running statistics for inference mode.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(int channels = 0)
        : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

inline Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         BatchNormState& state, bool training) {
    if (x.shape.size() != 4) throw ShapeError("batch_norm: need 4-D input, got " + shape_str(x.shape));
    const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    if (gamma.size() != C || beta.size() != C ||
        static_cast<int>(state.running_mean.size()) != C)
        throw ShapeError("batch_norm: channel mismatch, input " + shape_str(x.shape) + " gamma " +
                         shape_str(gamma.shape));
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t n = static_cast<std::int64_t>(B) * plane;  // per-channel count
    Tensor y = detail::make_output(x.shape, x.requires_grad() || gamma.requires_grad() ||
                                                beta.requires_grad());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto invstd = std::make_shared<std::vector<double>>(C);
    auto means = std::make_shared<std::vector<double>>(C);
    for (int c = 0; c < C; ++c) {
        double mean, var;
        if (training) {
            double acc = 0.0;
            for (int b = 0; b < B; ++b) {
                const double* xp = x.data->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
            }
            mean = acc / n;
            double vacc = 0.0;
            for (int b = 0; b < B; ++b) {
                const double* xp = x.data->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double d = xp[i] - mean;
                    vacc += d * d;
                }
            }
            var = vacc / n;
            const double unbiased = n > 1 ? vacc / (n - 1) : var;
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean;
            state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        const double is = 1.0 / std::sqrt(var + state.eps);
        (*invstd)[c] = is;
        (*means)[c] = mean;
        const double g = (*gamma.data)[c], bta = (*beta.data)[c];
        for (int b = 0; b < B; ++b) {
            const double* xp = x.data->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            double* hp = xhat->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            double* yp = y.data->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                hp[i] = (xp[i] - mean) * is;
                yp[i] = g * hp[i] + bta;
            }
        }
    }
    if (y.requires_grad()) {
        y.tape_id = tape.record("batch_norm", [xhat, invstd, xg = x.grad, gg = gamma.grad,
                                               bg = beta.grad, gd = gamma.data, yg = y.grad, B, C,
                                               plane, n, training] {
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int b = 0; b < B; ++b) {
                    const double* gyp = yg->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                    const double* hp = xhat->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_dy += gyp[i];
                        sum_dy_xhat += gyp[i] * hp[i];
                    }
                }
                if (gg) (*gg)[c] += sum_dy_xhat;
                if (bg) (*bg)[c] += sum_dy;
                if (xg) {
                    const double g = (*gd)[c], is = (*invstd)[c];
                    for (int b = 0; b < B; ++b) {
                        const double* gyp = yg->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                        const double* hp = xhat->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                        double* gxp = xg->data() + (static_cast<std::int64_t>(b) * C + c) * plane;
                        if (training) {
                            for (std::int64_t i = 0; i < plane; ++i)
                                gxp[i] += g * is / n * (n * gyp[i] - sum_dy - hp[i] * sum_dy_xhat);
                        } else {
                            for (std::int64_t i = 0; i < plane; ++i) gxp[i] += g * is * gyp[i];
                        }
                    }
                }
            }
        });
    }
    return y;
}

}  // namespace pdarts
