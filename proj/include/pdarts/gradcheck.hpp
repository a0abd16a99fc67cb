#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pdarts/nn.hpp"
#include "pdarts/op_space.hpp"
#include "pdarts/rng.hpp"
#include "pdarts/tensor.hpp"

namespace pdarts::gradcheck {

// Central finite differences against the recorded backward rules. The oracle
// only ever runs forward passes, so it is independent of every backward
// implementation it checks.

struct CheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
    int resamples = 0;  // draws skipped because a kink was too close
};

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    return std::abs(analytic - numeric) / denom;
}

// build(tape) must rebuild the same scalar loss from the current contents of
// the checked tensors on every call.
inline double max_rel_grad_err(const std::vector<Tensor*>& checked,
                               const std::function<Tensor(Tape&)>& build, double h = 1e-5) {
    for (auto* t : checked) t->zero_grad();
    Tape tape;
    Tensor loss = build(tape);
    tape.backward(loss);
    double worst = 0.0;
    for (auto* t : checked) {
        const std::vector<double> analytic = *t->grad;
        for (std::int64_t i = 0; i < t->size(); ++i) {
            const double keep = (*t->data)[i];
            (*t->data)[i] = keep + h;
            Tape tp;
            const double up = (*build(tp).data)[0];
            (*t->data)[i] = keep - h;
            Tape tm;
            const double down = (*build(tm).data)[0];
            (*t->data)[i] = keep;
            worst = std::max(worst, rel_err(analytic[i], (up - down) / (2.0 * h)));
        }
    }
    return worst;
}

// Runs one named check, redrawing inputs (via make, which must consume the
// given rng) while the forward pass reports kink proximity, so differences
// are never taken across a nondifferentiable point.
inline CheckResult run_check(const std::string& name, std::uint64_t seed,
                             const std::function<std::vector<Tensor*>(Rng&)>& make,
                             const std::function<Tensor(Tape&)>& build, double tol = 1e-4) {
    CheckResult r;
    r.name = name;
    for (int attempt = 0; attempt < 64; ++attempt) {
        Rng rng(derive_seed(seed, name + "/draw/" + std::to_string(attempt)));
        std::vector<Tensor*> checked = make(rng);
        detail::g_kink_events = 0;
        {
            Tape probe;
            build(probe);
        }
        if (detail::g_kink_events > 0) {
            ++r.resamples;
            continue;
        }
        r.max_rel_err = max_rel_grad_err(checked, build);
        r.pass = r.max_rel_err < tol;
        return r;
    }
    r.pass = false;
    r.max_rel_err = std::numeric_limits<double>::infinity();
    return r;
}

namespace detail_suite {

inline void fill_normal(Tensor& t, Rng& rng, double stddev = 1.0) {
    for (auto& v : *t.data) v = rng.normal(0.0, stddev);
}

// Loss reducer: fixed pseudo-random projection of the output.
inline Tensor project(Tape& tape, const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    Tensor c(y.shape, false);
    for (auto& v : *c.data) v = rng.uniform(-1.0, 1.0);
    return sum(tape, mul(tape, y, c));
}

}  // namespace detail_suite

// The full primitive + candidate-operation suite.
inline std::vector<CheckResult> run_suite(std::uint64_t seed) {
    using detail_suite::fill_normal;
    using detail_suite::project;
    std::vector<CheckResult> results;

    auto simple = [&](const std::string& name, Shape sa, Shape sb,
                      std::function<Tensor(Tape&, const Tensor&, const Tensor&)> op) {
        auto a = std::make_shared<Tensor>(sa, true);
        auto b = std::make_shared<Tensor>(sb, true);
        results.push_back(run_check(
            name, seed,
            [=](Rng& rng) {
                fill_normal(*a, rng);
                fill_normal(*b, rng);
                return std::vector<Tensor*>{a.get(), b.get()};
            },
            [=](Tape& tape) { return project(tape, op(tape, *a, *b), seed + 7); }));
    };

    simple("add", {3, 4}, {3, 4}, [](Tape& t, const Tensor& a, const Tensor& b) { return add(t, a, b); });
    simple("mul", {3, 4}, {3, 4}, [](Tape& t, const Tensor& a, const Tensor& b) { return mul(t, a, b); });
    simple("matmul", {3, 4}, {4, 5},
           [](Tape& t, const Tensor& a, const Tensor& b) { return matmul(t, a, b); });

    {
        auto x = std::make_shared<Tensor>(Shape{2, 3, 5, 5}, true);
        results.push_back(run_check(
            "relu", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                return std::vector<Tensor*>{x.get()};
            },
            [=](Tape& tape) { return project(tape, relu(tape, *x), seed + 7); }));
    }

    auto conv_check = [&](const std::string& name, int cin, int cout, int k, Conv2dOpts o) {
        auto x = std::make_shared<Tensor>(Shape{2, cin, 6, 6}, true);
        auto w = std::make_shared<Tensor>(Shape{cout, cin / o.groups, k, k}, true);
        results.push_back(run_check(
            name, seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                fill_normal(*w, rng, 0.5);
                return std::vector<Tensor*>{x.get(), w.get()};
            },
            [=](Tape& tape) { return project(tape, conv2d(tape, *x, *w, o), seed + 7); }));
    };
    conv_check("conv2d_3x3_pad1", 3, 4, 3, {1, 1, 1, 1});
    conv_check("conv2d_stride2", 3, 4, 3, {2, 1, 1, 1});
    conv_check("conv2d_dilated2", 2, 3, 3, {1, 2, 2, 1});
    conv_check("conv2d_depthwise", 4, 4, 3, {1, 1, 1, 4});
    conv_check("conv2d_grouped", 4, 6, 3, {1, 1, 1, 2});
    conv_check("conv2d_1x1", 4, 5, 1, {1, 0, 1, 1});

    auto pool_check = [&](const std::string& name, PoolMode m, int stride) {
        auto x = std::make_shared<Tensor>(Shape{2, 3, 6, 6}, true);
        results.push_back(run_check(
            name, seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                return std::vector<Tensor*>{x.get()};
            },
            [=](Tape& tape) { return project(tape, pool2d(tape, *x, m, 3, stride, 1), seed + 7); }));
    };
    pool_check("max_pool_3x3_s1", PoolMode::max, 1);
    pool_check("max_pool_3x3_s2", PoolMode::max, 2);
    pool_check("avg_pool_3x3_s1", PoolMode::avg, 1);
    pool_check("avg_pool_3x3_s2", PoolMode::avg, 2);

    for (bool training : {true, false}) {
        auto x = std::make_shared<Tensor>(Shape{3, 4, 5, 5}, true);
        auto gamma = std::make_shared<Tensor>(Shape{4}, true);
        auto beta = std::make_shared<Tensor>(Shape{4}, true);
        auto state = std::make_shared<BatchNormState>(4);
        results.push_back(run_check(
            training ? "batch_norm_train" : "batch_norm_eval", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                for (auto& v : *gamma->data) v = rng.uniform(0.5, 1.5);
                fill_normal(*beta, rng, 0.2);
                for (auto& v : state->running_var) v = rng.uniform(0.5, 2.0);
                for (auto& v : state->running_mean) v = rng.normal(0.0, 0.3);
                return std::vector<Tensor*>{x.get(), gamma.get(), beta.get()};
            },
            [=](Tape& tape) {
                return project(tape, batch_norm(tape, *x, *gamma, *beta, *state, training), seed + 7);
            }));
    }

    {
        auto a = std::make_shared<Tensor>(Shape{2, 2, 4, 4}, true);
        auto b = std::make_shared<Tensor>(Shape{2, 3, 4, 4}, true);
        results.push_back(run_check(
            "concat_channels", seed,
            [=](Rng& rng) {
                fill_normal(*a, rng);
                fill_normal(*b, rng);
                return std::vector<Tensor*>{a.get(), b.get()};
            },
            [=](Tape& tape) {
                return project(tape, concat_channels(tape, {*a, *b}), seed + 7);
            }));
    }
    {
        auto x = std::make_shared<Tensor>(Shape{2, 5, 4, 4}, true);
        results.push_back(run_check(
            "slice_channels", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                return std::vector<Tensor*>{x.get()};
            },
            [=](Tape& tape) { return project(tape, slice_channels(tape, *x, 1, 3), seed + 7); }));
    }
    {
        auto x = std::make_shared<Tensor>(Shape{2, 3, 6, 6}, true);
        results.push_back(run_check(
            "crop_offset", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                return std::vector<Tensor*>{x.get()};
            },
            [=](Tape& tape) { return project(tape, crop_offset(tape, *x, 1, 1), seed + 7); }));
    }
    {
        auto x = std::make_shared<Tensor>(Shape{2, 4, 5, 5}, true);
        results.push_back(run_check(
            "global_avg_pool", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                return std::vector<Tensor*>{x.get()};
            },
            [=](Tape& tape) { return project(tape, global_avg_pool(tape, *x), seed + 7); }));
    }
    {
        auto x = std::make_shared<Tensor>(Shape{7}, true);
        results.push_back(run_check(
            "softmax", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                return std::vector<Tensor*>{x.get()};
            },
            [=](Tape& tape) { return project(tape, softmax(tape, *x), seed + 7); }));
    }
    {
        auto logits = std::make_shared<Tensor>(Shape{4, 5}, true);
        auto labels = std::make_shared<std::vector<int>>();
        results.push_back(run_check(
            "cross_entropy", seed,
            [=](Rng& rng) {
                fill_normal(*logits, rng);
                labels->clear();
                for (int i = 0; i < 4; ++i) labels->push_back(static_cast<int>(rng.index(5)));
                return std::vector<Tensor*>{logits.get()};
            },
            [=](Tape& tape) { return cross_entropy(tape, *logits, *labels); }));
    }
    {
        auto x = std::make_shared<Tensor>(Shape{2, 3}, true);
        auto w = std::make_shared<Tensor>(Shape{3, 4}, true);
        auto b = std::make_shared<Tensor>(Shape{4}, true);
        results.push_back(run_check(
            "linear", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                fill_normal(*w, rng);
                fill_normal(*b, rng);
                return std::vector<Tensor*>{x.get(), w.get(), b.get()};
            },
            [=](Tape& tape) { return project(tape, linear(tape, *x, *w, *b), seed + 7); }));
    }
    {
        auto a = std::make_shared<Tensor>(Shape{2, 3, 4, 4}, true);
        auto b = std::make_shared<Tensor>(Shape{2, 3, 4, 4}, true);
        auto w = std::make_shared<Tensor>(Shape{2}, true);
        results.push_back(run_check(
            "weighted_sum", seed,
            [=](Rng& rng) {
                fill_normal(*a, rng);
                fill_normal(*b, rng);
                fill_normal(*w, rng);
                return std::vector<Tensor*>{a.get(), b.get(), w.get()};
            },
            [=](Tape& tape) {
                return project(tape, weighted_sum(tape, {*a, *b}, *w), seed + 7);
            }));
    }
    {
        auto x = std::make_shared<Tensor>(Shape{3, 3, 4, 4}, true);
        results.push_back(run_check(
            "dropout", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                return std::vector<Tensor*>{x.get()};
            },
            [=](Tape& tape) {
                Rng mask_rng(derive_seed(seed, "dropout/mask"));
                return project(tape, dropout(tape, *x, 0.3, mask_rng, true), seed + 7);
            }));
    }

    // Every candidate operation, both strides, gradients w.r.t. the input and
    // every learnable parameter of the module.
    for (OpKind kind : kAllOps) {
        for (int stride : {1, 2}) {
            const int c = 4;
            const std::string name =
                std::string("candidate_") + op_name(kind) + "_s" + std::to_string(stride);
            Rng ctor_rng(derive_seed(seed, name + "/ctor"));
            auto op = std::make_shared<CandidateOp>(kind, c, stride, ctor_rng);
            auto x = std::make_shared<Tensor>(Shape{2, c, 6, 6}, true);
            const bool is_zero = kind == OpKind::zero;
            results.push_back(run_check(
                name, seed,
                [=](Rng& rng) {
                    fill_normal(*x, rng);
                    std::vector<Tensor*> checked{x.get()};
                    std::vector<Tensor*> ps;
                    op->collect_params(ps);
                    for (auto* p : ps) {
                        if (p->shape.size() == 4) fill_normal(*p, rng, 0.4);
                        checked.push_back(p);
                    }
                    return checked;
                },
                [=](Tape& tape) {
                    Tensor loss = project(tape, op->forward(tape, *x, true), seed + 7);
                    // The zero operation disconnects its input; tie the loss
                    // to x with weight 0 so the (zero) gradient is checkable.
                    if (is_zero) loss = add(tape, loss, scale(tape, sum(tape, *x), 0.0));
                    return loss;
                }));
        }
    }

    // Composite chain: conv -> BN -> ReLU -> pool -> linear -> cross-entropy.
    {
        auto x = std::make_shared<Tensor>(Shape{2, 2, 6, 6}, true);
        auto w = std::make_shared<Tensor>(Shape{3, 2, 3, 3}, true);
        auto gamma = std::make_shared<Tensor>(Shape{3}, true);
        auto beta = std::make_shared<Tensor>(Shape{3}, true);
        auto state = std::make_shared<BatchNormState>(3);
        auto lw = std::make_shared<Tensor>(Shape{27, 4}, true);  // 3 ch * 3x3 after stride-2 pool
        auto lb = std::make_shared<Tensor>(Shape{4}, true);
        auto labels = std::make_shared<std::vector<int>>(std::vector<int>{1, 3});
        results.push_back(run_check(
            "composite_chain", seed,
            [=](Rng& rng) {
                fill_normal(*x, rng);
                fill_normal(*w, rng, 0.5);
                for (auto& v : *gamma->data) v = rng.uniform(0.5, 1.5);
                fill_normal(*beta, rng, 0.2);
                fill_normal(*lw, rng, 0.3);
                fill_normal(*lb, rng, 0.3);
                return std::vector<Tensor*>{x.get(), w.get(), gamma.get(), beta.get(), lw.get(), lb.get()};
            },
            [=](Tape& tape) {
                Tensor h = conv2d(tape, *x, *w, {1, 1, 1, 1});
                h = batch_norm(tape, h, *gamma, *beta, *state, true);
                h = relu(tape, h);
                h = pool2d(tape, h, PoolMode::max, 3, 2, 1);  // (2,3,3,3)
                Tensor flat = h;
                flat.shape = {2, 27};
                return cross_entropy(tape, linear(tape, flat, *lw, *lb), *labels);
            }));
    }

    return results;
}

}  // namespace pdarts::gradcheck
