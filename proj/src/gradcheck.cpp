#include "dcac/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dcac/ops.hpp"
#include "dcac/rng.hpp"

namespace dcac {

GradCheckCase check_gradients(const std::string& name, const std::vector<TensorPtr>& leaves,
                              const std::function<TensorPtr(Tape&)>& loss_fn, double epsilon,
                              double tolerance) {
    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        for (const auto& leaf : leaves) leaf->zero_grad();
        Tape tape;
        auto loss = loss_fn(tape);
        tape.backward(loss);
        for (const auto& leaf : leaves) {
            leaf->ensure_grad();
            analytic.push_back(leaf->grad);
        }
    }

    auto eval = [&]() {
        Tape tape;
        auto loss = loss_fn(tape);
        return loss->data[0];
    };

    double max_rel = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& leaf = *leaves[li];
        for (std::size_t i = 0; i < leaf.data.size(); ++i) {
            const double saved = leaf.data[i];
            leaf.data[i] = saved + epsilon;
            const double fp = eval();
            leaf.data[i] = saved - epsilon;
            const double fm = eval();
            leaf.data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double a = analytic[li][i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
            max_rel = std::max(max_rel, rel);
        }
    }

    GradCheckCase c;
    c.name = name;
    c.max_rel_error = max_rel;
    c.tolerance = tolerance;
    c.passed = max_rel <= tolerance;
    return c;
}

namespace {

TensorPtr leaf_uniform(Rng& rng, const Shape& shape, double lo, double hi) {
    auto t = Tensor::zeros(shape, /*requires_grad=*/true);
    for (auto& v : t->data) v = rng.uniform(lo, hi);
    return t;
}

// Values bounded away from zero so ReLU kinks sit outside the finite-difference step.
TensorPtr leaf_away_from_zero(Rng& rng, const Shape& shape, double margin) {
    auto t = leaf_uniform(rng, shape, -1.0, 1.0);
    for (auto& v : t->data) {
        if (std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
    }
    return t;
}

// Fixed random weights so the scalar loss mixes all outputs with distinct coefficients;
// a plain sum could let index-swap bugs cancel.
TensorPtr mix_weights(Rng& rng, const Shape& shape) {
    auto t = Tensor::zeros(shape);
    for (auto& v : t->data) v = rng.uniform(0.25, 1.75);
    return t;
}

TensorPtr weighted_sum(Tape& tape, const TensorPtr& out, const TensorPtr& w) {
    return ops::sum(&tape, ops::mul(&tape, out, w));
}

// Regenerates until every pooling window has a clear max, so the finite-difference
// step cannot flip the argmax.
TensorPtr pool_safe_leaf(std::uint64_t seed, const Shape& shape, int k, int s, double gap) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(derive_seed(seed, 77, attempt));
        auto t = leaf_uniform(rng, shape, -1.0, 1.0);
        const auto N = shape[0], C = shape[1], H = shape[2], W = shape[3];
        const auto Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
        bool ok = true;
        for (std::int64_t n = 0; n < N && ok; ++n)
            for (std::int64_t c = 0; c < C && ok; ++c)
                for (std::int64_t ho = 0; ho < Ho && ok; ++ho)
                    for (std::int64_t wo = 0; wo < Wo && ok; ++wo) {
                        double best = -2.0, second = -2.0;
                        for (int i = 0; i < k; ++i)
                            for (int j = 0; j < k; ++j) {
                                const double v =
                                    t->data[static_cast<std::size_t>((((n * C + c) * H +
                                                                       ho * s + i) *
                                                                          W +
                                                                      wo * s + j))];
                                if (v > best) {
                                    second = best;
                                    best = v;
                                } else if (v > second) {
                                    second = v;
                                }
                            }
                        if (best - second < gap) ok = false;
                    }
        if (ok) return t;
    }
}

}  // namespace

GradCheckReport run_builtin_gradcheck(std::uint64_t seed) {
    GradCheckReport report;
    auto add_case = [&](GradCheckCase c) { report.cases.push_back(std::move(c)); };

    {
        Rng rng(derive_seed(seed, 1));
        auto a = leaf_uniform(rng, {2, 3, 4, 5}, -1.0, 1.0);
        auto b = leaf_uniform(rng, {2, 3, 4, 5}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 3, 4, 5});
        add_case(check_gradients("add", {a, b}, [&](Tape& t) {
            return weighted_sum(t, ops::add(&t, a, b), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 2));
        auto a = leaf_uniform(rng, {2, 3, 4, 5}, -1.0, 1.0);
        auto b = leaf_uniform(rng, {2, 3, 4, 5}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 3, 4, 5});
        add_case(check_gradients("mul", {a, b}, [&](Tape& t) {
            return weighted_sum(t, ops::mul(&t, a, b), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 3));
        auto x = leaf_away_from_zero(rng, {2, 3, 4, 5}, 0.05);
        auto w = mix_weights(rng, {2, 3, 4, 5});
        add_case(check_gradients("relu", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::relu(&t, x), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 4));
        auto x = leaf_uniform(rng, {2, 3, 4, 5}, -2.0, 2.0);
        auto w = mix_weights(rng, {2, 3, 4, 5});
        add_case(check_gradients("sigmoid", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::sigmoid(&t, x), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 5));
        auto x = leaf_uniform(rng, {2, 3, 4, 5}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 3, 4, 5});
        add_case(check_gradients("mul_scalar", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::mul_scalar(&t, x, 1.7), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 6));
        auto x = leaf_uniform(rng, {2, 4, 5, 6}, -1.0, 1.0);
        auto s = leaf_uniform(rng, {4}, 0.2, 1.5);
        auto w = mix_weights(rng, {2, 4, 5, 6});
        add_case(check_gradients("scale_channels", {x, s}, [&](Tape& t) {
            return weighted_sum(t, ops::scale_channels(&t, x, s), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 7));
        auto x = leaf_uniform(rng, {2, 3, 8, 8}, -1.0, 1.0);
        auto k = leaf_uniform(rng, {4, 3, 3, 3}, -0.5, 0.5);
        auto b = leaf_uniform(rng, {4}, -0.5, 0.5);
        auto w = mix_weights(rng, {2, 4, 8, 8});
        add_case(check_gradients("conv2d_3x3_pad1", {x, k, b}, [&](Tape& t) {
            return weighted_sum(t, ops::conv2d(&t, x, k, b, {1, 1}, {1, 1}, 1), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 8));
        auto x = leaf_uniform(rng, {1, 3, 9, 9}, -1.0, 1.0);
        auto k = leaf_uniform(rng, {2, 3, 3, 3}, -0.5, 0.5);
        auto w = mix_weights(rng, {1, 2, 4, 4});
        add_case(check_gradients("conv2d_stride2_nobias", {x, k}, [&](Tape& t) {
            return weighted_sum(t, ops::conv2d(&t, x, k, nullptr, {2, 2}, {0, 0}, 1), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 9));
        auto x = leaf_uniform(rng, {2, 4, 6, 6}, -1.0, 1.0);
        auto k = leaf_uniform(rng, {4, 1, 3, 3}, -0.5, 0.5);
        auto b = leaf_uniform(rng, {4}, -0.5, 0.5);
        auto w = mix_weights(rng, {2, 4, 6, 6});
        add_case(check_gradients("conv2d_depthwise", {x, k, b}, [&](Tape& t) {
            return weighted_sum(t, ops::conv2d(&t, x, k, b, {1, 1}, {1, 1}, 4), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 10));
        auto x = leaf_uniform(rng, {2, 6, 4, 4}, -1.0, 1.0);
        auto k = leaf_uniform(rng, {4, 3, 3, 3}, -0.5, 0.5);
        auto b = leaf_uniform(rng, {4}, -0.5, 0.5);
        auto w = mix_weights(rng, {2, 4, 4, 4});
        add_case(check_gradients("conv2d_groups2", {x, k, b}, [&](Tape& t) {
            return weighted_sum(t, ops::conv2d(&t, x, k, b, {1, 1}, {1, 1}, 2), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 11));
        auto x = leaf_uniform(rng, {2, 5, 4, 4}, -1.0, 1.0);
        auto k = leaf_uniform(rng, {3, 5, 1, 1}, -0.5, 0.5);
        auto b = leaf_uniform(rng, {3}, -0.5, 0.5);
        auto w = mix_weights(rng, {2, 3, 4, 4});
        add_case(check_gradients("conv2d_pointwise", {x, k, b}, [&](Tape& t) {
            return weighted_sum(t, ops::conv2d(&t, x, k, b, {1, 1}, {0, 0}, 1), w);
        }));
    }
    {
        Rng wrng(derive_seed(seed, 12, 1));
        auto x = pool_safe_leaf(seed, {2, 3, 8, 8}, 2, 2, 20.0 * 1e-4);
        auto w = mix_weights(wrng, {2, 3, 4, 4});
        add_case(check_gradients("maxpool2d_2x2", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::maxpool2d(&t, x, {2, 2}, {2, 2}), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 13));
        auto x = leaf_uniform(rng, {2, 3, 4, 4}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 3, 8, 8});
        add_case(check_gradients("upsample_nearest_x2", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::upsample_nearest(&t, x, 2), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 14));
        auto x = leaf_uniform(rng, {2, 4, 5, 5}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 4});
        add_case(check_gradients("global_avg_pool", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::global_avg_pool(&t, x), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 15));
        auto x = leaf_uniform(rng, {3, 7}, -1.0, 1.0);
        auto k = leaf_uniform(rng, {2, 7}, -0.5, 0.5);
        auto b = leaf_uniform(rng, {2}, -0.5, 0.5);
        auto w = mix_weights(rng, {3, 2});
        add_case(check_gradients("linear", {x, k, b}, [&](Tape& t) {
            return weighted_sum(t, ops::linear(&t, x, k, b), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 16));
        auto x = leaf_uniform(rng, {2, 3, 4, 4}, -1.0, 1.0);
        add_case(check_gradients("sum", {x}, [&](Tape& t) { return ops::sum(&t, x); }));
    }
    {
        Rng rng(derive_seed(seed, 17));
        auto a = leaf_uniform(rng, {2, 2, 4, 4}, -1.0, 1.0);
        auto b = leaf_uniform(rng, {2, 3, 4, 4}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 5, 4, 4});
        add_case(check_gradients("concat_channels", {a, b}, [&](Tape& t) {
            return weighted_sum(t, ops::concat_channels(&t, {a, b}), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 18));
        auto x = leaf_uniform(rng, {2, 3, 5, 5}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 3, 6, 7});
        add_case(check_gradients("pad2d_zero_br", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::pad2d_zero_br(&t, x, 1, 2), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 19));
        auto x = leaf_uniform(rng, {2, 3, 5, 5}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 3, 7, 7});
        add_case(check_gradients("pad2d_reflect1", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::pad2d_reflect1(&t, x), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 24));
        auto x = leaf_uniform(rng, {2, 3, 6, 7}, -1.0, 1.0);
        auto w = mix_weights(rng, {2, 3, 5, 5});
        add_case(check_gradients("crop2d_br", {x}, [&](Tape& t) {
            return weighted_sum(t, ops::crop2d_br(&t, x, 5, 5), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 20));
        auto x = leaf_uniform(rng, {4, 3, 5, 5}, -1.0, 1.0);
        auto gamma = leaf_uniform(rng, {3}, 0.5, 1.5);
        auto beta = leaf_uniform(rng, {3}, -0.5, 0.5);
        auto rm = Tensor::zeros({3});
        auto rv = Tensor::full({3}, 1.0);
        auto w = mix_weights(rng, {4, 3, 5, 5});
        add_case(check_gradients("batch_norm_training", {x, gamma, beta}, [&](Tape& t) {
            return weighted_sum(
                t, ops::batch_norm(&t, x, gamma, beta, rm, rv, /*training=*/true), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 21));
        auto x = leaf_uniform(rng, {2, 3, 5, 5}, -1.0, 1.0);
        auto gamma = leaf_uniform(rng, {3}, 0.5, 1.5);
        auto beta = leaf_uniform(rng, {3}, -0.5, 0.5);
        auto rm = Tensor::zeros({3});
        auto rv = Tensor::zeros({3});
        for (auto& v : rm->data) v = rng.uniform(-0.3, 0.3);
        for (auto& v : rv->data) v = rng.uniform(0.5, 1.5);
        auto w = mix_weights(rng, {2, 3, 5, 5});
        add_case(check_gradients("batch_norm_eval", {x, gamma, beta}, [&](Tape& t) {
            return weighted_sum(
                t, ops::batch_norm(&t, x, gamma, beta, rm, rv, /*training=*/false), w);
        }));
    }
    {
        Rng rng(derive_seed(seed, 22));
        auto z = leaf_uniform(rng, {6}, -2.0, 2.0);
        auto y = Tensor::zeros({6});
        for (auto& v : y->data) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        add_case(check_gradients("bce_with_logits_mean", {z}, [&](Tape& t) {
            return ops::bce_with_logits_mean(&t, z, y);
        }));
    }
    {
        // Gate pattern: x * sigmoid(conv(x)); exercises fan-out of one tensor into two ops.
        Rng rng(derive_seed(seed, 23));
        auto x = leaf_uniform(rng, {2, 3, 6, 6}, -1.0, 1.0);
        auto k = leaf_uniform(rng, {3, 3, 3, 3}, -0.5, 0.5);
        auto b = leaf_uniform(rng, {3}, -0.2, 0.2);
        auto w = mix_weights(rng, {2, 3, 6, 6});
        add_case(check_gradients("gate_composite", {x, k, b}, [&](Tape& t) {
            auto a = ops::sigmoid(&t, ops::conv2d(&t, x, k, b, {1, 1}, {1, 1}, 1));
            return weighted_sum(t, ops::mul(&t, x, a), w);
        }));
    }
    return report;
}

}  // namespace dcac
