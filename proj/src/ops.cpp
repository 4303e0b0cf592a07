#include "dcac/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

namespace dcac::ops {

using std::int64_t;

namespace {

inline std::size_t idx4(int64_t n, int64_t c, int64_t h, int64_t w, int64_t C, int64_t H,
                        int64_t W) {
    return static_cast<std::size_t>(((n * C + c) * H + h) * W + w);
}

void require_rank4(const TensorPtr& t, const char* op, const char* what) {
    if (!t || t->rank() != 4) {
        raise(ErrorCode::ShapeMismatch, std::string(op) + ": " + what + " must have rank 4, got " +
                                            (t ? shape_str(t->shape) : std::string("null")));
    }
}

void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) {
        raise(ErrorCode::ShapeMismatch, std::string(op) + ": operand shapes differ, " +
                                            shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

TensorPtr conv2d(Tape* tape, const TensorPtr& input, const TensorPtr& weight,
                 const TensorPtr& bias, IntPair stride, IntPair padding, int groups) {
    require_rank4(input, "conv2d", "input");
    require_rank4(weight, "conv2d", "weight");
    const int64_t N = input->extent(0), Cin = input->extent(1), H = input->extent(2),
                  W = input->extent(3);
    const int64_t Cout = weight->extent(0), Cg = weight->extent(1), Kh = weight->extent(2),
                  Kw = weight->extent(3);
    const auto [sh, sw] = stride;
    const auto [ph, pw] = padding;
    if (sh <= 0 || sw <= 0) raise(ErrorCode::UsageError, "conv2d: stride must be positive");
    if (ph < 0 || pw < 0) raise(ErrorCode::UsageError, "conv2d: padding must be non-negative");
    if (groups <= 0) raise(ErrorCode::UsageError, "conv2d: groups must be positive");
    if (Cin % groups != 0) {
        raise(ErrorCode::ShapeMismatch, "conv2d: input channels " + std::to_string(Cin) +
                                            " not divisible by groups " + std::to_string(groups));
    }
    if (Cout % groups != 0) {
        raise(ErrorCode::ShapeMismatch, "conv2d: output channels " + std::to_string(Cout) +
                                            " not divisible by groups " + std::to_string(groups));
    }
    if (Cg != Cin / groups) {
        raise(ErrorCode::ShapeMismatch, "conv2d: weight channel dim is " + std::to_string(Cg) +
                                            ", expected Cin/groups = " +
                                            std::to_string(Cin / groups));
    }
    if (H + 2 * ph < Kh || W + 2 * pw < Kw) {
        raise(ErrorCode::ShapeMismatch,
              "conv2d: kernel " + std::to_string(Kh) + "x" + std::to_string(Kw) +
                  " exceeds padded input " + std::to_string(H + 2 * ph) + "x" +
                  std::to_string(W + 2 * pw));
    }
    if (bias) {
        if (bias->rank() != 1 || bias->extent(0) != Cout) {
            raise(ErrorCode::ShapeMismatch,
                  "conv2d: bias shape " + shape_str(bias->shape) + " does not match Cout " +
                      std::to_string(Cout));
        }
    }

    const int64_t Ho = (H + 2 * ph - Kh) / sh + 1;
    const int64_t Wo = (W + 2 * pw - Kw) / sw + 1;
    const int64_t Hp = H + 2 * ph, Wp = W + 2 * pw;
    const int64_t cpg_in = Cin / groups, cpg_out = Cout / groups;

    // Zero-padded copy of the input so the inner loops are branch-free.
    std::vector<double> xp(static_cast<std::size_t>(N * Cin * Hp * Wp), 0.0);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < Cin; ++c)
            for (int64_t h = 0; h < H; ++h) {
                const double* src = &input->data[idx4(n, c, h, 0, Cin, H, W)];
                double* dst = &xp[idx4(n, c, h + ph, pw, Cin, Hp, Wp)];
                std::copy(src, src + W, dst);
            }

    auto out = Tensor::zeros({N, Cout, Ho, Wo});
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Cout; ++co) {
            const int64_t g = co / cpg_out;
            double* outc = &out->data[idx4(n, co, 0, 0, Cout, Ho, Wo)];
            const double b = bias ? bias->data[static_cast<std::size_t>(co)] : 0.0;
            std::fill(outc, outc + Ho * Wo, b);
            for (int64_t cg = 0; cg < cpg_in; ++cg) {
                const int64_t ci = g * cpg_in + cg;
                for (int64_t kh = 0; kh < Kh; ++kh) {
                    for (int64_t kw = 0; kw < Kw; ++kw) {
                        const double wv =
                            weight->data[idx4(co, cg, kh, kw, Cg, Kh, Kw)];
                        for (int64_t ho = 0; ho < Ho; ++ho) {
                            const double* xrow =
                                &xp[idx4(n, ci, ho * sh + kh, kw, Cin, Hp, Wp)];
                            double* orow = outc + ho * Wo;
                            for (int64_t wo = 0; wo < Wo; ++wo) {
                                orow[wo] += wv * xrow[wo * sw];
                            }
                        }
                    }
                }
            }
        }
    }

    const bool need_dx = input->needs_grad();
    const bool need_dw = weight->needs_grad();
    const bool need_db = bias && bias->needs_grad();
    if (tape && (need_dx || need_dw || need_db)) {
        out->from_op = true;
        tape->record(out, [=, xp = std::move(xp)]() {
            out->ensure_grad();
            const auto& dy = out->grad;
            if (need_db) {
                bias->ensure_grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t co = 0; co < Cout; ++co) {
                        double acc = 0.0;
                        const double* dyrow = &dy[idx4(n, co, 0, 0, Cout, Ho, Wo)];
                        for (int64_t i = 0; i < Ho * Wo; ++i) acc += dyrow[i];
                        bias->grad[static_cast<std::size_t>(co)] += acc;
                    }
            }
            if (need_dw) {
                weight->ensure_grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t co = 0; co < Cout; ++co) {
                        const int64_t g = co / cpg_out;
                        const double* dyc = &dy[idx4(n, co, 0, 0, Cout, Ho, Wo)];
                        for (int64_t cg = 0; cg < cpg_in; ++cg) {
                            const int64_t ci = g * cpg_in + cg;
                            for (int64_t kh = 0; kh < Kh; ++kh)
                                for (int64_t kw = 0; kw < Kw; ++kw) {
                                    double acc = 0.0;
                                    for (int64_t ho = 0; ho < Ho; ++ho) {
                                        const double* xrow = &xp[idx4(
                                            n, ci, ho * sh + kh, kw, Cin, Hp, Wp)];
                                        const double* dyrow = dyc + ho * Wo;
                                        for (int64_t wo = 0; wo < Wo; ++wo)
                                            acc += xrow[wo * sw] * dyrow[wo];
                                    }
                                    weight->grad[idx4(co, cg, kh, kw, Cg, Kh, Kw)] += acc;
                                }
                        }
                    }
            }
            if (need_dx) {
                input->ensure_grad();
                std::vector<double> dxp(static_cast<std::size_t>(N * Cin * Hp * Wp), 0.0);
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t co = 0; co < Cout; ++co) {
                        const int64_t g = co / cpg_out;
                        const double* dyc = &dy[idx4(n, co, 0, 0, Cout, Ho, Wo)];
                        for (int64_t cg = 0; cg < cpg_in; ++cg) {
                            const int64_t ci = g * cpg_in + cg;
                            for (int64_t kh = 0; kh < Kh; ++kh)
                                for (int64_t kw = 0; kw < Kw; ++kw) {
                                    const double wv =
                                        weight->data[idx4(co, cg, kh, kw, Cg, Kh, Kw)];
                                    for (int64_t ho = 0; ho < Ho; ++ho) {
                                        double* dxrow = &dxp[idx4(
                                            n, ci, ho * sh + kh, kw, Cin, Hp, Wp)];
                                        const double* dyrow = dyc + ho * Wo;
                                        for (int64_t wo = 0; wo < Wo; ++wo)
                                            dxrow[wo * sw] += wv * dyrow[wo];
                                    }
                                }
                        }
                    }
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < Cin; ++c)
                        for (int64_t h = 0; h < H; ++h) {
                            const double* src = &dxp[idx4(n, c, h + ph, pw, Cin, Hp, Wp)];
                            double* dst = &input->grad[idx4(n, c, h, 0, Cin, H, W)];
                            for (int64_t w = 0; w < W; ++w) dst[w] += src[w];
                        }
            }
        });
    }
    return out;
}

TensorPtr maxpool2d(Tape* tape, const TensorPtr& input, IntPair kernel, IntPair stride) {
    require_rank4(input, "maxpool2d", "input");
    const int64_t N = input->extent(0), C = input->extent(1), H = input->extent(2),
                  W = input->extent(3);
    const auto [kh, kw] = kernel;
    const auto [sh, sw] = stride;
    if (kh <= 0 || kw <= 0 || sh <= 0 || sw <= 0) {
        raise(ErrorCode::UsageError, "maxpool2d: kernel and stride must be positive");
    }
    if (kh > H || kw > W) {
        raise(ErrorCode::ShapeMismatch, "maxpool2d: kernel " + std::to_string(kh) + "x" +
                                            std::to_string(kw) + " exceeds input " +
                                            std::to_string(H) + "x" + std::to_string(W));
    }
    const int64_t Ho = (H - kh) / sh + 1;
    const int64_t Wo = (W - kw) / sw + 1;

    auto out = Tensor::zeros({N, C, Ho, Wo});
    std::vector<int64_t> argmax(static_cast<std::size_t>(N * C * Ho * Wo));
    std::size_t o = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t ho = 0; ho < Ho; ++ho)
                for (int64_t wo = 0; wo < Wo; ++wo, ++o) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t best_idx = -1;
                    for (int64_t i = 0; i < kh; ++i)
                        for (int64_t j = 0; j < kw; ++j) {
                            const std::size_t src =
                                idx4(n, c, ho * sh + i, wo * sw + j, C, H, W);
                            if (input->data[src] > best) {
                                best = input->data[src];
                                best_idx = static_cast<int64_t>(src);
                            }
                        }
                    out->data[o] = best;
                    argmax[o] = best_idx;
                }

    if (tape && input->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=, argmax = std::move(argmax)]() {
            out->ensure_grad();
            input->ensure_grad();
            for (std::size_t i = 0; i < argmax.size(); ++i) {
                input->grad[static_cast<std::size_t>(argmax[i])] += out->grad[i];
            }
        });
    }
    return out;
}

TensorPtr upsample_nearest(Tape* tape, const TensorPtr& input, int factor) {
    require_rank4(input, "upsample_nearest", "input");
    if (factor <= 0) raise(ErrorCode::UsageError, "upsample_nearest: factor must be positive");
    const int64_t N = input->extent(0), C = input->extent(1), H = input->extent(2),
                  W = input->extent(3);
    const int64_t f = factor, Ho = H * f, Wo = W * f;

    auto out = Tensor::zeros({N, C, Ho, Wo});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t ho = 0; ho < Ho; ++ho) {
                const double* src = &input->data[idx4(n, c, ho / f, 0, C, H, W)];
                double* dst = &out->data[idx4(n, c, ho, 0, C, Ho, Wo)];
                for (int64_t wo = 0; wo < Wo; ++wo) dst[wo] = src[wo / f];
            }

    if (tape && input->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            input->ensure_grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        const double* g = &out->grad[idx4(n, c, ho, 0, C, Ho, Wo)];
                        double* dst = &input->grad[idx4(n, c, ho / f, 0, C, H, W)];
                        for (int64_t wo = 0; wo < Wo; ++wo) dst[wo / f] += g[wo];
                    }
        });
    }
    return out;
}

TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "add");
    auto out = Tensor::zeros(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    const bool need_da = a->needs_grad(), need_db = b->needs_grad();
    if (tape && (need_da || need_db)) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            if (need_da) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
            }
            if (need_db) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "mul");
    auto out = Tensor::zeros(a->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    const bool need_da = a->needs_grad(), need_db = b->needs_grad();
    if (tape && (need_da || need_db)) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            if (need_da) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i)
                    a->grad[i] += out->grad[i] * b->data[i];
            }
            if (need_db) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i)
                    b->grad[i] += out->grad[i] * a->data[i];
            }
        });
    }
    return out;
}

TensorPtr relu(Tape* tape, const TensorPtr& x) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i)
        out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    if (tape && x->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            x->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i)
                if (x->data[i] > 0.0) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

TensorPtr sigmoid(Tape* tape, const TensorPtr& x) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = stable_sigmoid(x->data[i]);
    if (tape && x->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            x->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) {
                const double s = out->data[i];
                x->grad[i] += out->grad[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

TensorPtr scale_channels(Tape* tape, const TensorPtr& x, const TensorPtr& s) {
    require_rank4(x, "scale_channels", "input");
    const int64_t N = x->extent(0), C = x->extent(1), H = x->extent(2), W = x->extent(3);
    if (s->rank() != 1 || s->extent(0) != C) {
        raise(ErrorCode::ShapeMismatch, "scale_channels: scale shape " + shape_str(s->shape) +
                                            " does not broadcast over channel count " +
                                            std::to_string(C));
    }
    auto out = Tensor::zeros(x->shape);
    const int64_t plane = H * W;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double sv = s->data[static_cast<std::size_t>(c)];
            const double* src = &x->data[idx4(n, c, 0, 0, C, H, W)];
            double* dst = &out->data[idx4(n, c, 0, 0, C, H, W)];
            for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * sv;
        }
    const bool need_dx = x->needs_grad(), need_ds = s->needs_grad();
    if (tape && (need_dx || need_ds)) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            if (need_dx) x->ensure_grad();
            if (need_ds) s->ensure_grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const std::size_t base = idx4(n, c, 0, 0, C, H, W);
                    const double sv = s->data[static_cast<std::size_t>(c)];
                    double acc = 0.0;
                    for (int64_t i = 0; i < plane; ++i) {
                        const double g = out->grad[base + static_cast<std::size_t>(i)];
                        if (need_dx) x->grad[base + static_cast<std::size_t>(i)] += g * sv;
                        acc += g * x->data[base + static_cast<std::size_t>(i)];
                    }
                    if (need_ds) s->grad[static_cast<std::size_t>(c)] += acc;
                }
        });
    }
    return out;
}

TensorPtr mul_scalar(Tape* tape, const TensorPtr& x, double c) {
    auto out = Tensor::zeros(x->shape);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * c;
    if (tape && x->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            x->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

TensorPtr global_avg_pool(Tape* tape, const TensorPtr& x) {
    require_rank4(x, "global_avg_pool", "input");
    const int64_t N = x->extent(0), C = x->extent(1), H = x->extent(2), W = x->extent(3);
    const int64_t plane = H * W;
    auto out = Tensor::zeros({N, C});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* src = &x->data[idx4(n, c, 0, 0, C, H, W)];
            double acc = 0.0;
            for (int64_t i = 0; i < plane; ++i) acc += src[i];
            out->data[static_cast<std::size_t>(n * C + c)] = acc / static_cast<double>(plane);
        }
    if (tape && x->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            x->ensure_grad();
            const double inv = 1.0 / static_cast<double>(plane);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const double g = out->grad[static_cast<std::size_t>(n * C + c)] * inv;
                    double* dst = &x->grad[idx4(n, c, 0, 0, C, H, W)];
                    for (int64_t i = 0; i < plane; ++i) dst[i] += g;
                }
        });
    }
    return out;
}

TensorPtr linear(Tape* tape, const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias) {
    if (x->rank() != 2 || weight->rank() != 2) {
        raise(ErrorCode::ShapeMismatch, "linear: expected rank-2 input and weight, got " +
                                            shape_str(x->shape) + " and " +
                                            shape_str(weight->shape));
    }
    const int64_t N = x->extent(0), F = x->extent(1);
    const int64_t O = weight->extent(0), Fw = weight->extent(1);
    if (F != Fw) {
        raise(ErrorCode::ShapeMismatch, "linear: input feature dim " + std::to_string(F) +
                                            " does not match weight inner dim " +
                                            std::to_string(Fw));
    }
    if (!bias || bias->rank() != 1 || bias->extent(0) != O) {
        raise(ErrorCode::ShapeMismatch, "linear: bias must have shape [" + std::to_string(O) + "]");
    }
    auto out = Tensor::zeros({N, O});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t o = 0; o < O; ++o) {
            double acc = bias->data[static_cast<std::size_t>(o)];
            const double* xr = &x->data[static_cast<std::size_t>(n * F)];
            const double* wr = &weight->data[static_cast<std::size_t>(o * F)];
            for (int64_t f = 0; f < F; ++f) acc += xr[f] * wr[f];
            out->data[static_cast<std::size_t>(n * O + o)] = acc;
        }
    const bool need_dx = x->needs_grad(), need_dw = weight->needs_grad(),
               need_db = bias->needs_grad();
    if (tape && (need_dx || need_dw || need_db)) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            if (need_dx) x->ensure_grad();
            if (need_dw) weight->ensure_grad();
            if (need_db) bias->ensure_grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t o = 0; o < O; ++o) {
                    const double g = out->grad[static_cast<std::size_t>(n * O + o)];
                    if (need_db) bias->grad[static_cast<std::size_t>(o)] += g;
                    const double* xr = &x->data[static_cast<std::size_t>(n * F)];
                    const double* wr = &weight->data[static_cast<std::size_t>(o * F)];
                    for (int64_t f = 0; f < F; ++f) {
                        if (need_dw) weight->grad[static_cast<std::size_t>(o * F + f)] += g * xr[f];
                        if (need_dx) x->grad[static_cast<std::size_t>(n * F + f)] += g * wr[f];
                    }
                }
        });
    }
    return out;
}

TensorPtr sum(Tape* tape, const TensorPtr& x) {
    double acc = 0.0;
    for (double v : x->data) acc += v;
    auto out = Tensor::scalar(acc);
    if (tape && x->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            x->ensure_grad();
            const double g = out->grad[0];
            for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += g;
        });
    }
    return out;
}

TensorPtr concat_channels(Tape* tape, const std::vector<TensorPtr>& xs) {
    if (xs.empty()) raise(ErrorCode::UsageError, "concat_channels: no inputs");
    require_rank4(xs[0], "concat_channels", "input");
    const int64_t N = xs[0]->extent(0), H = xs[0]->extent(2), W = xs[0]->extent(3);
    int64_t Ctot = 0;
    for (const auto& x : xs) {
        require_rank4(x, "concat_channels", "input");
        if (x->extent(0) != N || x->extent(2) != H || x->extent(3) != W) {
            raise(ErrorCode::ShapeMismatch,
                  "concat_channels: shape " + shape_str(x->shape) +
                      " does not align with " + shape_str(xs[0]->shape) +
                      " on batch or spatial dims");
        }
        Ctot += x->extent(1);
    }
    auto out = Tensor::zeros({N, Ctot, H, W});
    const int64_t plane = H * W;
    int64_t coff = 0;
    for (const auto& x : xs) {
        const int64_t C = x->extent(1);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const double* src = &x->data[idx4(n, c, 0, 0, C, H, W)];
                double* dst = &out->data[idx4(n, coff + c, 0, 0, Ctot, H, W)];
                std::copy(src, src + plane, dst);
            }
        coff += C;
    }
    bool any = false;
    for (const auto& x : xs) any = any || x->needs_grad();
    if (tape && any) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            int64_t off = 0;
            for (const auto& x : xs) {
                const int64_t C = x->extent(1);
                if (x->needs_grad()) {
                    x->ensure_grad();
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t c = 0; c < C; ++c) {
                            const double* src =
                                &out->grad[idx4(n, off + c, 0, 0, Ctot, H, W)];
                            double* dst = &x->grad[idx4(n, c, 0, 0, C, H, W)];
                            for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
                        }
                }
                off += C;
            }
        });
    }
    return out;
}

TensorPtr pad2d_zero_br(Tape* tape, const TensorPtr& x, int bottom, int right) {
    require_rank4(x, "pad2d_zero_br", "input");
    if (bottom < 0 || right < 0) raise(ErrorCode::UsageError, "pad2d_zero_br: negative pad");
    const int64_t N = x->extent(0), C = x->extent(1), H = x->extent(2), W = x->extent(3);
    const int64_t Ho = H + bottom, Wo = W + right;
    auto out = Tensor::zeros({N, C, Ho, Wo});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t h = 0; h < H; ++h) {
                const double* src = &x->data[idx4(n, c, h, 0, C, H, W)];
                double* dst = &out->data[idx4(n, c, h, 0, C, Ho, Wo)];
                std::copy(src, src + W, dst);
            }
    if (tape && x->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            x->ensure_grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t h = 0; h < H; ++h) {
                        const double* src = &out->grad[idx4(n, c, h, 0, C, Ho, Wo)];
                        double* dst = &x->grad[idx4(n, c, h, 0, C, H, W)];
                        for (int64_t w = 0; w < W; ++w) dst[w] += src[w];
                    }
        });
    }
    return out;
}

TensorPtr pad2d_reflect1(Tape* tape, const TensorPtr& x) {
    require_rank4(x, "pad2d_reflect1", "input");
    const int64_t N = x->extent(0), C = x->extent(1), H = x->extent(2), W = x->extent(3);
    if (H < 2 || W < 2) {
        raise(ErrorCode::ShapeMismatch,
              "pad2d_reflect1: spatial dims must be >= 2, got " + std::to_string(H) + "x" +
                  std::to_string(W));
    }
    const int64_t Ho = H + 2, Wo = W + 2;
    auto reflect = [](int64_t i, int64_t n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };
    auto out = Tensor::zeros({N, C, Ho, Wo});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t ho = 0; ho < Ho; ++ho) {
                const int64_t hs = reflect(ho - 1, H);
                const double* src = &x->data[idx4(n, c, hs, 0, C, H, W)];
                double* dst = &out->data[idx4(n, c, ho, 0, C, Ho, Wo)];
                for (int64_t wo = 0; wo < Wo; ++wo) dst[wo] = src[reflect(wo - 1, W)];
            }
    if (tape && x->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            x->ensure_grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t ho = 0; ho < Ho; ++ho) {
                        const int64_t hs = reflect(ho - 1, H);
                        const double* src = &out->grad[idx4(n, c, ho, 0, C, Ho, Wo)];
                        double* dst = &x->grad[idx4(n, c, hs, 0, C, H, W)];
                        for (int64_t wo = 0; wo < Wo; ++wo) dst[reflect(wo - 1, W)] += src[wo];
                    }
        });
    }
    return out;
}

TensorPtr crop2d_br(Tape* tape, const TensorPtr& x, std::int64_t out_h, std::int64_t out_w) {
    require_rank4(x, "crop2d_br", "input");
    const int64_t N = x->extent(0), C = x->extent(1), H = x->extent(2), W = x->extent(3);
    if (out_h < 1 || out_w < 1 || out_h > H || out_w > W) {
        raise(ErrorCode::ShapeMismatch, "crop2d_br: target " + std::to_string(out_h) + "x" +
                                            std::to_string(out_w) + " not within input " +
                                            std::to_string(H) + "x" + std::to_string(W));
    }
    auto out = Tensor::zeros({N, C, out_h, out_w});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t h = 0; h < out_h; ++h) {
                const double* src = &x->data[idx4(n, c, h, 0, C, H, W)];
                double* dst = &out->data[idx4(n, c, h, 0, C, out_h, out_w)];
                std::copy(src, src + out_w, dst);
            }
    if (tape && x->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            x->ensure_grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t h = 0; h < out_h; ++h) {
                        const double* src = &out->grad[idx4(n, c, h, 0, C, out_h, out_w)];
                        double* dst = &x->grad[idx4(n, c, h, 0, C, H, W)];
                        for (int64_t w = 0; w < out_w; ++w) dst[w] += src[w];
                    }
        });
    }
    return out;
}

TensorPtr batch_norm(Tape* tape, const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, const TensorPtr& running_mean,
                     const TensorPtr& running_var, bool training, double momentum, double eps) {
    require_rank4(x, "batch_norm", "input");
    const int64_t N = x->extent(0), C = x->extent(1), H = x->extent(2), W = x->extent(3);
    for (const auto& [t, name] : {std::pair{gamma, "gamma"}, {beta, "beta"},
                                  {running_mean, "running_mean"}, {running_var, "running_var"}}) {
        if (!t || t->rank() != 1 || t->extent(0) != C) {
            raise(ErrorCode::ShapeMismatch, std::string("batch_norm: ") + name +
                                                " must have shape [" + std::to_string(C) + "]");
        }
    }
    if (training && N < 2) {
        raise(ErrorCode::DataError,
              "batch_norm: training mode requires batch size >= 2, got " + std::to_string(N));
    }

    const int64_t plane = H * W;
    const int64_t m = N * plane;
    std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
    std::vector<double> invstd(static_cast<std::size_t>(C), 0.0);

    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const double* src = &x->data[idx4(n, c, 0, 0, C, H, W)];
                for (int64_t i = 0; i < plane; ++i) acc += src[i];
            }
            mean[static_cast<std::size_t>(c)] = acc / static_cast<double>(m);
        }
        for (int64_t c = 0; c < C; ++c) {
            const double mu = mean[static_cast<std::size_t>(c)];
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const double* src = &x->data[idx4(n, c, 0, 0, C, H, W)];
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = src[i] - mu;
                    acc += d * d;
                }
            }
            const double var = acc / static_cast<double>(m);
            invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
            // Running stats: biased mean, unbiased variance.
            running_mean->data[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_mean->data[static_cast<std::size_t>(c)] +
                momentum * mu;
            running_var->data[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_var->data[static_cast<std::size_t>(c)] +
                momentum * var * static_cast<double>(m) / static_cast<double>(m - 1);
        }
    } else {
        for (int64_t c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = running_mean->data[static_cast<std::size_t>(c)];
            invstd[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(running_var->data[static_cast<std::size_t>(c)] + eps);
        }
    }

    auto out = Tensor::zeros(x->shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double mu = mean[static_cast<std::size_t>(c)];
            const double is = invstd[static_cast<std::size_t>(c)];
            const double g = gamma->data[static_cast<std::size_t>(c)];
            const double b = beta->data[static_cast<std::size_t>(c)];
            const double* src = &x->data[idx4(n, c, 0, 0, C, H, W)];
            double* dst = &out->data[idx4(n, c, 0, 0, C, H, W)];
            for (int64_t i = 0; i < plane; ++i) dst[i] = g * (src[i] - mu) * is + b;
        }

    const bool need_dx = x->needs_grad(), need_dg = gamma->needs_grad(),
               need_db = beta->needs_grad();
    if (tape && (need_dx || need_dg || need_db)) {
        out->from_op = true;
        tape->record(out, [=, mean = std::move(mean), invstd = std::move(invstd)]() {
            out->ensure_grad();
            if (need_dx) x->ensure_grad();
            if (need_dg) gamma->ensure_grad();
            if (need_db) beta->ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                const double mu = mean[static_cast<std::size_t>(c)];
                const double is = invstd[static_cast<std::size_t>(c)];
                const double g = gamma->data[static_cast<std::size_t>(c)];
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const std::size_t base = idx4(n, c, 0, 0, C, H, W);
                    for (int64_t i = 0; i < plane; ++i) {
                        const double dy = out->grad[base + static_cast<std::size_t>(i)];
                        const double xhat =
                            (x->data[base + static_cast<std::size_t>(i)] - mu) * is;
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                    }
                }
                if (need_dg) gamma->grad[static_cast<std::size_t>(c)] += sum_dy_xhat;
                if (need_db) beta->grad[static_cast<std::size_t>(c)] += sum_dy;
                if (need_dx) {
                    if (training) {
                        const double inv_m = 1.0 / static_cast<double>(m);
                        for (int64_t n = 0; n < N; ++n) {
                            const std::size_t base = idx4(n, c, 0, 0, C, H, W);
                            for (int64_t i = 0; i < plane; ++i) {
                                const double dy = out->grad[base + static_cast<std::size_t>(i)];
                                const double xhat =
                                    (x->data[base + static_cast<std::size_t>(i)] - mu) * is;
                                x->grad[base + static_cast<std::size_t>(i)] +=
                                    g * is * (dy - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                            }
                        }
                    } else {
                        for (int64_t n = 0; n < N; ++n) {
                            const std::size_t base = idx4(n, c, 0, 0, C, H, W);
                            for (int64_t i = 0; i < plane; ++i) {
                                x->grad[base + static_cast<std::size_t>(i)] +=
                                    g * is * out->grad[base + static_cast<std::size_t>(i)];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr bce_with_logits_mean(Tape* tape, const TensorPtr& logits, const TensorPtr& targets) {
    const int64_t n = logits->numel();
    if (targets->numel() != n) {
        raise(ErrorCode::ShapeMismatch,
              "bce_with_logits_mean: logits count " + std::to_string(n) +
                  " does not match targets count " + std::to_string(targets->numel()));
    }
    if (n == 0) raise(ErrorCode::UsageError, "bce_with_logits_mean: empty batch");
    for (double y : targets->data) {
        if (y < 0.0 || y > 1.0) {
            raise(ErrorCode::DataError, "bce_with_logits_mean: target outside [0,1]");
        }
    }
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double z = logits->data[static_cast<std::size_t>(i)];
        const double y = targets->data[static_cast<std::size_t>(i)];
        acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    auto out = Tensor::scalar(acc / static_cast<double>(n));
    if (tape && logits->needs_grad()) {
        out->from_op = true;
        tape->record(out, [=]() {
            out->ensure_grad();
            logits->ensure_grad();
            const double g = out->grad[0] / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) {
                const double z = logits->data[static_cast<std::size_t>(i)];
                const double y = targets->data[static_cast<std::size_t>(i)];
                logits->grad[static_cast<std::size_t>(i)] += g * (stable_sigmoid(z) - y);
            }
        });
    }
    return out;
}

}  // namespace dcac::ops
