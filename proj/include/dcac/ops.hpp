#pragma once

#include <utility>
#include <vector>

#include "dcac/tensor.hpp"

// Forward operations with reverse-mode gradient rules. Every op computes its
// result eagerly; when a tape is supplied and any input needs a gradient, a
// backward step is recorded. Pass tape = nullptr for inference.
//
// Accumulation order is sequential row-major everywhere, so repeated runs on
// the same inputs are bit-identical.

namespace dcac::ops {

using IntPair = std::pair<int, int>;

// Cross-correlation (no kernel flip). input [N,Cin,H,W], weight
// [Cout,Cin/groups,Kh,Kw], bias [Cout] or null. Zero padding.
TensorPtr conv2d(Tape* tape, const TensorPtr& input, const TensorPtr& weight,
                 const TensorPtr& bias, IntPair stride, IntPair padding, int groups = 1);

// Gradient routes to the first maximum in row-major window order.
TensorPtr maxpool2d(Tape* tape, const TensorPtr& input, IntPair kernel, IntPair stride);

TensorPtr upsample_nearest(Tape* tape, const TensorPtr& input, int factor);

TensorPtr add(Tape* tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape* tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr relu(Tape* tape, const TensorPtr& x);
TensorPtr sigmoid(Tape* tape, const TensorPtr& x);
// Per-channel broadcast: x [N,C,H,W] * s [C]. The only broadcast in the engine.
TensorPtr scale_channels(Tape* tape, const TensorPtr& x, const TensorPtr& s);
TensorPtr mul_scalar(Tape* tape, const TensorPtr& x, double c);

TensorPtr global_avg_pool(Tape* tape, const TensorPtr& x);  // [N,C,H,W] -> [N,C]

TensorPtr linear(Tape* tape, const TensorPtr& x, const TensorPtr& weight,
                 const TensorPtr& bias);  // [N,F],[O,F],[O] -> [N,O]

TensorPtr sum(Tape* tape, const TensorPtr& x);  // -> scalar

// Channel concatenation of [N,Ci,H,W] tensors sharing N,H,W.
TensorPtr concat_channels(Tape* tape, const std::vector<TensorPtr>& xs);

// Zero padding on the bottom/right spatial edges only.
TensorPtr pad2d_zero_br(Tape* tape, const TensorPtr& x, int bottom, int right);

// One-pixel reflection padding (mirror without repeating the edge sample).
TensorPtr pad2d_reflect1(Tape* tape, const TensorPtr& x);

// Keeps the top-left out_h x out_w window; inverse of pad2d_zero_br.
TensorPtr crop2d_br(Tape* tape, const TensorPtr& x, std::int64_t out_h, std::int64_t out_w);

// Per-channel batch normalization over (N,H,W). In training mode batch
// statistics normalize and running statistics are updated in place; otherwise
// running statistics normalize. Training mode requires N >= 2.
TensorPtr batch_norm(Tape* tape, const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, const TensorPtr& running_mean,
                     const TensorPtr& running_var, bool training, double momentum = 0.1,
                     double eps = 1e-5);

// Mean binary cross-entropy on sigmoid(logits), computed in the numerically
// stable log1p form. logits [N,1] or [N]; targets [N] in {0,1}, no gradient.
TensorPtr bce_with_logits_mean(Tape* tape, const TensorPtr& logits, const TensorPtr& targets);

}  // namespace dcac::ops
