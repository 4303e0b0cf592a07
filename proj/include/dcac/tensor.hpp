#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "dcac/error.hpp"

namespace dcac {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense double-precision tensor, row-major, rank <= 4 (N,C,H,W for images).
// Treated as immutable once produced by an op; only grad accumulates.
class Tensor {
  public:
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;

    // grad is lazily allocated to data.size() zeros the first time the
    // backward pass touches this tensor.
    std::vector<double> grad;

    // Set when a recorded op produced this tensor, so gradients chain
    // through it even though it is not a leaf parameter.
    bool from_op = false;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d, bool req_grad = false);

    static TensorPtr zeros(Shape shape, bool requires_grad = false);
    static TensorPtr full(Shape shape, double value, bool requires_grad = false);
    static TensorPtr from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static TensorPtr scalar(double value);

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t extent(int dim) const { return shape[static_cast<std::size_t>(dim)]; }

    bool needs_grad() const { return requires_grad || from_op; }
    void ensure_grad();
    void zero_grad();

    // grad exposed as a Tensor of identical shape (copies).
    TensorPtr grad_tensor() const;
};

// Records one backward rule per op in forward order; backward replays them
// in exact reverse order. Confined to one logical thread.
class Tape {
  public:
    // out is the tensor the recorded op produced; its grad is cleared at the
    // start of every backward pass so repeated passes accumulate only into
    // leaf tensors.
    void record(TensorPtr out, std::function<void()> backward_step);

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. loss must be
    // a single-element tensor produced through recorded operations.
    void backward(const TensorPtr& loss);

    std::size_t size() const { return steps_.size(); }
    void clear();

  private:
    struct Step {
        TensorPtr out;
        std::function<void()> fn;
    };
    std::vector<Step> steps_;
};

}  // namespace dcac
