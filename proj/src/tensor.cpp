#include "dcac/tensor.hpp"

#include <sstream>

namespace dcac {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {
void validate_shape(const Shape& shape) {
    if (shape.size() > 4) {
        raise(ErrorCode::ShapeMismatch, "tensor rank > 4: " + shape_str(shape));
    }
    for (std::int64_t e : shape) {
        if (e <= 0) raise(ErrorCode::ShapeMismatch, "non-positive extent in " + shape_str(shape));
    }
}
}  // namespace

Tensor::Tensor(Shape s, std::vector<double> d, bool req_grad)
    : shape(std::move(s)), data(std::move(d)), requires_grad(req_grad) {
    validate_shape(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
        raise(ErrorCode::ShapeMismatch,
              "tensor data length " + std::to_string(data.size()) +
                  " does not match shape " + shape_str(shape));
    }
}

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
    validate_shape(shape);
    auto n = static_cast<std::size_t>(shape_numel(shape));
    return std::make_shared<Tensor>(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

TensorPtr Tensor::full(Shape shape, double value, bool requires_grad) {
    validate_shape(shape);
    auto n = static_cast<std::size_t>(shape_numel(shape));
    return std::make_shared<Tensor>(std::move(shape), std::vector<double>(n, value), requires_grad);
}

TensorPtr Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

TensorPtr Tensor::scalar(double value) {
    return std::make_shared<Tensor>(Shape{}, std::vector<double>{value}, false);
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) grad.assign(data.size(), 0.0);
}

TensorPtr Tensor::grad_tensor() const {
    if (grad.size() != data.size()) {
        raise(ErrorCode::UsageError, "grad_tensor: gradient not populated");
    }
    return Tensor::from(shape, grad);
}

void Tape::record(TensorPtr out, std::function<void()> backward_step) {
    steps_.push_back({std::move(out), std::move(backward_step)});
}

void Tape::backward(const TensorPtr& loss) {
    if (!loss) raise(ErrorCode::UsageError, "backward: null loss");
    if (loss->numel() != 1) {
        raise(ErrorCode::ShapeMismatch,
              "backward: loss must be a scalar, got shape " + shape_str(loss->shape));
    }
    if (!loss->from_op) {
        raise(ErrorCode::UsageError, "backward: loss was not produced by a recorded operation");
    }
    // Intermediates restart from zero each pass; leaves keep accumulating.
    for (auto& step : steps_) step.out->zero_grad();
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->fn();
}

void Tape::clear() { steps_.clear(); }

}  // namespace dcac
