#include "orup/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace orup {

namespace {
thread_local Tape* g_active_tape = nullptr;

void check_finite(std::span<const double> values, const char* what) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string("non-finite value in ") + what);
        }
    }
}
}  // namespace

std::size_t numel_of(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
    for (std::size_t e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel_of(shape) != data.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
    check_finite(data, "tensor construction");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    return t;
}

const Shape& Tensor::shape() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return impl_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
    const Shape& s = shape();
    if (i >= s.size()) throw DimensionError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[i];
}

std::size_t Tensor::numel() const { return numel_of(shape()); }

std::span<const double> Tensor::data() const {
    shape();
    return impl_->data;
}

std::span<double> Tensor::mutable_data() {
    shape();
    return impl_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    shape();
    impl_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    shape();
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
    auto copy = std::make_shared<TensorImpl>();
    copy->shape = shape();
    copy->data = impl_->data;
    return Tensor(std::move(copy));
}

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    const auto& target = loss.impl();
    const auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                                 [&](const TapeNode& n) { return n.output == target; });
    if (it == nodes_.rend()) {
        throw ContractError("backward: loss was not recorded on this tape");
    }
    target->grad_buffer()[0] += 1.0;
    for (auto node = it; node != nodes_.rend(); ++node) {
        if (node->output->grad.empty()) continue;
        node->backward();
    }
    for (auto& node : nodes_) {
        if (!node.output->requires_grad || node.parents.empty()) continue;
        // Interior nodes do not keep gradients past the pass.
        node.output->grad.clear();
    }
    nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
    Tape* tape = active_tape();
    if (!tape) throw ContractError("backward called with no active tape");
    tape->backward(loss);
}

}  // namespace orup
