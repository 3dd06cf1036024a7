#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "orup/error.hpp"

namespace orup {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until the first accumulation
    bool requires_grad = false;

    std::vector<double>& grad_buffer();
};

// Dense row-major float64 tensor. Copies share storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor parameter(Shape shape, std::vector<double> data);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t ndim() const { return shape().size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Direct mutation bypasses the tape; reserved for initialization and optimizer updates.
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    Tensor clone() const;
    Tensor detach() const { return clone(); }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

// One recorded primitive: the output, its parents, and the closure that pushes
// the output gradient into the parents.
struct TapeNode {
    std::shared_ptr<TensorImpl> output;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backward;
};

class Tape {
public:
    void record(TapeNode node);
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1, walks the nodes once in reverse recording
    // order, then drops the tape. Gradients accumulate into leaves.
    void backward(const Tensor& loss);

private:
    std::vector<TapeNode> nodes_;
};

// Activates a tape on the current thread for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Suspends recording on the current thread (evaluation, finite differences).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape();

// Backward through the tape that is active on this thread.
void backward(const Tensor& loss);

}  // namespace orup
