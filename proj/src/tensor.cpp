#include "cbias/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace cbias {
namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values,
                                       bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_string(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  if (requires_grad) node->ensure_grad();
  return node;
}

const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw std::logic_error("use of undefined tensor");
  return *node;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in " + shape_string(shape));
  }
  std::vector<double> values(shape_numel(shape), value);
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in " + shape_string(shape));
  }
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  return node_->value;
}

std::span<const double> Tensor::grad() const {
  const auto& n = checked(node_);
  if (!n.requires_grad) throw std::logic_error("tensor does not require grad");
  return n.grad;
}

std::span<double> Tensor::mutable_grad() {
  checked(node_);
  if (!node_->requires_grad) throw std::logic_error("tensor does not require grad");
  node_->ensure_grad();
  return node_->grad;
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.value.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_string(n.shape));
  }
  return n.value[0];
}

void Tensor::zero_grad() {
  checked(node_);
  if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::clone() const {
  const auto& n = checked(node_);
  return Tensor(new_node(n.shape, n.value, n.requires_grad));
}

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  return Tensor(new_node(n.shape, n.value, false));
}

const char* Tensor::op_name() const { return checked(node_).op; }

Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                   std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward) {
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto node = new_node(std::move(shape), std::move(values), needs);
  node->op = op;
  if (needs) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tape::Tape(const Tensor& root) : root_(root) {
  if (!root.defined()) throw std::logic_error("tape over undefined tensor");
  std::vector<detail::Node*> stack{root.node().get()};
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> found;
  if (root.requires_grad()) {
    found.push_back(root.node());
    seen.insert(root.node().get());
  }
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    for (const auto& in : n->inputs) {
      if (!in->requires_grad || !seen.insert(in.get()).second) continue;
      found.push_back(in);
      stack.push_back(in.get());
    }
  }
  std::sort(found.begin(), found.end(),
            [](const auto& a, const auto& b) { return a->seq < b->seq; });
  nodes_ = std::move(found);
}

std::vector<const char*> Tape::op_names() const {
  std::vector<const char*> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n->op);
  return names;
}

std::vector<std::uint64_t> Tape::sequence() const {
  std::vector<std::uint64_t> seq;
  seq.reserve(nodes_.size());
  for (const auto& n : nodes_) seq.push_back(n->seq);
  return seq;
}

void Tape::backward() {
  if (root_.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got " +
                     shape_string(root_.shape()));
  }
  if (!root_.requires_grad()) return;
  for (auto& n : nodes_) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  root_.node()->ensure_grad();
  root_.node()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& n = **it;
    if (!n.backward) continue;
    for (auto& in : n.inputs) in->ensure_grad();
    n.backward(n);
  }
}

void backward(const Tensor& loss) { Tape(loss).backward(); }

}  // namespace cbias
