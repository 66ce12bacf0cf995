#include "usrf/tensor.hpp"

#include "usrf/error.hpp"

namespace usrf {

std::string shape_string(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

Parameter& ParameterStore::add(std::string name, Matrix init) {
  if (index_.count(name)) throw InputError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->value = std::move(init);
  p->zero_grad();
  Parameter* raw = p.get();
  index_.emplace(raw->name, raw);
  params_.push_back(std::move(p));
  return *raw;
}

Parameter& ParameterStore::get(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter: " + std::string(name));
  return *it->second;
}

const Parameter& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter: " + std::string(name));
  return *it->second;
}

bool ParameterStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::vector<Matrix> ParameterStore::values() const {
  std::vector<Matrix> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void ParameterStore::set_values(const std::vector<Matrix>& values) {
  if (values.size() != params_.size()) throw DimensionError("parameter count mismatch on restore");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].rows() != params_[i]->value.rows() || values[i].cols() != params_[i]->value.cols())
      throw DimensionError("shape mismatch restoring " + params_[i]->name);
    params_[i]->value = values[i];
  }
}

const Matrix& Tensor::value() const { return tape_->value(id_); }

Matrix Tensor::grad() const {
  const Matrix& g = tape_->grad_of(id_);
  if (g.size() == 0) return Matrix::Zero(rows(), cols());
  return g;
}

double Tensor::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string(v));
  return v(0, 0);
}

bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Tensor Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Tensor Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Tensor Tape::record(const char* op, Matrix value, std::initializer_list<Tensor> inputs,
                    BackwardFn backward) {
  return record(op, std::move(value), std::vector<Tensor>(inputs), std::move(backward));
}

Tensor Tape::record(const char* op, Matrix value, const std::vector<Tensor>& inputs,
                    BackwardFn backward) {
  if (finite_checks_ && !value.allFinite())
    throw NumericalError(std::string("non-finite value produced by ") + op);
  Node n;
  n.value = std::move(value);
  for (const Tensor& t : inputs) {
    if (t.tape_ != this) throw InputError(std::string(op) + ": input recorded on a different tape");
    n.requires_grad = n.requires_grad || nodes_[t.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this) throw InputError("backward: loss belongs to a different tape");
  const Matrix& lv = nodes_[loss.id_].value;
  if (lv.size() != 1) throw DimensionError("backward requires a scalar loss, got " + shape_string(lv));
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id_].requires_grad) return;
  nodes_[loss.id_].grad = Matrix::Ones(1, 1);
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) {
      if (n.param->grad.size() == 0)
        n.param->grad = n.grad;
      else
        n.param->grad += n.grad;
    }
  }
}

}  // namespace usrf
