#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "slam/rng.hpp"
#include "slam/tensor.hpp"

namespace slam {

// Named parameter leaves in registration order. Names are dotted paths and
// determine checkpoint identity.
template <typename S>
class ParamStore {
 public:
  Tensor<S> create(const std::string& name, Shape shape, std::vector<S> data) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Tensor<S> t = Tensor<S>::leaf(std::move(shape), std::move(data));
    index_[name] = params_.size();
    params_.push_back({name, t});
    return t;
  }

  Tensor<S> create_normal(const std::string& name, Shape shape, RngStream& rng, double stddev) {
    std::vector<S> data(static_cast<size_t>(shape_size(shape)));
    for (auto& v : data) v = static_cast<S>(rng.normal() * stddev);
    return create(name, std::move(shape), std::move(data));
  }

  Tensor<S> create_const(const std::string& name, Shape shape, S value) {
    std::vector<S> data(static_cast<size_t>(shape_size(shape)), value);
    return create(name, std::move(shape), std::move(data));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<S> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no such parameter: " + name);
    return params_[it->second].second;
  }

  size_t count() const { return params_.size(); }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  const std::vector<std::pair<std::string, Tensor<S>>>& entries() const { return params_; }
  std::vector<std::pair<std::string, Tensor<S>>>& entries() { return params_; }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> params_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace slam
