#include "sigstyle/backbone/parameters.hpp"

#include "sigstyle/errors.hpp"

namespace sigstyle {

void ParameterStore::set_base(const std::string& name, Tensor value) {
    auto node = ag::constant(value);
    base_[name] = Entry{std::move(value), std::move(node)};
}

const Tensor& ParameterStore::base(const std::string& name) const {
    auto it = base_.find(name);
    if (it == base_.end()) throw UnknownAddressError("no parameter named '" + name + "'");
    return it->second.value;
}

const Tensor& ParameterStore::effective(const std::string& name) const {
    if (auto it = patches_.find(name); it != patches_.end()) return it->second.value;
    return base(name);
}

const ag::Var& ParameterStore::var(const std::string& name) const {
    if (auto it = patches_.find(name); it != patches_.end()) return it->second.node;
    auto it = base_.find(name);
    if (it == base_.end()) throw UnknownAddressError("no parameter named '" + name + "'");
    return it->second.node;
}

void ParameterStore::patch(const std::string& name, Tensor value) {
    const auto& b = base(name);
    if (b.shape() != value.shape()) {
        throw DimensionError("patch for '" + name + "' has shape " + shape_str(value.shape()) + ", expected " +
                             shape_str(b.shape()));
    }
    auto node = ag::constant(value);
    patches_[name] = Entry{std::move(value), std::move(node)};
}

void ParameterStore::unpatch(const std::string& name) { patches_.erase(name); }

void ParameterStore::set_offset(const std::string& name, Tensor delta) {
    const auto& b = base(name);
    if (b.shape() != delta.shape()) {
        throw DimensionError("offset for '" + name + "' has shape " + shape_str(delta.shape()) + ", expected " +
                             shape_str(b.shape()));
    }
    auto node = ag::constant(delta);
    offsets_[name] = Entry{std::move(delta), std::move(node)};
}

void ParameterStore::clear_offset(const std::string& name) { offsets_.erase(name); }

const Tensor* ParameterStore::offset(const std::string& name) const {
    auto it = offsets_.find(name);
    return it == offsets_.end() ? nullptr : &it->second.value;
}

const ag::Var* ParameterStore::offset_var(const std::string& name) const {
    auto it = offsets_.find(name);
    return it == offsets_.end() ? nullptr : &it->second.node;
}

Tensor ParameterStore::materialized(const std::string& name) const {
    Tensor out = effective(name);
    if (const Tensor* d = offset(name)) {
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += (*d)[i];
    }
    return out;
}

void ParameterStore::clear_patches() {
    patches_.clear();
    offsets_.clear();
}

std::vector<std::string> ParameterStore::offset_names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : offsets_) out.push_back(k);
    return out;
}

std::vector<std::string> ParameterStore::patched_names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : patches_) out.push_back(k);
    return out;
}

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    out.reserve(base_.size());
    for (const auto& [k, _] : base_) out.push_back(k);
    return out;
}

std::int64_t ParameterStore::total_elements() const {
    std::int64_t n = 0;
    for (const auto& [_, e] : base_) n += e.value.numel();
    return n;
}

}  // namespace sigstyle
