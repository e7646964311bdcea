#pragma once

#include <map>
#include <string>
#include <vector>

#include "sigstyle/autograd.hpp"
#include "sigstyle/tensor.hpp"

namespace sigstyle {

// Named weights with two reversible overlays. Base tensors are never
// modified after loading. A patch replaces a tensor outright; an offset is an
// additive term kept separately from the weight it modifies, so consumers
// compute (W + D) x as W x + D x and the applied delta is exactly D.
class ParameterStore {
public:
    void set_base(const std::string& name, Tensor value);
    bool contains(const std::string& name) const { return base_.count(name) != 0; }
    const Tensor& base(const std::string& name) const;
    // Patch if present, else base (offsets not included).
    const Tensor& effective(const std::string& name) const;
    // Constant graph node holding the effective value (shared, never receives gradients).
    const ag::Var& var(const std::string& name) const;

    void patch(const std::string& name, Tensor value);
    void unpatch(const std::string& name);
    bool is_patched(const std::string& name) const { return patches_.count(name) != 0; }
    // Additive overlays (see above). offset()/offset_var() return null when absent.
    void set_offset(const std::string& name, Tensor delta);
    void clear_offset(const std::string& name);
    const Tensor* offset(const std::string& name) const;
    const ag::Var* offset_var(const std::string& name) const;
    std::vector<std::string> offset_names() const;
    // effective(name) plus its offset, summed elementwise.
    Tensor materialized(const std::string& name) const;

    // Removes every patch and offset.
    void clear_patches();
    std::vector<std::string> patched_names() const;

    std::vector<std::string> names() const;
    std::int64_t total_elements() const;

private:
    struct Entry {
        Tensor value;
        ag::Var node;
    };
    std::map<std::string, Entry> base_;
    std::map<std::string, Entry> patches_;
    std::map<std::string, Entry> offsets_;
};

// Graph-time substitutes for named parameters (used while training).
using ParamOverrides = std::map<std::string, ag::Var>;

}  // namespace sigstyle
