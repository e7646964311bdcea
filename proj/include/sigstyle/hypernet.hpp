#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sigstyle/autograd.hpp"
#include "sigstyle/backbone/backbone.hpp"

namespace sigstyle {

// Learnable tensors of one parameter group, in storage order.
enum class GroupField { cons, row_map, col_map, row_scale, row_shift, col_scale, col_shift, gate };
inline constexpr std::size_t kGroupFields = 8;
const char* to_string(GroupField f);
GroupField parse_group_field(const std::string& s);

// Offset predictor for one weight matrix of shape [dim_r, dim_c]:
//   a = cons * row_map, b = cons * col_map          (scalar -> vector maps)
//   M = a b^T
//   M_ij <- M_ij * col_scale_j + col_shift_j        (column transform)
//   M_ij <- M_ij * row_scale_i + row_shift_i        (row transform)
//   dW = gate * M
// rank(a b^T) = 1; the two shifts raise the bound on rank(dW) to 3.
struct ParameterGroup {
    AttentionAddress address;
    std::array<Tensor, kGroupFields> fields;

    Tensor& operator[](GroupField f) { return fields[static_cast<std::size_t>(f)]; }
    const Tensor& operator[](GroupField f) const { return fields[static_cast<std::size_t>(f)]; }
    std::int64_t count() const;
};

// 1 + 3 dim_r + 3 dim_c + 1
std::int64_t group_parameter_count(std::int64_t dim_r, std::int64_t dim_c);

// dW as a graph over the eight group tensors (same field order as ParameterGroup).
ag::Var offset_graph(const std::array<ag::Var, kGroupFields>& f);

class OffsetPredictor {
public:
    OffsetPredictor() = default;

    // One group per target, cons = 1, gate = 0, maps and transforms drawn
    // from per-address seeded streams. Throws ConfigError on empty targets.
    static OffsetPredictor init(const std::vector<AttentionAddress>& targets, std::uint64_t seed);

    std::vector<AttentionAddress> targets() const;
    const std::vector<ParameterGroup>& groups() const { return groups_; }
    std::vector<ParameterGroup>& groups() { return groups_; }
    // Throws UnknownTargetError when addr has no group.
    const ParameterGroup& group(const AttentionAddress& addr) const;
    ParameterGroup& group(const AttentionAddress& addr);
    bool has_target(const AttentionAddress& addr) const;

    Tensor predict_offset(const AttentionAddress& addr) const;
    std::int64_t parameter_count() const;

    // Flat view keyed "<address>.<field>", e.g. "decoder.0.self.query.gate".
    std::map<std::string, Tensor> state() const;
    static OffsetPredictor from_state(const std::vector<AttentionAddress>& targets,
                                      const std::map<std::string, Tensor>& state);

private:
    std::vector<ParameterGroup> groups_;
};

struct OffsetConfig {
    double lambda = 1.0;
    // Empty means every target of the predictor.
    std::vector<AttentionAddress> targets;
};

// Decoder q/k/v projections of both self- and cross-attention, inventory order.
std::vector<AttentionAddress> default_targets(const Backbone& model);
// Throws ConfigError unless every address is a decoder q/k/v projection.
void check_target_set(const std::vector<AttentionAddress>& targets);

// Holds offsets (and optionally replaced parameters) on a backbone;
// releasing or destroying the scope removes them, leaving every weight
// bitwise equal to its base.
class PatchScope {
public:
    PatchScope() = default;
    PatchScope(Backbone& model, std::vector<AttentionAddress> applied, std::vector<std::string> patched_params = {});
    PatchScope(PatchScope&& other) noexcept;
    PatchScope& operator=(PatchScope&& other) noexcept;
    PatchScope(const PatchScope&) = delete;
    PatchScope& operator=(const PatchScope&) = delete;
    ~PatchScope();

    void release();
    // Adds a replaced parameter to be unpatched on release.
    void track_parameter(const std::string& name) { patched_params_.push_back(name); }
    bool active() const { return model_ != nullptr; }
    const std::vector<AttentionAddress>& addresses() const { return applied_; }

private:
    Backbone* model_ = nullptr;
    std::vector<AttentionAddress> applied_;
    std::vector<std::string> patched_params_;
};

// Sets offset lambda * dW on every configured target.
PatchScope apply_offsets(Backbone& model, const OffsetPredictor& predictor, const OffsetConfig& cfg);

}  // namespace sigstyle
