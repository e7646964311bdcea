#include "sigstyle/hypernet.hpp"

#include <cmath>
#include <utility>

#include "sigstyle/errors.hpp"
#include "sigstyle/hash.hpp"
#include "sigstyle/rng.hpp"

namespace sigstyle {

namespace {

constexpr const char* kFieldNames[kGroupFields] = {"cons",      "row_map",   "col_map",   "row_scale",
                                                   "row_shift", "col_scale", "col_shift", "gate"};

constexpr double kScaleJitter = 0.01;
constexpr double kShiftStd = 0.1;

Shape field_shape(GroupField f, std::int64_t dr, std::int64_t dc) {
    switch (f) {
        case GroupField::cons:
        case GroupField::gate: return {1};
        case GroupField::row_map:
        case GroupField::row_scale:
        case GroupField::row_shift: return {dr};
        case GroupField::col_map:
        case GroupField::col_scale:
        case GroupField::col_shift: return {dc};
    }
    return {};
}

}  // namespace

const char* to_string(GroupField f) { return kFieldNames[static_cast<std::size_t>(f)]; }

GroupField parse_group_field(const std::string& s) {
    for (std::size_t i = 0; i < kGroupFields; ++i) {
        if (s == kFieldNames[i]) return static_cast<GroupField>(i);
    }
    throw ParseError("unknown predictor field '" + s + "'");
}

std::int64_t group_parameter_count(std::int64_t dim_r, std::int64_t dim_c) { return 1 + 3 * dim_r + 3 * dim_c + 1; }

std::int64_t ParameterGroup::count() const {
    std::int64_t n = 0;
    for (const auto& t : fields) n += t.numel();
    return n;
}

ag::Var offset_graph(const std::array<ag::Var, kGroupFields>& f) {
    auto F = [&](GroupField g) -> const ag::Var& { return f[static_cast<std::size_t>(g)]; };
    ag::Var a = ag::scale_by(F(GroupField::cons), F(GroupField::row_map));
    ag::Var b = ag::scale_by(F(GroupField::cons), F(GroupField::col_map));
    ag::Var m = ag::outer(a, b);
    m = ag::add_cols(ag::mul_cols(m, F(GroupField::col_scale)), F(GroupField::col_shift));
    m = ag::add_rows(ag::mul_rows(m, F(GroupField::row_scale)), F(GroupField::row_shift));
    return ag::scale_by(F(GroupField::gate), m);
}

OffsetPredictor OffsetPredictor::init(const std::vector<AttentionAddress>& targets, std::uint64_t seed) {
    if (targets.empty()) throw ConfigError("offset predictor needs at least one target");
    OffsetPredictor p;
    for (const auto& addr : targets) {
        if (addr.dim_r <= 0 || addr.dim_c <= 0) throw ConfigError("target " + addr.str() + " has unknown dimensions");
        if (p.has_target(addr)) throw ConfigError("duplicate target " + addr.str());
        Rng rng(derive_seed(seed, fnv1a64(addr.str())));
        ParameterGroup g;
        g.address = addr;
        const auto dr = addr.dim_r, dc = addr.dim_c;
        g[GroupField::cons] = Tensor::scalar(1.0);
        g[GroupField::row_map] = rng.normal_tensor({dr}, 1.0 / std::sqrt(static_cast<double>(dr)));
        g[GroupField::col_map] = rng.normal_tensor({dc}, 1.0 / std::sqrt(static_cast<double>(dc)));
        for (auto [scale, shift, n] : {std::tuple{GroupField::row_scale, GroupField::row_shift, dr},
                                       std::tuple{GroupField::col_scale, GroupField::col_shift, dc}}) {
            Tensor s = rng.normal_tensor({n}, kScaleJitter);
            for (auto& v : s.values()) v += 1.0;
            g[scale] = std::move(s);
            g[shift] = rng.normal_tensor({n}, kShiftStd / std::sqrt(static_cast<double>(n)));
        }
        g[GroupField::gate] = Tensor::scalar(0.0);
        p.groups_.push_back(std::move(g));
    }
    return p;
}

std::vector<AttentionAddress> OffsetPredictor::targets() const {
    std::vector<AttentionAddress> out;
    for (const auto& g : groups_) out.push_back(g.address);
    return out;
}

bool OffsetPredictor::has_target(const AttentionAddress& addr) const {
    for (const auto& g : groups_) {
        if (g.address == addr) return true;
    }
    return false;
}

const ParameterGroup& OffsetPredictor::group(const AttentionAddress& addr) const {
    for (const auto& g : groups_) {
        if (g.address == addr) return g;
    }
    throw UnknownTargetError("predictor has no group for " + addr.str());
}

ParameterGroup& OffsetPredictor::group(const AttentionAddress& addr) {
    return const_cast<ParameterGroup&>(std::as_const(*this).group(addr));
}

Tensor OffsetPredictor::predict_offset(const AttentionAddress& addr) const {
    const auto& g = group(addr);
    std::array<ag::Var, kGroupFields> vars;
    for (std::size_t i = 0; i < kGroupFields; ++i) vars[i] = ag::constant(g.fields[i]);
    return offset_graph(vars)->value;
}

std::int64_t OffsetPredictor::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& g : groups_) n += g.count();
    return n;
}

std::map<std::string, Tensor> OffsetPredictor::state() const {
    std::map<std::string, Tensor> out;
    for (const auto& g : groups_) {
        for (std::size_t i = 0; i < kGroupFields; ++i) out[g.address.str() + "." + kFieldNames[i]] = g.fields[i];
    }
    return out;
}

OffsetPredictor OffsetPredictor::from_state(const std::vector<AttentionAddress>& targets,
                                            const std::map<std::string, Tensor>& state) {
    if (targets.empty()) throw ConfigError("offset predictor needs at least one target");
    OffsetPredictor p;
    std::size_t used = 0;
    for (const auto& addr : targets) {
        ParameterGroup g;
        g.address = addr;
        for (std::size_t i = 0; i < kGroupFields; ++i) {
            const std::string key = addr.str() + "." + kFieldNames[i];
            auto it = state.find(key);
            if (it == state.end()) throw ParseError("predictor state lacks '" + key + "'");
            const Shape want = field_shape(static_cast<GroupField>(i), addr.dim_r, addr.dim_c);
            if (it->second.shape() != want) {
                throw DimensionError("predictor field '" + key + "' has shape " + shape_str(it->second.shape()) +
                                     ", expected " + shape_str(want));
            }
            g.fields[i] = it->second;
            ++used;
        }
        p.groups_.push_back(std::move(g));
    }
    if (used != state.size()) throw ParseError("predictor state has entries for non-target addresses");
    return p;
}

std::vector<AttentionAddress> default_targets(const Backbone& model) {
    std::vector<AttentionAddress> out;
    for (const auto& a : model.list_attention_addresses({Region::decoder, std::nullopt, std::nullopt})) {
        if (a.projection != Projection::output) out.push_back(a);
    }
    return out;
}

void check_target_set(const std::vector<AttentionAddress>& targets) {
    for (const auto& a : targets) {
        if (a.region != Region::decoder || a.projection == Projection::output) {
            throw ConfigError("offset target " + a.str() + " is not a decoder query/key/value projection");
        }
    }
}

PatchScope::PatchScope(Backbone& model, std::vector<AttentionAddress> applied, std::vector<std::string> patched_params)
    : model_(&model), applied_(std::move(applied)), patched_params_(std::move(patched_params)) {}

PatchScope::PatchScope(PatchScope&& other) noexcept
    : model_(std::exchange(other.model_, nullptr)),
      applied_(std::move(other.applied_)),
      patched_params_(std::move(other.patched_params_)) {}

PatchScope& PatchScope::operator=(PatchScope&& other) noexcept {
    if (this != &other) {
        release();
        model_ = std::exchange(other.model_, nullptr);
        applied_ = std::move(other.applied_);
        patched_params_ = std::move(other.patched_params_);
    }
    return *this;
}

PatchScope::~PatchScope() { release(); }

void PatchScope::release() {
    if (!model_) return;
    for (const auto& a : applied_) model_->clear_offset(a);
    for (const auto& n : patched_params_) model_->unpatch_parameter(n);
    model_ = nullptr;
    applied_.clear();
    patched_params_.clear();
}

PatchScope apply_offsets(Backbone& model, const OffsetPredictor& predictor, const OffsetConfig& cfg) {
    if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda)) throw ConfigError("offset strength lambda must be >= 0");
    const std::vector<AttentionAddress> targets = cfg.targets.empty() ? predictor.targets() : cfg.targets;
    check_target_set(targets);
    // Validate everything before touching the model.
    std::vector<Tensor> deltas;
    for (const auto& addr : targets) {
        const auto& resolved = model.resolve(addr);
        const auto& g = predictor.group(addr);
        if (resolved.dim_r != g.address.dim_r || resolved.dim_c != g.address.dim_c) {
            throw DimensionError("predictor group " + addr.str() + " does not match the backbone's matrix shape");
        }
        Tensor d = predictor.predict_offset(addr);
        for (auto& v : d.values()) v *= cfg.lambda;
        deltas.push_back(std::move(d));
    }
    for (std::size_t i = 0; i < targets.size(); ++i) model.set_offset(targets[i], std::move(deltas[i]));
    return PatchScope(model, targets);
}

}  // namespace sigstyle
