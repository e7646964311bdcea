#include "sigstyle/swapengine.hpp"

#include <unistd.h>

#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "sigstyle/errors.hpp"
#include "sigstyle/hypernet.hpp"
#include "sigstyle/log.hpp"

namespace sigstyle {

namespace {

using json = nlohmann::json;

void write_f64(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    for (double v : t.values()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(bits >> (8 * i));
        f.write(b, 8);
    }
    if (!f) throw IoError("failed writing " + path.string());
}

Tensor read_f64(const std::filesystem::path& path, const Shape& shape) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    Tensor t(shape);
    for (auto& v : t.values()) {
        unsigned char b[8];
        if (!f.read(reinterpret_cast<char*>(b), 8)) throw ParseError(path.string() + ": truncated map file");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        v = std::bit_cast<double>(bits);
    }
    return t;
}

std::string file_name(const TraceKey& k) {
    return "s" + std::to_string(k.step) + "_" + k.layer.str() + "_" + to_string(k.branch) + ".f64";
}

}  // namespace

std::string TraceKey::str() const { return "step " + std::to_string(step) + " " + layer.str() + " " + to_string(branch); }

struct AttentionTrace::SpillDir {
    std::filesystem::path path;
    bool owned = false;
    ~SpillDir() {
        if (!owned) return;
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

AttentionTrace::AttentionTrace(TraceMeta meta, TraceOptions options) : meta_(std::move(meta)), options_(std::move(options)) {}

void AttentionTrace::put(const TraceKey& key, const Tensor& map) {
    if (entries_.count(key)) throw ValidationError("trace entry " + key.str() + " already written");
    Entry e;
    e.shape = map.shape();
    const std::size_t bytes = static_cast<std::size_t>(map.numel()) * sizeof(double);
    if (resident_bytes_ + bytes <= options_.memory_budget_bytes) {
        e.resident = map;
        resident_bytes_ += bytes;
    } else {
        if (!spill_) {
            static std::atomic<int> counter{0};
            spill_ = std::make_shared<SpillDir>();
            if (options_.spill_dir.empty()) {
                spill_->path = std::filesystem::temp_directory_path() /
                               ("sigstyle-trace-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
                spill_->owned = true;
            } else {
                spill_->path = options_.spill_dir;
            }
            std::filesystem::create_directories(spill_->path);
            log().debug("attention trace spilling to {}", spill_->path.string());
        }
        e.file = spill_->path / file_name(key);
        write_f64(e.file, map);
    }
    entries_.emplace(key, std::move(e));
}

Tensor AttentionTrace::get(const TraceKey& key) const {
    auto it = entries_.find(key);
    reads_->push_back(key);
    if (it == entries_.end()) throw TraceGapError("attention trace has no entry for " + key.str());
    if (it->second.resident) return *it->second.resident;
    return read_f64(it->second.file, it->second.shape);
}

void AttentionTrace::erase(const TraceKey& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return;
    if (it->second.resident) resident_bytes_ -= static_cast<std::size_t>(it->second.resident->numel()) * sizeof(double);
    if (!it->second.file.empty()) {
        std::error_code ec;
        std::filesystem::remove(it->second.file, ec);
    }
    entries_.erase(it);
}

std::vector<TraceKey> AttentionTrace::keys() const {
    std::vector<TraceKey> out;
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
}

std::size_t AttentionTrace::spilled_entries() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += !e.resident;
    return n;
}

void check_row_stochastic(const Tensor& map, const std::string& where, double tol) {
    if (map.rank() != 2) throw ValidationError(where + ": attention map must be a matrix");
    const auto rows = map.dim(0), cols = map.dim(1);
    for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) {
            const double v = map[r * cols + c];
            if (!(v >= 0.0)) throw ValidationError(where + ": negative or non-finite probability in row " + std::to_string(r));
            s += v;
        }
        if (std::abs(s - 1.0) > tol) {
            throw ValidationError(where + ": row " + std::to_string(r) + " sums to " + std::to_string(s));
        }
    }
}

void SwapPlan::validate(int num_steps) const {
    if (k < 0 || k > num_steps) {
        throw ConfigError("swap steps k = " + std::to_string(k) + " must lie in [0, " + std::to_string(num_steps) + "]");
    }
    if (branches.empty()) throw ConfigError("swap plan needs at least one guidance branch");
}

std::vector<LayerAddress> SwapPlan::resolved_layers(const Backbone& model) const {
    std::vector<LayerAddress> all;
    for (const auto& a : model.list_attention_addresses({std::nullopt, AttnKind::self_attn, Projection::query})) {
        all.push_back(a.layer());
    }
    if (layers.empty()) return all;
    for (const auto& l : layers) {
        if (l.kind != AttnKind::self_attn) throw ConfigError("swap layer " + l.str() + " is not a self-attention layer");
        if (std::find(all.begin(), all.end(), l) == all.end()) {
            throw UnknownAddressError("backbone has no self-attention layer " + l.str());
        }
    }
    return layers;
}

std::set<GuidanceBranch> active_branches(const SwapPlan& plan, double guidance_scale) {
    std::set<GuidanceBranch> out;
    for (auto b : plan.branches) {
        if (b == GuidanceBranch::conditional || guidance_scale != 1.0) out.insert(b);
    }
    return out;
}

RecordHooks::RecordHooks(AttentionTrace& trace, const SwapPlan& plan, std::vector<LayerAddress> layers)
    : trace_(&trace), plan_(&plan), layers_(layers.begin(), layers.end()) {}

std::optional<Tensor> RecordHooks::on_self_attention(const HookContext& ctx, const LayerAddress& layer,
                                                     const Tensor& probs) {
    if (ctx.step >= 0 && ctx.step < plan_->k && layers_.count(layer) && plan_->branches.count(ctx.branch)) {
        trace_->put({ctx.step, layer, ctx.branch}, probs);
        ++records_;
    }
    return std::nullopt;
}

InjectHooks::InjectHooks(const AttentionTrace& trace, const SwapPlan& plan, std::vector<LayerAddress> layers)
    : trace_(&trace), plan_(&plan), layers_(layers.begin(), layers.end()) {}

std::optional<Tensor> InjectHooks::on_self_attention(const HookContext& ctx, const LayerAddress& layer,
                                                     const Tensor& probs) {
    if (ctx.step < 0 || ctx.step >= plan_->k) {
        ++late_calls_;
        return std::nullopt;
    }
    if (!layers_.count(layer) || !plan_->branches.count(ctx.branch)) return std::nullopt;
    const TraceKey key{ctx.step, layer, ctx.branch};
    Tensor map = trace_->get(key);
    if (map.shape() != probs.shape()) {
        throw DimensionError("traced map for " + layer.str() + " at step " + std::to_string(ctx.step) + " has shape " +
                             shape_str(map.shape()) + ", layer computes " + shape_str(probs.shape()));
    }
    check_row_stochastic(map, "traced map " + key.str());
    ++injections_;
    if (on_inject) on_inject(key, map);
    return map;
}

Reconstruction record_reconstruction(const Backbone& model, const Tensor& z_T, const TextEmbedding& content_text,
                                     const SamplerConfig& cfg, const SwapPlan& plan, const TraceOptions& options) {
    cfg.validate(model.schedule());
    plan.validate(cfg.num_steps);
    Reconstruction r{AttentionTrace({cfg.num_steps, plan.k, model.latent_shape(), cfg.guidance_scale}, options), {}};
    RecordHooks hooks(r.trace, plan, plan.resolved_layers(model));
    r.trajectory = ddim_sample(model, z_T, content_text, cfg, &hooks);
    return r;
}

void check_trace_matches(const AttentionTrace& trace, const SamplerConfig& cfg, const Shape& latent_shape,
                         const SwapPlan& plan) {
    const auto& m = trace.meta();
    if (m.num_steps != cfg.num_steps) {
        throw IncompatibilityError("trace was recorded with T = " + std::to_string(m.num_steps) + ", sampler uses T = " +
                                   std::to_string(cfg.num_steps));
    }
    if (m.latent_shape != latent_shape) {
        throw IncompatibilityError("trace latent shape " + shape_str(m.latent_shape) + " differs from " +
                                   shape_str(latent_shape));
    }
    if (m.guidance_scale != cfg.guidance_scale) {
        throw IncompatibilityError("trace guidance scale " + std::to_string(m.guidance_scale) + " differs from " +
                                   std::to_string(cfg.guidance_scale));
    }
    if (plan.k > m.k_recorded) {
        throw IncompatibilityError("swap plan wants k = " + std::to_string(plan.k) + " but only " +
                                   std::to_string(m.k_recorded) + " steps were recorded");
    }
}

Trajectory stylized_generate(const Backbone& model, const Tensor& z_T, const TextEmbedding& target_text,
                             const AttentionTrace& trace, const SwapPlan& plan, const SamplerConfig& cfg,
                             const LatentBlend& blend, InjectHooks* hooks_out) {
    cfg.validate(model.schedule());
    plan.validate(cfg.num_steps);
    check_trace_matches(trace, cfg, model.latent_shape(), plan);
    InjectHooks local(trace, plan, plan.resolved_layers(model));
    InjectHooks& hooks = hooks_out ? *hooks_out : local;
    return ddim_sample(model, z_T, target_text, cfg, &hooks, blend);
}

SwapResult run_attention_swap(Backbone& model, const Tensor& z_T, const TextEmbedding& content_text,
                              const TextEmbedding& target_text, const StyleCheckpoint* style, double lambda,
                              const SwapPlan& plan, const SamplerConfig& cfg, SwapMode mode, const BranchBlend& blend,
                              const TraceOptions& options) {
    cfg.validate(model.schedule());
    plan.validate(cfg.num_steps);
    if (style) check_compatible(*style, model);
    const auto layers = plan.resolved_layers(model);
    auto styled = [&] { return style ? apply_checkpoint(model, *style, lambda) : PatchScope(); };

    SwapResult out;
    if (mode == SwapMode::replay) {
        Reconstruction rec = record_reconstruction(model, z_T, content_text, cfg, plan, options);
        InjectHooks hooks(rec.trace, plan, layers);
        const auto& recon = rec.trajectory;
        LatentBlend per_step;
        if (blend) per_step = [&](int s, Tensor& z) { blend(s, z, recon.latents[static_cast<std::size_t>(s) + 1]); };
        {
            PatchScope scope = styled();
            out.stylized = stylized_generate(model, z_T, target_text, rec.trace, plan, cfg, per_step, &hooks);
        }
        out.stats = {static_cast<std::int64_t>(rec.trace.size()), hooks.injections(), hooks.calls_at_or_after_k()};
        out.reconstruction = std::move(rec.trajectory);
        out.trace = std::move(rec.trace);
        return out;
    }

    out.trace = AttentionTrace({cfg.num_steps, plan.k, model.latent_shape(), cfg.guidance_scale}, options);
    RecordHooks record(out.trace, plan, layers);
    InjectHooks inject(out.trace, plan, layers);
    const DdimStepper recon_stepper(model, content_text, cfg, Direction::denoise);
    const DdimStepper styled_stepper(model, target_text, cfg, Direction::denoise);
    out.reconstruction = recon_stepper.start(z_T);
    out.stylized = styled_stepper.start(z_T);
    Tensor zr = z_T, zs = z_T;
    for (int s = 0; s < cfg.num_steps; ++s) {
        zr = recon_stepper.step(s, zr, &record);
        out.reconstruction.latents.push_back(zr);
        out.reconstruction.timestep_map.push_back(recon_stepper.timestep_to(s));
        {
            PatchScope scope = styled();
            zs = styled_stepper.step(s, zs, &inject);
        }
        if (blend) blend(s, zs, zr);
        out.stylized.latents.push_back(zs);
        out.stylized.timestep_map.push_back(styled_stepper.timestep_to(s));
    }
    out.stats = {record.records(), inject.injections(), inject.calls_at_or_after_k()};
    return out;
}

void dump_trace(const AttentionTrace& trace, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json index;
    const auto& m = trace.meta();
    index["meta"] = {{"num_steps", m.num_steps},
                     {"k_recorded", m.k_recorded},
                     {"latent_shape", m.latent_shape},
                     {"guidance_scale", m.guidance_scale}};
    json entries = json::array();
    for (const auto& k : trace.keys()) {
        const Tensor map = trace.get(k);
        const auto name = file_name(k);
        write_f64(dir / name, map);
        entries.push_back({{"step", k.step},
                           {"region", to_string(k.layer.region)},
                           {"block_index", k.layer.block_index},
                           {"kind", to_string(k.layer.kind)},
                           {"branch", to_string(k.branch)},
                           {"shape", map.shape()},
                           {"file", name}});
    }
    index["entries"] = entries;
    std::ofstream f(dir / "index.json");
    if (!f) throw IoError("cannot write " + (dir / "index.json").string());
    f << index.dump(1) << "\n";
}

AttentionTrace load_trace_dump(const std::filesystem::path& dir) {
    std::ifstream f(dir / "index.json");
    if (!f) throw IoError("cannot read " + (dir / "index.json").string());
    try {
        const json index = json::parse(f);
        const auto& m = index.at("meta");
        AttentionTrace trace({m.at("num_steps").get<int>(), m.at("k_recorded").get<int>(),
                              m.at("latent_shape").get<Shape>(), m.at("guidance_scale").get<double>()});
        for (const auto& e : index.at("entries")) {
            const std::string branch = e.at("branch").get<std::string>();
            const TraceKey key{e.at("step").get<int>(),
                               {parse_region(e.at("region").get<std::string>()), e.at("block_index").get<int>(),
                                parse_attn_kind(e.at("kind").get<std::string>())},
                               branch == "cond" ? GuidanceBranch::conditional : GuidanceBranch::unconditional};
            trace.put(key, read_f64(dir / e.at("file").get<std::string>(), e.at("shape").get<Shape>()));
        }
        return trace;
    } catch (const json::exception& e) {
        throw ParseError((dir / "index.json").string() + ": " + e.what());
    }
}

}  // namespace sigstyle
