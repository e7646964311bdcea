#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sigstyle {

enum class Region { encoder, middle, decoder };
enum class AttnKind { self_attn, cross_attn };
enum class Projection { query, key, value, output };

std::string_view to_string(Region r);
std::string_view to_string(AttnKind k);
std::string_view to_string(Projection p);
Region parse_region(std::string_view s);
AttnKind parse_attn_kind(std::string_view s);
Projection parse_projection(std::string_view s);

// One attention layer (a self- or cross-attention module) inside the UNet.
// block_index counts transformer blocks within the region in forward order.
struct LayerAddress {
    Region region = Region::encoder;
    int block_index = 0;
    AttnKind kind = AttnKind::self_attn;

    auto operator<=>(const LayerAddress&) const = default;
    std::string str() const;
};

// One projection matrix of an attention layer. Identity is the
// (region, block_index, kind, projection) tuple; dim_r x dim_c is the shape of
// the weight as stored (rows = output features, cols = input features).
struct AttentionAddress {
    Region region = Region::encoder;
    int block_index = 0;
    AttnKind kind = AttnKind::self_attn;
    Projection projection = Projection::query;
    std::int64_t dim_r = 0;
    std::int64_t dim_c = 0;

    LayerAddress layer() const { return {region, block_index, kind}; }
    std::string str() const;  // e.g. "decoder.1.self.query"

    bool operator==(const AttentionAddress& o) const {
        return region == o.region && block_index == o.block_index && kind == o.kind && projection == o.projection;
    }
    std::weak_ordering operator<=>(const AttentionAddress& o) const {
        if (auto c = region <=> o.region; c != 0) return c;
        if (auto c = block_index <=> o.block_index; c != 0) return c;
        if (auto c = kind <=> o.kind; c != 0) return c;
        return projection <=> o.projection;
    }
};

// Parses "region.block.kind.projection"; dims are left at zero.
AttentionAddress parse_attention_address(std::string_view s);

// Conjunctive filter; unset fields match anything.
struct AddressFilter {
    std::optional<Region> region;
    std::optional<AttnKind> kind;
    std::optional<Projection> projection;

    bool matches(const AttentionAddress& a) const {
        return (!region || a.region == *region) && (!kind || a.kind == *kind) &&
               (!projection || a.projection == *projection);
    }
};

}  // namespace sigstyle
