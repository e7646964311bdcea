#include "sigstyle/backbone/address.hpp"

#include <charconv>

#include "sigstyle/errors.hpp"

namespace sigstyle {

std::string_view to_string(Region r) {
    switch (r) {
        case Region::encoder: return "encoder";
        case Region::middle: return "middle";
        case Region::decoder: return "decoder";
    }
    return "?";
}

std::string_view to_string(AttnKind k) { return k == AttnKind::self_attn ? "self" : "cross"; }

std::string_view to_string(Projection p) {
    switch (p) {
        case Projection::query: return "query";
        case Projection::key: return "key";
        case Projection::value: return "value";
        case Projection::output: return "output";
    }
    return "?";
}

Region parse_region(std::string_view s) {
    if (s == "encoder") return Region::encoder;
    if (s == "middle") return Region::middle;
    if (s == "decoder") return Region::decoder;
    throw ParseError("unknown region '" + std::string(s) + "'");
}

AttnKind parse_attn_kind(std::string_view s) {
    if (s == "self") return AttnKind::self_attn;
    if (s == "cross") return AttnKind::cross_attn;
    throw ParseError("unknown attention kind '" + std::string(s) + "'");
}

Projection parse_projection(std::string_view s) {
    if (s == "query" || s == "q") return Projection::query;
    if (s == "key" || s == "k") return Projection::key;
    if (s == "value" || s == "v") return Projection::value;
    if (s == "output" || s == "o") return Projection::output;
    throw ParseError("unknown projection '" + std::string(s) + "'");
}

std::string LayerAddress::str() const {
    return std::string(to_string(region)) + "." + std::to_string(block_index) + "." + std::string(to_string(kind));
}

std::string AttentionAddress::str() const { return layer().str() + "." + std::string(to_string(projection)); }

AttentionAddress parse_attention_address(std::string_view s) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const auto dot = s.find('.', start);
        parts.push_back(s.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    if (parts.size() != 4) throw ParseError("attention address must have 4 parts: '" + std::string(s) + "'");
    AttentionAddress a;
    a.region = parse_region(parts[0]);
    int idx = 0;
    auto [ptr, ec] = std::from_chars(parts[1].data(), parts[1].data() + parts[1].size(), idx);
    if (ec != std::errc() || ptr != parts[1].data() + parts[1].size() || idx < 0) {
        throw ParseError("bad block index in '" + std::string(s) + "'");
    }
    a.block_index = idx;
    a.kind = parse_attn_kind(parts[2]);
    a.projection = parse_projection(parts[3]);
    return a;
}

}  // namespace sigstyle
