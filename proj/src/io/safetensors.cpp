#include "sigstyle/io/safetensors.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "sigstyle/errors.hpp"

namespace sigstyle {

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes a little-endian host");

namespace {

using json = nlohmann::json;

double half_to_double(std::uint16_t h) {
    const int sign = (h >> 15) & 1;
    const int exp = (h >> 10) & 0x1f;
    const int frac = h & 0x3ff;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(frac), -24);
    } else if (exp == 31) {
        v = frac ? std::nan("") : INFINITY;
    } else {
        v = std::ldexp(static_cast<double>(frac | 0x400), exp - 25);
    }
    return sign ? -v : v;
}

std::uint16_t float_to_half(float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    const std::uint32_t sign = (bits >> 16) & 0x8000;
    const int exp = static_cast<int>((bits >> 23) & 0xff) - 127 + 15;
    std::uint32_t mant = bits & 0x7fffff;
    if (((bits >> 23) & 0xff) == 0xff) return static_cast<std::uint16_t>(sign | 0x7c00 | (mant ? 0x200 : 0));
    if (exp >= 31) return static_cast<std::uint16_t>(sign | 0x7c00);
    if (exp <= 0) {
        if (exp < -10) return static_cast<std::uint16_t>(sign);
        mant |= 0x800000;
        const int shift = 14 - exp;
        std::uint32_t half_mant = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1))) ++half_mant;
        return static_cast<std::uint16_t>(sign | half_mant);
    }
    std::uint32_t h = sign | (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fff;
    if (rem > 0x1000 || (rem == 0x1000 && (h & 1))) ++h;
    return static_cast<std::uint16_t>(h);
}

std::size_t element_size(StoredType t) {
    switch (t) {
        case StoredType::f16:
        case StoredType::bf16: return 2;
        case StoredType::f32: return 4;
        case StoredType::f64: return 8;
        case StoredType::i32: return 4;
        case StoredType::i64: return 8;
    }
    return 0;
}

const char* type_name(StoredType t) {
    switch (t) {
        case StoredType::f16: return "F16";
        case StoredType::bf16: return "BF16";
        case StoredType::f32: return "F32";
        case StoredType::f64: return "F64";
        case StoredType::i32: return "I32";
        case StoredType::i64: return "I64";
    }
    return "?";
}

StoredType parse_type(const std::string& s, const std::string& tensor) {
    if (s == "F16") return StoredType::f16;
    if (s == "BF16") return StoredType::bf16;
    if (s == "F32") return StoredType::f32;
    if (s == "F64") return StoredType::f64;
    if (s == "I32") return StoredType::i32;
    if (s == "I64") return StoredType::i64;
    throw ParseError("tensor '" + tensor + "' has unsupported dtype " + s);
}

void decode(const std::uint8_t* src, StoredType t, std::int64_t n, double* dst) {
    for (std::int64_t i = 0; i < n; ++i) {
        switch (t) {
            case StoredType::f16: {
                std::uint16_t h;
                std::memcpy(&h, src + i * 2, 2);
                dst[i] = half_to_double(h);
                break;
            }
            case StoredType::bf16: {
                std::uint16_t h;
                std::memcpy(&h, src + i * 2, 2);
                dst[i] = std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
                break;
            }
            case StoredType::f32: {
                float f;
                std::memcpy(&f, src + i * 4, 4);
                dst[i] = f;
                break;
            }
            case StoredType::f64: std::memcpy(dst + i, src + i * 8, 8); break;
            case StoredType::i32: {
                std::int32_t v;
                std::memcpy(&v, src + i * 4, 4);
                dst[i] = static_cast<double>(v);
                break;
            }
            case StoredType::i64: {
                std::int64_t v;
                std::memcpy(&v, src + i * 8, 8);
                dst[i] = static_cast<double>(v);
                break;
            }
        }
    }
}

void encode(const double* src, StoredType t, std::int64_t n, std::vector<std::uint8_t>& out) {
    const auto start = out.size();
    out.resize(start + static_cast<std::size_t>(n) * element_size(t));
    std::uint8_t* dst = out.data() + start;
    for (std::int64_t i = 0; i < n; ++i) {
        switch (t) {
            case StoredType::f16: {
                const std::uint16_t h = float_to_half(static_cast<float>(src[i]));
                std::memcpy(dst + i * 2, &h, 2);
                break;
            }
            case StoredType::bf16: {
                const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(src[i]));
                const std::uint32_t rounded = bits + 0x7fff + ((bits >> 16) & 1);
                const auto h = static_cast<std::uint16_t>(rounded >> 16);
                std::memcpy(dst + i * 2, &h, 2);
                break;
            }
            case StoredType::f32: {
                const auto f = static_cast<float>(src[i]);
                std::memcpy(dst + i * 4, &f, 4);
                break;
            }
            case StoredType::f64: std::memcpy(dst + i * 8, src + i, 8); break;
            case StoredType::i32: {
                const auto v = static_cast<std::int32_t>(std::llround(src[i]));
                std::memcpy(dst + i * 4, &v, 4);
                break;
            }
            case StoredType::i64: {
                const auto v = static_cast<std::int64_t>(std::llround(src[i]));
                std::memcpy(dst + i * 8, &v, 8);
                break;
            }
        }
    }
}

}  // namespace

SafetensorsFile read_safetensors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const auto file_size = std::filesystem::file_size(path);
    std::uint64_t header_len = 0;
    if (file_size < 8 || !in.read(reinterpret_cast<char*>(&header_len), 8)) {
        throw ParseError(path.string() + ": truncated safetensors header");
    }
    if (header_len > file_size - 8) throw ParseError(path.string() + ": header length exceeds file size");
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    json j;
    try {
        j = json::parse(header);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": bad safetensors header: " + e.what());
    }
    const std::uint64_t data_len = file_size - 8 - header_len;
    std::vector<std::uint8_t> data(data_len);
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data_len))) {
        throw ParseError(path.string() + ": truncated safetensors data");
    }

    SafetensorsFile out;
    for (const auto& [name, entry] : j.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : entry.items()) out.metadata[k] = v.get<std::string>();
            continue;
        }
        try {
            const StoredType type = parse_type(entry.at("dtype").get<std::string>(), name);
            Shape shape = entry.at("shape").get<Shape>();
            const auto begin = entry.at("data_offsets").at(0).get<std::uint64_t>();
            const auto end = entry.at("data_offsets").at(1).get<std::uint64_t>();
            const auto n = shape_numel(shape);
            if (end < begin || end > data_len || end - begin != static_cast<std::uint64_t>(n) * element_size(type)) {
                throw ParseError(path.string() + ": tensor '" + name + "' has inconsistent offsets");
            }
            Tensor t(shape);
            decode(data.data() + begin, type, n, t.data());
            out.tensors.emplace(name, std::move(t));
        } catch (const json::exception& e) {
            throw ParseError(path.string() + ": malformed entry '" + name + "': " + e.what());
        }
    }
    return out;
}

void write_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
                       StoredType type, const std::map<std::string, std::string>& metadata) {
    json header = json::object();
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::vector<std::uint8_t> data;
    for (const auto& [name, t] : tensors) {
        const auto begin = data.size();
        encode(t.data(), type, t.numel(), data);
        header[name] = {{"dtype", type_name(type)}, {"shape", t.shape()}, {"data_offsets", {begin, data.size()}}};
    }
    std::string h = header.dump();
    while ((h.size() + 8) % 8 != 0) h.push_back(' ');
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    const std::uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace sigstyle
