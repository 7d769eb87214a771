#include "ncatlas/safetensors.hpp"

#include "ncatlas/error.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace ncatlas {

static_assert(std::endian::native == std::endian::little, "tensor I/O assumes a little-endian host");

namespace {

using nlohmann::json;

DType parse_dtype(const std::string& text, const std::string& tensor) {
    if (text == "F32") return DType::f32;
    if (text == "F16") return DType::f16;
    if (text == "BF16") return DType::bf16;
    if (text == "F64") return DType::f64;
    throw Error(ErrorCode::parse_error, "tensor " + tensor + " has unsupported dtype " + text);
}

std::uint64_t checked_file_size(const std::filesystem::path& path) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw Error(ErrorCode::io_error, "cannot stat " + path.string() + ": " + ec.message());
    return size;
}

} // namespace

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
    case DType::f32: return 4;
    case DType::f16: return 2;
    case DType::bf16: return 2;
    case DType::f64: return 8;
    }
    return 4;
}

std::string_view to_string(DType dtype) {
    switch (dtype) {
    case DType::f32: return "F32";
    case DType::f16: return "F16";
    case DType::bf16: return "BF16";
    case DType::f64: return "F64";
    }
    return "F32";
}

std::size_t TensorEntry::element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = (std::uint32_t(h) & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3FFu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t f32_to_f16(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t exp = (bits >> 23) & 0xFFu;
    std::uint32_t mant = bits & 0x7FFFFFu;
    if (exp == 0xFF) return static_cast<std::uint16_t>(sign | 0x7C00u | (mant ? 0x200u : 0u));
    const int e = int(exp) - 127 + 15;
    if (e >= 0x1F) return static_cast<std::uint16_t>(sign | 0x7C00u);
    if (e <= 0) {
        if (e < -10) return sign;
        mant |= 0x800000u;
        const int shift = 14 - e;
        std::uint32_t half = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (std::uint32_t(e) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // may carry into the exponent, which is correct
    return static_cast<std::uint16_t>(sign | half);
}

float bf16_to_f32(std::uint16_t bits) { return std::bit_cast<float>(std::uint32_t(bits) << 16); }

std::uint16_t f32_to_bf16(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    if ((bits & 0x7F800000u) == 0x7F800000u && (bits & 0x7FFFFFu))
        return static_cast<std::uint16_t>((bits >> 16) | 0x40u);
    const std::uint32_t rounding = 0x7FFFu + ((bits >> 16) & 1u);
    return static_cast<std::uint16_t>((bits + rounding) >> 16);
}

SafetensorsHeader read_safetensors_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open tensor file " + path.string());
    const std::uint64_t size = checked_file_size(path);
    unsigned char len_bytes[8];
    if (!in.read(reinterpret_cast<char*>(len_bytes), 8))
        throw Error(ErrorCode::parse_error, path.string() + ": truncated safetensors length prefix");
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];
    if (header_len > size - 8)
        throw Error(ErrorCode::parse_error, path.string() + ": header length " + std::to_string(header_len) +
                                                " exceeds file size");
    std::string text(header_len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(header_len)))
        throw Error(ErrorCode::parse_error, path.string() + ": truncated safetensors header");

    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, path.string() + ": malformed safetensors header: " + e.what());
    }
    if (!doc.is_object()) throw Error(ErrorCode::parse_error, path.string() + ": safetensors header is not an object");

    SafetensorsHeader header;
    header.data_offset = 8 + header_len;
    const std::uint64_t data_size = size - header.data_offset;
    for (const auto& [name, info] : doc.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : info.items()) header.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
            continue;
        }
        try {
            TensorEntry entry;
            entry.name = name;
            entry.dtype = parse_dtype(info.at("dtype").get<std::string>(), name);
            entry.shape = info.at("shape").get<std::vector<std::size_t>>();
            const auto offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2) throw Error(ErrorCode::parse_error, "tensor " + name + ": data_offsets must have 2 entries");
            entry.begin = offsets[0];
            entry.end = offsets[1];
            if (entry.end < entry.begin || entry.end > data_size)
                throw Error(ErrorCode::parse_error, "tensor " + name + ": data offsets out of bounds");
            if (entry.end - entry.begin != entry.element_count() * dtype_size(entry.dtype))
                throw Error(ErrorCode::parse_error, "tensor " + name + ": byte range does not match dtype and shape");
            header.tensors.push_back(std::move(entry));
        } catch (const json::exception& e) {
            throw Error(ErrorCode::parse_error, path.string() + ": bad entry for tensor " + name + ": " + e.what());
        }
    }
    return header;
}

std::map<std::string, Tensor> read_safetensors(const std::filesystem::path& path) {
    const SafetensorsHeader header = read_safetensors_header(path);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open tensor file " + path.string());

    std::map<std::string, Tensor> out;
    std::vector<unsigned char> raw;
    for (const auto& entry : header.tensors) {
        const std::size_t n = entry.element_count();
        raw.resize(entry.end - entry.begin);
        in.seekg(static_cast<std::streamoff>(header.data_offset + entry.begin));
        if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
            throw Error(ErrorCode::io_error, path.string() + ": short read for tensor " + entry.name);
        Tensor t;
        t.shape = entry.shape;
        t.values.resize(n);
        switch (entry.dtype) {
        case DType::f32:
            std::memcpy(t.values.data(), raw.data(), n * 4);
            break;
        case DType::f16:
        case DType::bf16:
            for (std::size_t i = 0; i < n; ++i) {
                const std::uint16_t bits = std::uint16_t(raw[2 * i]) | std::uint16_t(raw[2 * i + 1] << 8);
                t.values[i] = entry.dtype == DType::f16 ? f16_to_f32(bits) : bf16_to_f32(bits);
            }
            break;
        case DType::f64:
            for (std::size_t i = 0; i < n; ++i) {
                double d;
                std::memcpy(&d, raw.data() + 8 * i, 8);
                t.values[i] = static_cast<float>(d);
            }
            break;
        }
        out.emplace(entry.name, std::move(t));
    }
    return out;
}

void write_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors, DType dtype,
                       const std::map<std::string, std::string>& metadata) {
    json header = json::object();
    std::uint64_t offset = 0;
    const std::size_t width = dtype_size(dtype);
    for (const auto& [name, t] : tensors) {
        std::size_t n = 1;
        for (auto d : t.shape) n *= d;
        if (n != t.values.size())
            throw Error(ErrorCode::dimension_mismatch, "tensor " + name + " shape does not match its value count");
        header[name] = {{"dtype", std::string(to_string(dtype))}, {"shape", t.shape},
                        {"data_offsets", {offset, offset + n * width}}};
        offset += n * width;
    }
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io_error, "cannot write tensor file " + path.string());
    const std::uint64_t len = text.size();
    unsigned char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));

    std::vector<unsigned char> raw;
    for (const auto& [name, t] : tensors) {
        raw.resize(t.values.size() * width);
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            switch (dtype) {
            case DType::f32:
                std::memcpy(raw.data() + 4 * i, &t.values[i], 4);
                break;
            case DType::f16:
            case DType::bf16: {
                const std::uint16_t bits = dtype == DType::f16 ? f32_to_f16(t.values[i]) : f32_to_bf16(t.values[i]);
                raw[2 * i] = static_cast<unsigned char>(bits & 0xFF);
                raw[2 * i + 1] = static_cast<unsigned char>(bits >> 8);
                break;
            }
            case DType::f64: {
                const double d = t.values[i];
                std::memcpy(raw.data() + 8 * i, &d, 8);
                break;
            }
            }
        }
        out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    }
    if (!out) throw Error(ErrorCode::io_error, "failed writing tensor file " + path.string());
}

} // namespace ncatlas
