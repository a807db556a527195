#pragma once

#include "dipcg/error.hpp"
#include "dipcg/nn.hpp"
#include "dipcg/render.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

namespace dipcg {

enum class TokenSource { PatchEmbed, External };

/// M x C condition feature tokens.
struct ConditionTokens {
    nn::Mat<float> tokens;
    TokenSource source = TokenSource::PatchEmbed;

    Eigen::Index count() const { return tokens.rows(); }
    Eigen::Index width() const { return tokens.cols(); }
};

/// Linear patch embedding: patch*patch pixels -> C channels.
struct PatchEmbedder {
    nn::Mat<float> weight; ///< (patch*patch) x C
    nn::Mat<float> bias;   ///< 1 x C
};

/// Two-layer GELU MLP mapping C -> hidden -> D.
struct Projector {
    nn::Mat<float> w1, b1, w2, b2;
};

/// Non-overlapping patches in row-major grid order, each flattened row-major.
template <class S = float>
nn::Mat<S> extract_patches(const Image& img, int patch) {
    if (patch <= 0 || img.width != img.height || img.width % patch != 0)
        throw InvalidInput("image side " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                           " is not a square divisible by patch " + std::to_string(patch));
    const int grid = img.width / patch;
    nn::Mat<S> out(grid * grid, patch * patch);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx)
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    out(gy * grid + gx, y * patch + x) = static_cast<S>(img.at(gx * patch + x, gy * patch + y));
    return out;
}

inline ConditionTokens patch_tokens(const Image& img, int patch, const PatchEmbedder& embed) {
    const nn::Mat<float> patches = extract_patches<float>(img, patch);
    if (embed.weight.rows() != patches.cols())
        throw InvalidInput("patch embedder expects " + std::to_string(embed.weight.rows()) + " pixels per patch");
    ConditionTokens t;
    t.tokens = patches * embed.weight;
    t.tokens.rowwise() += embed.bias.row(0);
    t.tokens += nn::positional_code_2d<float>(img.width / patch, embed.weight.cols());
    t.source = TokenSource::PatchEmbed;
    return t;
}

inline ConditionTokens project(const ConditionTokens& in, const Projector& mlp) {
    if (in.width() != mlp.w1.rows())
        throw InvalidInput("projector expects width " + std::to_string(mlp.w1.rows()) + ", tokens have " +
                           std::to_string(in.width()));
    nn::Mat<float> z = in.tokens * mlp.w1;
    z.rowwise() += mlp.b1.row(0);
    ConditionTokens out;
    out.tokens = nn::gelu(z) * mlp.w2;
    out.tokens.rowwise() += mlp.b2.row(0);
    out.source = in.source;
    return out;
}

// ---- DIPT token files ----------------------------------------------------------
// "DIPT" | version u32 | M u32 | C u32 | M*C float32, all little-endian, row-major.

constexpr std::uint32_t kTokenFileVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::string_view take(std::size_t n) {
        if (pos_ + n > data_.size()) throw FormatError("unexpected end of data");
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32() {
        auto s = take(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(s[static_cast<std::size_t>(i)]);
        return v;
    }
    std::uint64_t u64() {
        const std::uint64_t lo = u32();
        return lo | (static_cast<std::uint64_t>(u32()) << 32);
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("failed writing " + path);
}

} // namespace detail

inline std::string encode_tokens(const ConditionTokens& t) {
    std::string out = "DIPT";
    detail::put_u32(out, kTokenFileVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(t.count()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.width()));
    for (Eigen::Index i = 0; i < t.tokens.size(); ++i) detail::put_f32(out, t.tokens.data()[i]);
    return out;
}

inline ConditionTokens decode_tokens(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 4 || r.take(4) != "DIPT") throw FormatError("bad token file magic");
    const auto version = r.u32();
    if (version != kTokenFileVersion) throw FormatError("unsupported token file version " + std::to_string(version));
    const auto m = r.u32(), c = r.u32();
    if (m == 0 || c == 0) throw FormatError("token file declares an empty token matrix");
    if (r.remaining() != static_cast<std::size_t>(m) * c * 4)
        throw FormatError("token file payload does not match its " + std::to_string(m) + "x" + std::to_string(c) +
                          " header");
    ConditionTokens t;
    t.tokens.resize(m, c);
    for (Eigen::Index i = 0; i < t.tokens.size(); ++i) t.tokens.data()[i] = r.f32();
    if (!t.tokens.allFinite()) throw FormatError("token file contains non-finite values");
    t.source = TokenSource::External;
    return t;
}

inline void save_tokens(const std::string& path, const ConditionTokens& t) { detail::write_file(path, encode_tokens(t)); }

inline ConditionTokens load_tokens(const std::string& path) { return decode_tokens(detail::read_file(path)); }

} // namespace dipcg
