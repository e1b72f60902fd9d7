#include "mml/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace mml {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'L', 'M'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<unsigned char>& buf, uint32_t v) {
    buf.push_back(static_cast<unsigned char>(v));
    buf.push_back(static_cast<unsigned char>(v >> 8));
    buf.push_back(static_cast<unsigned char>(v >> 16));
    buf.push_back(static_cast<unsigned char>(v >> 24));
}

void put_u64(std::vector<unsigned char>& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f32(std::vector<unsigned char>& buf, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(buf, bits);
}

struct Reader {
    const unsigned char* p;
    const unsigned char* end;
    std::string path;

    void need(size_t n, const char* what) const {
        if (static_cast<size_t>(end - p) < n)
            throw std::runtime_error("checkpoint: " + path + ": truncated while reading " + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                     (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
        p += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
        p += 8;
        return v;
    }
    float f32(const char* what) {
        const uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return *p++;
    }
};

} // namespace

uint64_t fnv1a64(const void* data, size_t len, uint64_t basis) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    uint64_t hash = basis;
    for (size_t i = 0; i < len; ++i) {
        hash ^= bytes[i];
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

void save_checkpoint(const ClassifierModel& model, const std::string& path) {
    model.validate();
    std::vector<unsigned char> buf;
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<uint32_t>(model.layers.size()));
    for (const auto& l : model.layers) {
        put_u32(buf, static_cast<uint32_t>(l.out_dim()));
        put_u32(buf, static_cast<uint32_t>(l.in_dim()));
        buf.push_back(static_cast<unsigned char>(l.activation));
    }
    put_u32(buf, static_cast<uint32_t>(model.encoder_depth));
    for (const auto& l : model.layers) {
        for (double w : l.weight.data) put_f32(buf, static_cast<float>(w));
        for (double b : l.bias) put_f32(buf, static_cast<float>(b));
    }
    put_u64(buf, fnv1a64(buf.data(), buf.size()));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!out) {
            std::remove(tmp.c_str());
            throw std::runtime_error("checkpoint: write failed for " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw std::runtime_error("checkpoint: cannot move " + tmp + " to " + path + ": " + ec.message());
    }
}

ClassifierModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 12) throw std::runtime_error("checkpoint: " + path + ": file too short");
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: " + path + ": bad magic (expected MMLM)");

    Reader r{buf.data() + 4, buf.data() + buf.size(), path};
    const uint32_t version = r.u32("format version");
    if (version != kVersion)
        throw std::runtime_error("checkpoint: " + path + ": format version " + std::to_string(version) +
                                 " not supported (this build reads version " + std::to_string(kVersion) + ")");

    const uint32_t n_layers = r.u32("layer count");
    ClassifierModel model;
    for (uint32_t i = 0; i < n_layers; ++i) {
        const uint32_t out = r.u32("layer out width");
        const uint32_t in_w = r.u32("layer in width");
        const uint8_t act = r.u8("layer activation");
        if (act > 1) throw std::runtime_error("checkpoint: " + path + ": unknown activation code");
        Layer l;
        l.weight = Matrix(out, in_w);
        l.bias.assign(out, 0.0);
        l.activation = static_cast<Activation>(act);
        model.layers.push_back(std::move(l));
    }
    model.encoder_depth = r.u32("encoder depth");

    for (auto& l : model.layers) {
        for (double& w : l.weight.data) w = r.f32("weights");
        for (double& b : l.bias) b = r.f32("bias");
    }

    const size_t payload = static_cast<size_t>(r.p - buf.data());
    const uint64_t checksum = r.u64("checksum");
    if (r.p != buf.data() + buf.size())
        throw std::runtime_error("checkpoint: " + path + ": trailing bytes after checksum");
    if (fnv1a64(buf.data(), payload) != checksum)
        throw std::runtime_error("checkpoint: " + path + ": checksum mismatch (corrupted file)");

    if (model.layers.empty()) throw std::runtime_error("checkpoint: " + path + ": no layers");
    model.num_classes = model.layers.back().out_dim();
    model.latent_dim =
        model.encoder_depth == 0 ? model.layers.back().in_dim() : model.layers[model.encoder_depth - 1].out_dim();
    model.validate();
    return model;
}

} // namespace mml
