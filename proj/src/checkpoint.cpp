// SPDX-License-Identifier: Apache-2.0
#include "evl/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace evl::checkpoint {

namespace {

class Writer {
public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(in_.begin() + static_cast<long>(pos_), in_.begin() + static_cast<long>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Checkpoint capture(const nn::ParameterList& params, std::string config) {
    Checkpoint c;
    c.config_digest = fnv1a64(config);
    c.config = std::move(config);
    for (const auto& p : params) {
        c.blobs.push_back({p.name, p.value.shape(), std::vector<double>(p.value.data().begin(), p.value.data().end())});
    }
    return c;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
    Writer w;
    w.bytes(std::string_view(kMagic, 4));
    w.u32(ckpt.version);
    w.u64(ckpt.config_digest);
    w.u32(static_cast<std::uint32_t>(ckpt.config.size()));
    w.bytes(ckpt.config);
    w.u32(static_cast<std::uint32_t>(ckpt.blobs.size()));
    for (const auto& b : ckpt.blobs) {
        w.u32(static_cast<std::uint32_t>(b.name.size()));
        w.bytes(b.name);
        w.u32(static_cast<std::uint32_t>(b.shape.size()));
        for (auto e : b.shape) w.u64(e);
        for (double v : b.values) w.f64(v);
    }
    return w.take();
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.bytes(4) != std::string_view(kMagic, 4)) throw ParseError("not a checkpoint: bad magic");
    Checkpoint c;
    c.version = r.u32();
    if (c.version != kVersion) throw ParseError("unsupported checkpoint version " + std::to_string(c.version));
    c.config_digest = r.u64();
    c.config = r.bytes(r.u32());
    if (fnv1a64(c.config) != c.config_digest) throw ParseError("checkpoint config digest mismatch");
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        Blob b;
        b.name = r.bytes(r.u32());
        const std::uint32_t rank = r.u32();
        for (std::uint32_t d = 0; d < rank; ++d) b.shape.push_back(r.u64());
        b.values.resize(numel(b.shape));
        for (auto& v : b.values) v = r.f64();
        c.blobs.push_back(std::move(b));
    }
    if (!r.done()) throw ParseError("trailing bytes after checkpoint blobs");
    return c;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = serialize(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot read checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return deserialize(bytes);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void restore(const Checkpoint& ckpt, const nn::ParameterList& params) {
    if (ckpt.blobs.size() != params.size()) {
        throw ParseError("checkpoint has " + std::to_string(ckpt.blobs.size()) + " blobs, model expects " +
                         std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& b = ckpt.blobs[i];
        Tensor t = params[i].value;
        if (b.name != params[i].name || b.shape != t.shape()) {
            throw ParseError("checkpoint blob " + b.name + " " + to_string(b.shape) + " does not match parameter " +
                             params[i].name + " " + to_string(t.shape()));
        }
        std::copy(b.values.begin(), b.values.end(), t.mutable_data().begin());
    }
}

}  // namespace evl::checkpoint
