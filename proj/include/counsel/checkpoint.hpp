#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "counsel/parameters.hpp"
#include "counsel/tensor.hpp"

namespace counsel {

// Wrong file kind (magic bytes or version).
class CheckpointFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Right kind, but damaged or inconsistent with the expected model.
class CheckpointIntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Binary container shared by every model in the project.
//
//   magic[8] | u32 version | u32 n_meta | (str key, str value)*
//   | u32 n_params | (str name, u32 rank, u64 dim*, f64 value*)* | u64 fnv1a
//
// Integers and doubles are little-endian; str is u32 length + bytes.
// The trailing checksum covers every preceding byte.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string magic;  // exactly 8 bytes
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add_parameters(const ParameterStore& store) {
        for (const auto& [name, p] : store) tensors.emplace_back(name, Tensor(p->shape(), p->values()));
    }

    const std::string& require_meta(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw CheckpointIntegrityError("checkpoint lacks '" + key + "'");
        return it->second;
    }

    // Copies stored tensors into an already-shaped store. Names and shapes
    // must match one-to-one.
    void restore_into(ParameterStore& store) const {
        if (tensors.size() != store.size()) {
            throw CheckpointIntegrityError("checkpoint has " + std::to_string(tensors.size()) +
                                           " tensors, model expects " +
                                           std::to_string(store.size()));
        }
        for (const auto& [name, t] : tensors) {
            if (!store.contains(name)) {
                throw CheckpointIntegrityError("unexpected tensor '" + name + "'");
            }
            const Parameter& p = store.get(name);
            if (p->shape() != t.shape()) {
                throw CheckpointIntegrityError("tensor '" + name + "' has shape " +
                                               shape_str(t.shape()) + ", model expects " +
                                               shape_str(p->shape()));
            }
        }
        for (const auto& [name, t] : tensors) {
            auto dst = store.get(name)->data();
            std::copy(t.data().begin(), t.data().end(), dst.begin());
        }
    }

    std::string serialize() const {
        if (magic.size() != 8) throw std::invalid_argument("checkpoint magic must be 8 bytes");
        std::string out = magic;
        put_u32(out, kVersion);
        put_u32(out, static_cast<std::uint32_t>(meta.size()));
        for (const auto& [k, v] : meta) {
            put_str(out, k);
            put_str(out, v);
        }
        put_u32(out, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            put_str(out, name);
            put_u32(out, static_cast<std::uint32_t>(t.rank()));
            for (std::size_t d : t.shape()) put_u64(out, d);
            for (double v : t.data()) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, sizeof bits);
                put_u64(out, bits);
            }
        }
        put_u64(out, fnv1a(out));
        return out;
    }

    static Checkpoint parse(std::string_view bytes, std::string_view expected_magic) {
        const std::size_t head = std::min<std::size_t>(bytes.size(), 8);
        if (bytes.substr(0, head) != expected_magic.substr(0, head)) {
            throw CheckpointFormatError("not a '" + std::string(expected_magic) + "' checkpoint");
        }
        if (bytes.size() < 8 + 4 + 8) throw CheckpointIntegrityError("checkpoint truncated");
        const std::size_t body = bytes.size() - 8;
        Reader tail{bytes, body};
        if (tail.u64() != fnv1a(bytes.substr(0, body))) {
            throw CheckpointIntegrityError("checkpoint checksum mismatch (truncated or corrupt)");
        }
        Reader r{bytes.substr(0, body), 8};
        Checkpoint ck;
        ck.magic = std::string(expected_magic);
        if (std::uint32_t v = r.u32(); v != kVersion) {
            throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(v));
        }
        for (std::uint32_t i = 0, n = r.u32(); i < n; ++i) {
            std::string k = r.str();
            ck.meta[k] = r.str();
        }
        for (std::uint32_t i = 0, n = r.u32(); i < n; ++i) {
            std::string name = r.str();
            const std::uint32_t rank = r.u32();
            if (rank > 8) throw CheckpointIntegrityError("implausible rank for '" + name + "'");
            Shape shape(rank);
            for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
            const std::size_t count = shape_numel(shape);
            if (count > (r.bytes.size() - r.pos) / 8) {
                throw CheckpointIntegrityError("checkpoint truncated in '" + name + "'");
            }
            std::vector<double> values(count);
            for (double& v : values) {
                std::uint64_t bits = r.u64();
                std::memcpy(&v, &bits, sizeof v);
            }
            ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
        }
        if (r.pos != r.bytes.size()) throw CheckpointIntegrityError("trailing bytes in checkpoint");
        return ck;
    }

    void save(const std::string& path) const {
        const std::string bytes = serialize();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
    }

    static Checkpoint load(const std::string& path, std::string_view expected_magic) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse(bytes, expected_magic);
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

private:
    struct Reader {
        std::string_view bytes;
        std::size_t pos = 0;

        void need(std::size_t n) {
            if (bytes.size() - pos < n) throw CheckpointIntegrityError("checkpoint truncated");
        }
        std::uint64_t le(std::size_t n) {
            need(n);
            std::uint64_t v = 0;
            for (std::size_t i = 0; i < n; ++i)
                v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
            pos += n;
            return v;
        }
        std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
        std::uint64_t u64() { return le(8); }
        std::string str() {
            const std::uint32_t n = u32();
            need(n);
            std::string s(bytes.substr(pos, n));
            pos += n;
            return s;
        }
    };

    static void put_le(std::string& out, std::uint64_t v, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    static void put_u32(std::string& out, std::uint32_t v) { put_le(out, v, 4); }
    static void put_u64(std::string& out, std::uint64_t v) { put_le(out, v, 8); }
    static void put_str(std::string& out, std::string_view s) {
        put_u32(out, static_cast<std::uint32_t>(s.size()));
        out.append(s);
    }
};

}  // namespace counsel
