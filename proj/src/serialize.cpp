#include "petah/serialize.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "petah/config.hpp"

namespace petah {

namespace {

constexpr std::size_t kShaBytes = 32;
constexpr std::int64_t kMaxElements = 1LL << 30;
constexpr std::uint8_t kMaxDims = 8;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class Reader {
public:
    Reader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

    std::size_t pos() const { return pos_; }
    void seek(std::size_t p) { pos_ = p; }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
        return v;
    }

    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    std::uint8_t u8() {
        need(1);
        return byte();
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::uint8_t byte() { return static_cast<std::uint8_t>(bytes_[pos_++]); }

    void need(std::size_t n) {
        if (pos_ + n > limit_) throw IoError("container: truncated structure");
    }

    const std::string& bytes_;
    std::size_t limit_;
    std::size_t pos_ = 0;
};

std::string encode_mask_runs(const Tensor& t) {
    std::string out;
    float expect = 1.0f;
    std::uint64_t run = 0;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const float v = t[i];
        if (v != 0.0f && v != 1.0f) throw ValueError("container: mask entries must be 0 or 1");
        if (v == expect) {
            run += 1;
        } else {
            put_u64(out, run);
            expect = 1.0f - expect;
            run = 1;
        }
    }
    put_u64(out, run);
    return out;
}

Tensor decode_mask_runs(Reader& r, std::size_t payload_bytes, const Shape& shape) {
    if (payload_bytes % 8 != 0) throw IoError("container: mask payload is not a run sequence");
    Tensor t(shape);
    const std::int64_t total = t.numel();
    std::int64_t filled = 0;
    float value = 1.0f;
    for (std::size_t k = 0; k < payload_bytes / 8; ++k) {
        const std::uint64_t run = r.u64();
        if (run > static_cast<std::uint64_t>(total - filled)) throw IoError("container: mask runs overflow shape");
        for (std::uint64_t i = 0; i < run; ++i) t[filled++] = value;
        value = 1.0f - value;
    }
    if (filled != total) throw IoError("container: mask runs do not cover shape");
    return t;
}

}  // namespace

std::vector<std::uint8_t> sha256(const void* data, std::size_t len) {
    std::vector<std::uint8_t> digest(kShaBytes);
    unsigned int out_len = 0;
    if (EVP_Digest(data, len, digest.data(), &out_len, EVP_sha256(), nullptr) != 1 || out_len != kShaBytes) {
        throw IoError("sha256 digest failed");
    }
    return digest;
}

std::string hex(const std::vector<std::uint8_t>& bytes) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (std::uint8_t b : bytes) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 0xf]);
    }
    return out;
}

ContainerEntry ContainerEntry::weight(std::string name, Tensor t) {
    ContainerEntry e;
    e.name = std::move(name);
    e.kind = EntryKind::Weight;
    e.tensor = std::move(t);
    return e;
}

ContainerEntry ContainerEntry::mask(std::string name, Tensor t) {
    ContainerEntry e;
    e.name = std::move(name);
    e.kind = EntryKind::Mask;
    e.tensor = std::move(t);
    return e;
}

ContainerEntry ContainerEntry::meta(std::string name, std::string text) {
    ContainerEntry e;
    e.name = std::move(name);
    e.kind = EntryKind::Meta;
    e.text = std::move(text);
    return e;
}

const ContainerEntry* Container::find(const std::string& name, EntryKind kind) const {
    for (const ContainerEntry& e : entries) {
        if (e.kind == kind && e.name == name) return &e;
    }
    return nullptr;
}

const ContainerEntry& Container::at(const std::string& name, EntryKind kind) const {
    const ContainerEntry* e = find(name, kind);
    if (!e) throw IoError("container: missing entry '" + name + "'");
    return *e;
}

std::string encode_container(const Container& c) {
    // payloads first so the entry table can carry absolute offsets
    std::vector<std::string> payloads;
    payloads.reserve(c.entries.size());
    std::size_t table_bytes = 0;
    for (const ContainerEntry& e : c.entries) {
        if (e.name.empty()) throw ValueError("container: entries need names");
        if (e.tensor.ndim() > kMaxDims) throw ValueError("container: too many dimensions");
        switch (e.kind) {
            case EntryKind::Weight: {
                std::string p;
                p.reserve(static_cast<std::size_t>(e.tensor.numel()) * 4);
                for (std::int64_t i = 0; i < e.tensor.numel(); ++i) put_f32(p, e.tensor[i]);
                payloads.push_back(std::move(p));
                break;
            }
            case EntryKind::Mask:
                payloads.push_back(encode_mask_runs(e.tensor));
                break;
            case EntryKind::Meta:
                payloads.push_back(e.text);
                break;
        }
        const std::size_t dims = e.kind == EntryKind::Meta ? 0 : e.tensor.shape().size();
        table_bytes += 4 + e.name.size() + 1 + 1 + 8 * dims + 8 + 8;
    }

    const std::size_t header_bytes = 4 + 4 + 4 + table_bytes;
    std::string out;
    out.reserve(header_bytes + 1024);
    out.append(kContainerMagic, 4);
    put_u32(out, kContainerVersion);
    put_u32(out, static_cast<std::uint32_t>(c.entries.size()));

    std::uint64_t offset = header_bytes;
    for (std::size_t i = 0; i < c.entries.size(); ++i) {
        const ContainerEntry& e = c.entries[i];
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        out.push_back(static_cast<char>(e.kind));
        if (e.kind == EntryKind::Meta) {
            out.push_back(0);
        } else {
            out.push_back(static_cast<char>(e.tensor.shape().size()));
            for (int d : e.tensor.shape()) put_u64(out, static_cast<std::uint64_t>(d));
        }
        put_u64(out, offset);
        put_u64(out, payloads[i].size());
        offset += payloads[i].size();
    }
    if (out.size() != header_bytes) throw IoError("container: header size bookkeeping failed");
    for (const std::string& p : payloads) out += p;

    const auto digest = sha256(out.data(), out.size());
    out.append(reinterpret_cast<const char*>(digest.data()), digest.size());
    return out;
}

Container decode_container(const std::string& bytes) {
    if (bytes.size() < 12 + kShaBytes) throw IoError("container: file too small");
    const std::size_t body = bytes.size() - kShaBytes;
    const auto digest = sha256(bytes.data(), body);
    if (std::memcmp(digest.data(), bytes.data() + body, kShaBytes) != 0) {
        throw IoError("container: checksum mismatch");
    }

    Reader r(bytes, body);
    if (r.str(4) != std::string(kContainerMagic, 4)) throw IoError("container: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kContainerVersion) {
        throw IoError("container: unknown version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();

    struct RawEntry {
        std::string name;
        EntryKind kind;
        Shape shape;
        std::uint64_t offset, length;
    };
    std::vector<RawEntry> raw;
    raw.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        RawEntry e;
        const std::uint32_t name_len = r.u32();
        if (name_len == 0 || name_len > 4096) throw IoError("container: entry name length out of range");
        e.name = r.str(name_len);
        const std::uint8_t kind = r.u8();
        if (kind > 2) throw IoError("container: unknown entry kind");
        e.kind = static_cast<EntryKind>(kind);
        const std::uint8_t ndim = r.u8();
        if (ndim > kMaxDims) throw IoError("container: too many dimensions");
        std::int64_t numel = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            const std::uint64_t extent = r.u64();
            if (extent > static_cast<std::uint64_t>(kMaxElements)) throw IoError("container: extent out of range");
            e.shape.push_back(static_cast<int>(extent));
            numel *= static_cast<std::int64_t>(extent);
            if (numel > kMaxElements) throw IoError("container: element count out of range");
        }
        e.offset = r.u64();
        e.length = r.u64();
        if (e.offset > body || e.length > body - e.offset) throw IoError("container: entry exceeds payload");
        raw.push_back(std::move(e));
    }
    const std::size_t header_end = r.pos();

    Container c;
    for (const RawEntry& e : raw) {
        if (e.offset < header_end) throw IoError("container: entry overlaps header");
        r.seek(e.offset);
        switch (e.kind) {
            case EntryKind::Weight: {
                Tensor t(e.shape);
                if (e.length != static_cast<std::uint64_t>(t.numel()) * 4) {
                    throw IoError("container: weight payload size mismatch");
                }
                for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = r.f32();
                c.entries.push_back(ContainerEntry::weight(e.name, std::move(t)));
                break;
            }
            case EntryKind::Mask: {
                Reader mr(bytes, e.offset + e.length);
                mr.seek(e.offset);
                c.entries.push_back(ContainerEntry::mask(e.name, decode_mask_runs(mr, e.length, e.shape)));
                break;
            }
            case EntryKind::Meta:
                c.entries.push_back(ContainerEntry::meta(e.name, r.str(e.length)));
                break;
        }
    }
    return c;
}

std::string read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_binary_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("cannot move " + tmp + " into place");
    }
}

std::string model_config_text(const std::string& arch, const ModelConfig& cfg) {
    ConfigFile f;
    f.set("model", "arch", arch);
    f.set("model", "resolution", std::to_string(cfg.resolution));
    f.set("model", "widths",
          std::to_string(cfg.widths[0]) + "," + std::to_string(cfg.widths[1]) + "," +
              std::to_string(cfg.widths[2]) + "," + std::to_string(cfg.widths[3]));
    f.set("model", "blocks",
          std::to_string(cfg.blocks[0]) + "," + std::to_string(cfg.blocks[1]) + "," +
              std::to_string(cfg.blocks[2]) + "," + std::to_string(cfg.blocks[3]));
    f.set("model", "heads", std::to_string(cfg.heads));
    f.set("model", "d_k", std::to_string(cfg.d_k));
    f.set("model", "d_v", std::to_string(cfg.d_v));
    f.set("model", "mlp_ratio", std::to_string(cfg.mlp_ratio));
    f.set("model", "num_classes", std::to_string(cfg.num_classes));
    f.set("model", "patch_size", std::to_string(cfg.patch_size));
    return config_text(f);
}

std::pair<std::string, ModelConfig> parse_model_config_text(const std::string& text) {
    const ConfigFile f = parse_config_text(text);
    ModelConfig cfg;
    const std::string arch = f.get("model", "arch");
    cfg.resolution = static_cast<int>(f.get_int("model", "resolution"));
    const auto widths = f.get_int_list("model", "widths");
    const auto blocks = f.get_int_list("model", "blocks");
    if (widths.size() != 4 || blocks.size() != 4) throw ValueError("model config: need 4 widths and 4 blocks");
    for (int i = 0; i < 4; ++i) {
        cfg.widths[static_cast<std::size_t>(i)] = widths[static_cast<std::size_t>(i)];
        cfg.blocks[static_cast<std::size_t>(i)] = blocks[static_cast<std::size_t>(i)];
    }
    cfg.heads = static_cast<int>(f.get_int("model", "heads"));
    cfg.d_k = static_cast<int>(f.get_int("model", "d_k"));
    cfg.d_v = static_cast<int>(f.get_int("model", "d_v"));
    cfg.mlp_ratio = static_cast<int>(f.get_int("model", "mlp_ratio"));
    cfg.num_classes = static_cast<int>(f.get_int("model", "num_classes"));
    cfg.patch_size = static_cast<int>(f.get_int("model", "patch_size"));
    return {arch, cfg};
}

void save_checkpoint(const std::string& path, const ModuleGraph& graph,
                     const std::map<std::string, Tensor>& masks) {
    Container c;
    c.entries.push_back(ContainerEntry::meta("model", model_config_text(graph.arch, graph.config)));
    for (const auto& p : graph.parameters()) c.entries.push_back(ContainerEntry::weight(p->name, p->value));
    for (const auto& [name, mask] : masks) c.entries.push_back(ContainerEntry::mask(name, mask));
    write_binary_file(path, encode_container(c));
}

namespace {

Checkpoint checkpoint_from(const Container& c) {
    const auto [arch, cfg] = parse_model_config_text(c.at("model", EntryKind::Meta).text);
    Checkpoint out;
    if (arch == "hybrid") {
        out.graph = build_mini_hybrid(cfg, 0);
    } else if (arch == "vit") {
        out.graph = build_mini_vit(cfg, 0);
    } else {
        throw IoError("checkpoint: unknown arch '" + arch + "'");
    }

    std::size_t weights = 0;
    for (const ContainerEntry& e : c.entries) {
        if (e.kind == EntryKind::Weight) weights += 1;
    }
    if (weights != out.graph.parameters().size()) {
        throw IoError("checkpoint: parameter count does not match the embedded dimensions");
    }
    for (const auto& p : out.graph.parameters()) {
        const ContainerEntry& e = c.at(p->name, EntryKind::Weight);
        if (e.tensor.shape() != p->value.shape()) {
            throw IoError("checkpoint: shape conflict on '" + p->name + "'");
        }
        p->value = e.tensor;
    }
    for (const ContainerEntry& e : c.entries) {
        if (e.kind != EntryKind::Mask) continue;
        const auto p = out.graph.find_param(e.name);  // ValueError on stray mask names
        if (e.tensor.shape() != p->value.shape()) {
            throw IoError("checkpoint: mask shape conflict on '" + e.name + "'");
        }
        out.masks.emplace(e.name, e.tensor);
    }
    return out;
}

}  // namespace

Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from(decode_container(read_binary_file(path)));
}

Checkpoint load_checkpoint(const std::string& path, const std::string& arch, const ModelConfig& expect) {
    Checkpoint out = load_checkpoint(path);
    const auto mismatch = [&](const char* what) {
        throw IoError(std::string("checkpoint: ") + what + " does not match the expected model");
    };
    if (out.graph.arch != arch) mismatch("arch");
    const ModelConfig& got = out.graph.config;
    if (got.resolution != expect.resolution) mismatch("resolution");
    if (got.widths != expect.widths) mismatch("widths");
    if (got.blocks != expect.blocks) mismatch("blocks");
    if (got.heads != expect.heads) mismatch("heads");
    if (got.d_k != expect.d_k || got.d_v != expect.d_v) mismatch("attention dims");
    if (got.mlp_ratio != expect.mlp_ratio) mismatch("mlp ratio");
    if (got.num_classes != expect.num_classes) mismatch("class count");
    if (got.patch_size != expect.patch_size) mismatch("patch size");
    return out;
}

}  // namespace petah
