#include "petah/bundle.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <cstring>

#include "petah/config.hpp"

namespace petah {

namespace {

constexpr const char* kLoraASuffix = ".lora_a";
constexpr const char* kLoraBSuffix = ".lora_b";

std::string factor_prefix(const LoraFactors& f) {
    const std::string& name = f.A->name;
    const std::size_t suffix = std::strlen(kLoraASuffix);
    if (name.size() <= suffix || name.substr(name.size() - suffix) != kLoraASuffix) {
        throw ValueError("bundle: factor tensor '" + name + "' has no recognizable stem");
    }
    return name.substr(0, name.size() - suffix);
}

std::string fmt_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

std::vector<std::uint8_t> parse_hex(const std::string& text) {
    if (text.size() % 2 != 0) throw IoError("bundle: odd-length fingerprint");
    const auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        throw IoError("bundle: fingerprint is not lowercase hex");
    };
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 2);
    for (std::size_t i = 0; i < text.size(); i += 2) {
        out.push_back(static_cast<std::uint8_t>(nibble(text[i]) * 16 + nibble(text[i + 1])));
    }
    return out;
}

}  // namespace

std::vector<std::uint8_t> backbone_fingerprint(const ModuleGraph& graph) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw IoError("fingerprint: digest init failed");
    }
    const auto feed = [&ctx](const void* data, std::size_t len) {
        if (EVP_DigestUpdate(ctx, data, len) != 1) {
            EVP_MD_CTX_free(ctx);
            throw IoError("fingerprint: digest update failed");
        }
    };
    feed(graph.arch.data(), graph.arch.size());
    feed("\n", 1);
    for (const auto& p : graph.backbone_parameters()) {
        feed(p->name.data(), p->name.size());
        feed("\n", 1);
        for (int d : p->value.shape()) {
            const std::int64_t extent = d;
            feed(&extent, sizeof(extent));
        }
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const float v = p->value[i];
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            const std::uint8_t le[4] = {static_cast<std::uint8_t>(bits & 0xff),
                                        static_cast<std::uint8_t>((bits >> 8) & 0xff),
                                        static_cast<std::uint8_t>((bits >> 16) & 0xff),
                                        static_cast<std::uint8_t>((bits >> 24) & 0xff)};
            feed(le, 4);
        }
    }
    std::vector<std::uint8_t> digest(32);
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx, digest.data(), &len) != 1 || len != 32) {
        EVP_MD_CTX_free(ctx);
        throw IoError("fingerprint: digest final failed");
    }
    EVP_MD_CTX_free(ctx);
    return digest;
}

std::int64_t TaskAdapterBundle::adapter_param_count() const {
    std::int64_t total = 0;
    for (const BundleFactor& f : factors) total += f.A.numel() + f.B.numel();
    return total;
}

TaskAdapterBundle make_bundle(const AdaptedModel& model, const std::string& task) {
    if (model.merged) throw ValueError("bundle: unmerge the model first");
    if (model.policy.strategy == Strategy::FullFt || model.policy.strategy == Strategy::AttnFt) {
        throw ValueError("bundle: strategy trains backbone tensors; save a checkpoint instead");
    }
    TaskAdapterBundle b;
    b.task = task;
    b.policy = model.policy;
    for (const auto& f : model.adapters) {
        b.factors.push_back({factor_prefix(*f), f->target, f->A->value, f->B->value});
    }
    const LayerNode* head = nullptr;
    for (const LayerNode& n : model.graph.nodes) {
        if (n.kind == NodeKind::ClassifierHead) head = &n;
    }
    if (!head) throw ValueError("bundle: model has no classifier head");
    b.head_weight = head->p("weight")->value;
    b.head_bias = head->p("bias")->value;
    b.fingerprint = backbone_fingerprint(model.graph);
    return b;
}

BundleSizes save_adapter_bundle(const std::string& path, const TaskAdapterBundle& bundle) {
    ConfigFile meta;
    meta.set("bundle", "task", bundle.task);
    meta.set("bundle", "strategy", strategy_name(bundle.policy.strategy));
    meta.set("bundle", "rank", std::to_string(bundle.policy.rank));
    meta.set("bundle", "conv_rank", std::to_string(bundle.policy.conv_rank));
    meta.set("bundle", "scale", fmt_float(bundle.policy.scale));
    meta.set("bundle", "fingerprint", hex(bundle.fingerprint));
    for (const BundleFactor& f : bundle.factors) meta.set("targets", f.prefix, f.target);

    Container c;
    c.entries.push_back(ContainerEntry::meta("bundle", config_text(meta)));
    BundleSizes sizes;
    for (const BundleFactor& f : bundle.factors) {
        c.entries.push_back(ContainerEntry::weight(f.prefix + kLoraASuffix, f.A));
        c.entries.push_back(ContainerEntry::weight(f.prefix + kLoraBSuffix, f.B));
        sizes.factor_bytes += static_cast<std::uint64_t>(f.A.numel() + f.B.numel()) * 4;
    }
    c.entries.push_back(ContainerEntry::weight("head.fc.weight", bundle.head_weight));
    c.entries.push_back(ContainerEntry::weight("head.fc.bias", bundle.head_bias));
    sizes.head_bytes = static_cast<std::uint64_t>(bundle.head_weight.numel() + bundle.head_bias.numel()) * 4;

    const std::string bytes = encode_container(c);
    sizes.file = bytes.size();
    write_binary_file(path, bytes);
    return sizes;
}

TaskAdapterBundle load_adapter_bundle(const std::string& path) {
    const Container c = decode_container(read_binary_file(path));
    const ConfigFile meta = parse_config_text(c.at("bundle", EntryKind::Meta).text);

    TaskAdapterBundle b;
    b.task = meta.get("bundle", "task");
    try {
        b.policy.strategy = parse_strategy(meta.get("bundle", "strategy"));
    } catch (const ValueError& e) {
        throw IoError(std::string("bundle: ") + e.what());
    }
    b.policy.rank = static_cast<int>(meta.get_int("bundle", "rank"));
    b.policy.conv_rank = static_cast<int>(meta.get_int("bundle", "conv_rank"));
    b.policy.scale = static_cast<float>(meta.get_double("bundle", "scale"));
    b.fingerprint = parse_hex(meta.get("bundle", "fingerprint"));
    if (b.fingerprint.size() != 32) throw IoError("bundle: fingerprint must be 32 bytes");

    const auto targets = meta.sections.find("targets");
    if (targets != meta.sections.end()) {
        for (const auto& [prefix, target] : targets->second) {
            BundleFactor f;
            f.prefix = prefix;
            f.target = target;
            f.A = c.at(prefix + kLoraASuffix, EntryKind::Weight).tensor;
            f.B = c.at(prefix + kLoraBSuffix, EntryKind::Weight).tensor;
            b.factors.push_back(std::move(f));
        }
    }
    b.head_weight = c.at("head.fc.weight", EntryKind::Weight).tensor;
    b.head_bias = c.at("head.fc.bias", EntryKind::Weight).tensor;
    return b;
}

AdaptedModel attach(const ModuleGraph& backbone, const TaskAdapterBundle& bundle,
                    const std::map<std::string, Tensor>& masks) {
    if (backbone_fingerprint(backbone) != bundle.fingerprint) {
        throw VerificationError("bundle: backbone fingerprint mismatch, refusing to attach");
    }
    AdaptedModel m = inject(backbone, bundle.policy, 0);
    if (m.adapters.size() != bundle.factors.size()) {
        throw IoError("bundle: factor count does not match the policy's allocation");
    }
    std::map<std::string, LoraFactors*> by_prefix;
    for (const auto& f : m.adapters) by_prefix.emplace(factor_prefix(*f), f.get());
    for (const BundleFactor& f : bundle.factors) {
        const auto it = by_prefix.find(f.prefix);
        if (it == by_prefix.end()) throw IoError("bundle: unresolved factor '" + f.prefix + "'");
        LoraFactors* dst = it->second;
        if (dst->target != f.target) throw IoError("bundle: factor '" + f.prefix + "' targets the wrong tensor");
        if (dst->A->value.shape() != f.A.shape() || dst->B->value.shape() != f.B.shape()) {
            throw IoError("bundle: factor '" + f.prefix + "' shape conflict");
        }
        dst->A->value = f.A;
        dst->B->value = f.B;
    }

    const auto head_w = m.graph.find_param("head.fc.weight");
    const auto head_b = m.graph.find_param("head.fc.bias");
    if (head_w->value.shape() != bundle.head_weight.shape() ||
        head_b->value.shape() != bundle.head_bias.shape()) {
        throw IoError("bundle: head shape conflict");
    }
    head_w->value = bundle.head_weight;
    head_b->value = bundle.head_bias;

    for (const auto& [name, mask] : masks) {
        const auto p = m.graph.find_param(name);
        if (p->value.shape() != mask.shape()) throw IoError("bundle: mask shape conflict on '" + name + "'");
    }
    m.masks = masks;
    return m;
}

}  // namespace petah
