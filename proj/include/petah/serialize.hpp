#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "petah/model.hpp"

// Single-file binary container: magic "PTAH", version, entry table, payload,
// trailing SHA-256 over everything before it. Weights are little-endian f32
// in row-major order; masks are run-length-encoded bitmaps (runs of u64,
// alternating and starting with the ones-run); meta entries are UTF-8 text.

namespace petah {

inline constexpr char kContainerMagic[4] = {'P', 'T', 'A', 'H'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class EntryKind : std::uint8_t { Weight = 0, Mask = 1, Meta = 2 };

struct ContainerEntry {
    std::string name;
    EntryKind kind = EntryKind::Weight;
    Tensor tensor;     // weight and mask payloads
    std::string text;  // meta payload

    static ContainerEntry weight(std::string name, Tensor t);
    static ContainerEntry mask(std::string name, Tensor t);  // entries must be exactly 0 or 1
    static ContainerEntry meta(std::string name, std::string text);
};

struct Container {
    std::vector<ContainerEntry> entries;

    const ContainerEntry* find(const std::string& name, EntryKind kind) const;  // null when absent
    const ContainerEntry& at(const std::string& name, EntryKind kind) const;    // IoError when absent
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);  // IoError on corruption of any sort

// Whole-file helpers; writes go to a temp path in the same directory, then rename.
std::string read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, const std::string& bytes);

std::vector<std::uint8_t> sha256(const void* data, std::size_t len);
std::string hex(const std::vector<std::uint8_t>& bytes);

// Model checkpointing. The container carries arch + model dimensions as meta,
// every parameter as a weight entry, and the sparsity masks when present.
struct Checkpoint {
    ModuleGraph graph;
    std::map<std::string, Tensor> masks;
};

std::string model_config_text(const std::string& arch, const ModelConfig& cfg);
std::pair<std::string, ModelConfig> parse_model_config_text(const std::string& text);

void save_checkpoint(const std::string& path, const ModuleGraph& graph,
                     const std::map<std::string, Tensor>& masks = {});
Checkpoint load_checkpoint(const std::string& path);
// Validates the embedded dimensions against the expected ones before rebuilding.
Checkpoint load_checkpoint(const std::string& path, const std::string& arch, const ModelConfig& expect);

}  // namespace petah
