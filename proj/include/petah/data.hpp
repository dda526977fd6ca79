#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "petah/rng.hpp"
#include "petah/tensor.hpp"

// Synthetic classification tasks. Each generator plants the class signal in a
// different place: textured-shapes in mid-level structure (silhouette plus
// stripe orientation), frequency-patterns in fine spatial detail, and
// color-statistics in global channel means. All three are deterministic from
// the task seed, label-balanced within one sample, and linearly separable at
// zero noise.

namespace petah {

enum class TaskKind { TexturedShapes, FrequencyPatterns, ColorStatistics };

const char* task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct SyntheticTaskSpec {
    TaskKind kind = TaskKind::TexturedShapes;
    int num_classes = 10;
    int train_size = 256;
    int val_size = 64;
    int test_size = 128;
    int resolution = 32;
    float noise = 0.1f;
    std::uint64_t seed = 0;
};

void validate_task_spec(const SyntheticTaskSpec& spec);

struct Dataset {
    Tensor images;            // N x 3 x R x R
    std::vector<int> labels;  // length N

    int size() const { return static_cast<int>(labels.size()); }
    Tensor batch_images(std::span<const int> idx) const;
    std::vector<int> batch_labels(std::span<const int> idx) const;
};

struct DataSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

DataSplits generate_dataset(const SyntheticTaskSpec& spec);

}  // namespace petah
