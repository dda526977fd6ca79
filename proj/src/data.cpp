#include "petah/data.hpp"

#include <cmath>
#include <cstring>

#include "petah/errors.hpp"

namespace petah {

const char* task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::TexturedShapes: return "textured-shapes";
        case TaskKind::FrequencyPatterns: return "frequency-patterns";
        case TaskKind::ColorStatistics: return "color-statistics";
    }
    throw ValueError("unknown task kind");
}

TaskKind parse_task_kind(const std::string& name) {
    for (TaskKind k : {TaskKind::TexturedShapes, TaskKind::FrequencyPatterns, TaskKind::ColorStatistics}) {
        if (name == task_kind_name(k)) return k;
    }
    throw ValueError("unknown task kind '" + name + "'");
}

void validate_task_spec(const SyntheticTaskSpec& spec) {
    if (spec.num_classes < 2) throw ValueError("task spec: need at least two classes");
    if (spec.train_size < 1 || spec.val_size < 1 || spec.test_size < 1) {
        throw ValueError("task spec: split sizes must be positive");
    }
    if (spec.resolution < 8) throw ShapeError("task spec: resolution too small");
    if (spec.noise < 0.0f) throw ValueError("task spec: noise level must be non-negative");
}

Tensor Dataset::batch_images(std::span<const int> idx) const {
    const std::int64_t row = images.numel() / images.dim(0);
    Tensor out({static_cast<int>(idx.size()), images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= size()) throw ValueError("batch index out of range");
        std::memcpy(out.raw() + static_cast<std::int64_t>(i) * row, images.raw() + idx[i] * row,
                    sizeof(float) * static_cast<std::size_t>(row));
    }
    return out;
}

std::vector<int> Dataset::batch_labels(std::span<const int> idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[static_cast<std::size_t>(idx[i])];
    return out;
}

namespace {

constexpr float kPi = 3.14159265358979323846f;

float frac(float x) { return x - std::floor(x); }

// Filled silhouette with class-dependent stripe orientation. Shapes cycle
// through a small library; orientation walks a low-discrepancy sequence so
// every class gets a distinct (shape, angle) pair.
void render_textured_shape(float* img, int res, int label, Rng& rng) {
    const int shape = label % 5;
    const float theta = kPi * frac(0.61803399f * static_cast<float>(label) + 0.17f);
    const float cx = static_cast<float>(res) / 2.0f + static_cast<float>(rng.uniform_int(7) - 3);
    const float cy = static_cast<float>(res) / 2.0f + static_cast<float>(rng.uniform_int(7) - 3);
    const float size = static_cast<float>(res) * (0.30f + 0.06f * rng.uniform());
    const float phase = rng.uniform() * (kPi / 4.0f);
    const float freq = 4.0f;
    const float ct = std::cos(theta), st = std::sin(theta);

    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            const float dx = static_cast<float>(x) - cx;
            const float dy = static_cast<float>(y) - cy;
            bool inside = false;
            switch (shape) {
                case 0: inside = dx * dx + dy * dy <= size * size; break;
                case 1: inside = std::max(std::fabs(dx), std::fabs(dy)) <= size; break;
                case 2: inside = std::fabs(dx) + std::fabs(dy) <= 1.2f * size; break;
                case 3: {
                    const float r2 = dx * dx + dy * dy;
                    inside = r2 >= 0.25f * size * size && r2 <= size * size;
                    break;
                }
                default:
                    inside = (std::fabs(dx) <= 0.35f * size && std::fabs(dy) <= size) ||
                             (std::fabs(dy) <= 0.35f * size && std::fabs(dx) <= size);
            }
            float v = -0.2f;
            if (inside) {
                const float s = std::sin(2.0f * kPi * freq * (dx * ct + dy * st) / static_cast<float>(res) + phase);
                v = s >= 0.0f ? 0.8f : -0.8f;
            }
            for (int c = 0; c < 3; ++c) img[(c * res + y) * res + x] = v;
        }
    }
}

// Plane-wave grating whose frequency and direction are class-specific. The
// phase jitter is kept under a quarter period so class means stay informative.
void render_frequency_pattern(float* img, int res, int label, int classes, Rng& rng) {
    const float f = 2.0f + static_cast<float>(label % 6);
    const float psi = kPi * static_cast<float>(label) / static_cast<float>(classes);
    const float fx = f * std::cos(psi), fy = f * std::sin(psi);
    const float phase = rng.uniform() * (kPi / 4.0f);
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            const float arg =
                2.0f * kPi * (fx * static_cast<float>(x) + fy * static_cast<float>(y)) / static_cast<float>(res) +
                phase;
            const float v = 0.7f * std::cos(arg);
            for (int c = 0; c < 3; ++c) img[(c * res + y) * res + x] = v;
        }
    }
}

// Class-specific channel means on a shared, non-discriminative spatial carrier.
void render_color_statistics(float* img, int res, int label, int classes, Rng& rng) {
    const float hue = 2.0f * kPi * static_cast<float>(label) / static_cast<float>(classes);
    const float mu[3] = {0.5f * std::cos(hue), 0.5f * std::cos(hue - 2.0f * kPi / 3.0f),
                         0.5f * std::cos(hue + 2.0f * kPi / 3.0f)};
    const float drift = 0.05f * (rng.uniform() - 0.5f);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < res; ++y) {
            for (int x = 0; x < res; ++x) {
                const float carrier =
                    0.15f * std::cos(2.0f * kPi * static_cast<float>(x + y) / static_cast<float>(res));
                img[(c * res + y) * res + x] = mu[c] + drift + carrier;
            }
        }
    }
}

Dataset make_split(const SyntheticTaskSpec& spec, int count, Rng rng) {
    const int res = spec.resolution;
    Dataset d;
    d.images = Tensor({count, 3, res, res});
    d.labels.resize(static_cast<std::size_t>(count));
    const std::int64_t row = static_cast<std::int64_t>(3) * res * res;
    for (int i = 0; i < count; ++i) {
        const int label = i % spec.num_classes;  // balanced within one sample by construction
        d.labels[static_cast<std::size_t>(i)] = label;
        float* img = d.images.raw() + i * row;
        switch (spec.kind) {
            case TaskKind::TexturedShapes: render_textured_shape(img, res, label, rng); break;
            case TaskKind::FrequencyPatterns: render_frequency_pattern(img, res, label, spec.num_classes, rng); break;
            case TaskKind::ColorStatistics: render_color_statistics(img, res, label, spec.num_classes, rng); break;
        }
        if (spec.noise > 0.0f) {
            for (std::int64_t j = 0; j < row; ++j) img[j] += spec.noise * rng.normal();
        }
    }
    return d;
}

}  // namespace

DataSplits generate_dataset(const SyntheticTaskSpec& spec) {
    validate_task_spec(spec);
    Rng base(spec.seed);
    DataSplits out;
    out.train = make_split(spec, spec.train_size, base.derive(1));
    out.val = make_split(spec, spec.val_size, base.derive(2));
    out.test = make_split(spec, spec.test_size, base.derive(3));
    return out;
}

}  // namespace petah
