#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "petah/adapters.hpp"
#include "petah/data.hpp"

// Optimization loop, evaluation, and hyperparameter grid search.

namespace petah {

struct TrainConfig {
    float head_lr = 0.01f;     // classifier head group
    float adapter_lr = 0.01f;  // factors and any unfrozen backbone tensors
    float weight_decay = 0.0f;
    int epochs = 5;
    int batch_size = 32;
    std::uint64_t seed = 0;
    bool random_crop = false;      // pad 4, crop back to the input resolution
    bool horizontal_flip = false;  // p = 0.5 per sample
};

void validate_train_config(const TrainConfig& cfg);

// Adam with decoupled weight decay. Decay touches only tensors of ndim >= 2,
// so biases, norm affines, and the positional table shrink never.
class AdamW {
public:
    struct Group {
        std::vector<VarPtr<float>> params;
        float lr = 0.0f;
    };

    AdamW(std::vector<Group> groups, float weight_decay, float beta1 = 0.9f, float beta2 = 0.999f,
          float eps = 1e-8f);

    void step();  // consumes .grad on every grouped parameter
    void set_lr(std::size_t group, float lr);
    std::size_t steps_taken() const { return t_; }

private:
    std::vector<Group> groups_;
    std::vector<std::vector<Tensor>> m_, v_;  // first/second moments, [group][param]
    float weight_decay_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

// Pad-4 random crop and/or horizontal flip, one draw sequence per sample.
Tensor augment_batch(const Tensor& images, Rng& rng, bool random_crop, bool horizontal_flip);

struct EpochStats {
    double train_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;  // one entry per epoch, in order
    int best_epoch = -1;              // epoch whose weights the model carries
    double best_val_accuracy = 0.0;
};

// Minimizes softmax cross-entropy over the model's trainable set. The model
// is left holding the weights of the best-validation epoch. Masks attached to
// the model are re-enforced after every optimizer step. A non-finite loss
// aborts with a diagnostic.
TrainResult train(AdaptedModel& model, const DataSplits& data, const TrainConfig& cfg);

struct EvalResult {
    double top1 = 0.0;
    double mean_per_class = 0.0;
};

// Argmax predictions with first-index tie-breaking.
std::vector<int> predict(const AdaptedModel& model, const Dataset& split, int batch_size = 64);
EvalResult score_predictions(const std::vector<int>& predictions, const std::vector<int>& labels);
EvalResult evaluate(const AdaptedModel& model, const Dataset& split, int batch_size = 64);

// One row of the results table; split is "val" or "test".
struct ResultRow {
    std::string strategy;
    int rank = 0;
    int conv_rank = 0;
    float head_lr = 0.0f;
    float adapter_lr = 0.0f;
    float weight_decay = 0.0f;
    std::uint64_t seed = 0;
    std::string split;
    double accuracy = 0.0;
    std::int64_t adapter_params = 0;
};

std::string results_csv(std::span<const ResultRow> rows);  // header + one line per row

struct HyperGrid {
    std::vector<float> head_lrs{0.01f};
    std::vector<float> adapter_lrs{0.01f};
    std::vector<float> weight_decays{0.0f};
};

constexpr std::uint64_t kGridSeeds[3] = {1, 2, 3};

using ModelBuilder = std::function<AdaptedModel(std::uint64_t seed)>;

struct GridOutcome {
    TrainConfig best;                    // winning cell, seed left at base.seed
    double best_val = 0.0;               // winner's mean val accuracy over seeds
    double mean_test = 0.0;              // winner's mean test accuracy over seeds
    std::vector<ResultRow> table;        // |grid| x |seeds| rows, split "val"
    std::vector<ResultRow> winner_test;  // one test row per seed for the winner
};

// Trains every (cell, seed) pair, selects the cell with the best mean val
// accuracy, and reports the winner's mean test accuracy over the same seeds.
GridOutcome grid_search(const ModelBuilder& build, const DataSplits& data, const HyperGrid& grid,
                        const TrainConfig& base, std::span<const std::uint64_t> seeds = kGridSeeds);

}  // namespace petah
