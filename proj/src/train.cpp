#include "petah/train.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "petah/ops.hpp"
#include "petah/sparsity.hpp"

namespace petah {

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.head_lr < 0.0f || cfg.adapter_lr < 0.0f) throw ValueError("train config: learning rates must be >= 0");
    if (cfg.weight_decay < 0.0f) throw ValueError("train config: weight decay must be >= 0");
    if (cfg.epochs < 1) throw ValueError("train config: epochs must be >= 1");
    if (cfg.batch_size < 1) throw ValueError("train config: batch size must be >= 1");
}

AdamW::AdamW(std::vector<Group> groups, float weight_decay, float beta1, float beta2, float eps)
    : groups_(std::move(groups)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(groups_.size());
    v_.resize(groups_.size());
    for (std::size_t g = 0; g < groups_.size(); ++g) {
        for (const auto& p : groups_[g].params) {
            m_[g].push_back(Tensor(p->value.shape()));
            v_[g].push_back(Tensor(p->value.shape()));
        }
    }
}

void AdamW::set_lr(std::size_t group, float lr) { groups_.at(group).lr = lr; }

void AdamW::step() {
    t_ += 1;
    const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (std::size_t g = 0; g < groups_.size(); ++g) {
        const float lr = groups_[g].lr;
        if (lr == 0.0f) continue;  // keeps untouched groups bitwise-identical
        for (std::size_t i = 0; i < groups_[g].params.size(); ++i) {
            const auto& p = groups_[g].params[i];
            p->ensure_grad();
            Tensor& m = m_[g][i];
            Tensor& v = v_[g][i];
            const bool decay = weight_decay_ > 0.0f && p->value.ndim() >= 2;
            for (std::int64_t j = 0; j < p->value.numel(); ++j) {
                const float grad = p->grad[j];
                m[j] = beta1_ * m[j] + (1.0f - beta1_) * grad;
                v[j] = beta2_ * v[j] + (1.0f - beta2_) * grad * grad;
                const float mh = m[j] / bc1;
                const float vh = v[j] / bc2;
                float upd = mh / (std::sqrt(vh) + eps_);
                if (decay) upd += weight_decay_ * p->value[j];
                p->value[j] -= lr * upd;
            }
        }
    }
}

Tensor augment_batch(const Tensor& images, Rng& rng, bool random_crop, bool horizontal_flip) {
    if (!random_crop && !horizontal_flip) return images;
    if (images.ndim() != 4) throw ShapeError("augment_batch: expected N x C x H x W");
    const auto& s = images.shape();
    const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
    constexpr int kPad = 4;
    Tensor out(s);
    for (std::int64_t i = 0; i < n; ++i) {
        int dy = kPad, dx = kPad;
        if (random_crop) {
            dy = static_cast<int>(rng.uniform_int(2 * kPad + 1));
            dx = static_cast<int>(rng.uniform_int(2 * kPad + 1));
        }
        const bool flip = horizontal_flip && rng.uniform() < 0.5f;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            for (std::int64_t y = 0; y < h; ++y) {
                const std::int64_t sy = y + dy - kPad;
                for (std::int64_t x = 0; x < w; ++x) {
                    const std::int64_t xc = flip ? w - 1 - x : x;
                    const std::int64_t sx = xc + dx - kPad;
                    const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
                    out(i, ch, y, x) = inside ? images(i, ch, sy, sx) : 0.0f;
                }
            }
        }
    }
    return out;
}

namespace {

std::vector<Tensor> copy_values(const std::vector<VarPtr<float>>& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p->value);
    return out;
}

void restore_values(const std::vector<VarPtr<float>>& params, const std::vector<Tensor>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

}  // namespace

TrainResult train(AdaptedModel& model, const DataSplits& data, const TrainConfig& cfg) {
    validate_train_config(cfg);
    if (model.merged) throw ValueError("train: model has merged factors, unmerge first");
    const auto trainable = model.trainable_params();
    if (trainable.empty()) throw ValueError("train: nothing is trainable");

    AdamW::Group head{model.head_params(), cfg.head_lr};
    AdamW::Group adapted{model.adapter_params(), cfg.adapter_lr};
    for (const auto& p : model.base_trainable_params()) adapted.params.push_back(p);
    AdamW opt({std::move(head), std::move(adapted)}, cfg.weight_decay);

    Rng root(cfg.seed);
    Rng shuffle_rng = root.derive(1);
    Rng aug_rng = root.derive(2);

    const int n = data.train.size();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

#ifndef NDEBUG
    const auto frozen = snapshot_frozen(model);
#endif

    TrainResult result;
    std::vector<Tensor> best_values = copy_values(trainable);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int bn = std::min(cfg.batch_size, n - start);
            const std::span<const int> idx(order.data() + start, static_cast<std::size_t>(bn));
            Tensor images = data.train.batch_images(idx);
            const std::vector<int> labels = data.train.batch_labels(idx);
            images = augment_batch(images, aug_rng, cfg.random_crop, cfg.horizontal_flip);

            Tape tape;
            const auto logits = forward(model, images, RunMode::Train, &tape);
            const auto loss = cross_entropy(&tape, logits, labels);
            const float loss_value = loss->value[0];
            if (!std::isfinite(loss_value)) {
                std::ostringstream msg;
                msg << "train: non-finite loss " << loss_value << " at epoch " << epoch << ", step "
                    << opt.steps_taken() << "; lower the learning rate";
                throw ValueError(msg.str());
            }
            loss_sum += static_cast<double>(loss_value) * bn;

            for (const auto& p : trainable) p->zero_grad();
            backward(tape, loss);
            opt.step();
            if (!model.masks.empty()) enforce_masks(model.graph, model.masks);
#ifndef NDEBUG
            assert(frozen_diff(model, frozen).empty() && "frozen parameter changed during training");
#endif
        }
        const double val_acc = evaluate(model, data.val).top1;
        result.history.push_back({loss_sum / n, val_acc});
        if (result.best_epoch < 0 || val_acc > result.best_val_accuracy) {
            result.best_epoch = epoch;
            result.best_val_accuracy = val_acc;
            best_values = copy_values(trainable);
        }
    }
    restore_values(trainable, best_values);
    return result;
}

std::vector<int> predict(const AdaptedModel& model, const Dataset& split, int batch_size) {
    if (split.size() == 0) throw ValueError("predict: empty split");
    if (batch_size < 1) throw ValueError("predict: batch size must be >= 1");
    std::vector<int> preds;
    preds.reserve(static_cast<std::size_t>(split.size()));
    std::vector<int> idx;
    for (int start = 0; start < split.size(); start += batch_size) {
        const int bn = std::min(batch_size, split.size() - start);
        idx.resize(static_cast<std::size_t>(bn));
        std::iota(idx.begin(), idx.end(), start);
        const Tensor images = split.batch_images(idx);
        const Tensor logits = forward(model, images, RunMode::Eval, nullptr)->value;
        const std::int64_t k = logits.shape()[1];
        for (int i = 0; i < bn; ++i) {
            int best = 0;
            for (std::int64_t c = 1; c < k; ++c) {
                if (logits(i, c) > logits(i, best)) best = static_cast<int>(c);
            }
            preds.push_back(best);
        }
    }
    return preds;
}

EvalResult score_predictions(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (labels.empty()) throw ValueError("score_predictions: empty split");
    if (predictions.size() != labels.size()) throw ShapeError("score_predictions: prediction/label count mismatch");
    std::map<int, std::pair<int, int>> per_class;  // label -> {hits, count}
    int hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& [class_hits, count] = per_class[labels[i]];
        count += 1;
        if (predictions[i] == labels[i]) {
            class_hits += 1;
            hits += 1;
        }
    }
    double class_acc_sum = 0.0;
    for (const auto& [label, hc] : per_class) {
        class_acc_sum += static_cast<double>(hc.first) / static_cast<double>(hc.second);
    }
    return {static_cast<double>(hits) / static_cast<double>(labels.size()),
            class_acc_sum / static_cast<double>(per_class.size())};
}

EvalResult evaluate(const AdaptedModel& model, const Dataset& split, int batch_size) {
    return score_predictions(predict(model, split, batch_size), split.labels);
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", static_cast<double>(v));
    return buf;
}

}  // namespace

std::string results_csv(std::span<const ResultRow> rows) {
    std::ostringstream out;
    out << "strategy,r,r_c,head-lr,adapter-lr,wd,seed,split,accuracy,adapter-params\n";
    for (const ResultRow& r : rows) {
        out << r.strategy << ',' << r.rank << ',' << r.conv_rank << ',' << fmt_float(r.head_lr) << ','
            << fmt_float(r.adapter_lr) << ',' << fmt_float(r.weight_decay) << ',' << r.seed << ','
            << r.split << ',' << fmt_double(r.accuracy) << ',' << r.adapter_params << '\n';
    }
    return out.str();
}

GridOutcome grid_search(const ModelBuilder& build, const DataSplits& data, const HyperGrid& grid,
                        const TrainConfig& base, std::span<const std::uint64_t> seeds) {
    if (grid.head_lrs.empty() || grid.adapter_lrs.empty() || grid.weight_decays.empty()) {
        throw ValueError("grid_search: every grid axis needs at least one value");
    }
    if (seeds.empty()) throw ValueError("grid_search: need at least one seed");

    struct Cell {
        float head_lr, adapter_lr, wd;
        std::vector<double> val, test;
        double mean_val = 0.0, mean_test = 0.0;
    };
    std::vector<Cell> cells;
    std::string strategy;
    int rank = 0, conv_rank = 0;
    std::int64_t adapter_params = 0;
    bool meta_set = false;

    for (float hlr : grid.head_lrs) {
        for (float alr : grid.adapter_lrs) {
            for (float wd : grid.weight_decays) {
                Cell cell{hlr, alr, wd, {}, {}};
                for (std::uint64_t seed : seeds) {
                    AdaptedModel model = build(seed);
                    if (!meta_set) {
                        strategy = strategy_name(model.policy.strategy);
                        rank = model.policy.rank;
                        conv_rank = model.policy.conv_rank;
                        adapter_params = model.adapter_param_count();
                        meta_set = true;
                    }
                    TrainConfig cfg = base;
                    cfg.head_lr = hlr;
                    cfg.adapter_lr = alr;
                    cfg.weight_decay = wd;
                    cfg.seed = seed;
                    const TrainResult tr = train(model, data, cfg);
                    cell.val.push_back(tr.best_val_accuracy);
                    cell.test.push_back(evaluate(model, data.test).top1);
                }
                cell.mean_val = std::accumulate(cell.val.begin(), cell.val.end(), 0.0) / cell.val.size();
                cell.mean_test = std::accumulate(cell.test.begin(), cell.test.end(), 0.0) / cell.test.size();
                cells.push_back(std::move(cell));
            }
        }
    }

    std::size_t winner = 0;
    for (std::size_t i = 1; i < cells.size(); ++i) {
        if (cells[i].mean_val > cells[winner].mean_val) winner = i;
    }

    GridOutcome out;
    out.best = base;
    out.best.head_lr = cells[winner].head_lr;
    out.best.adapter_lr = cells[winner].adapter_lr;
    out.best.weight_decay = cells[winner].wd;
    out.best_val = cells[winner].mean_val;
    out.mean_test = cells[winner].mean_test;
    for (const Cell& cell : cells) {
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            out.table.push_back({strategy, rank, conv_rank, cell.head_lr, cell.adapter_lr, cell.wd, seeds[s],
                                 "val", cell.val[s], adapter_params});
        }
    }
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        out.winner_test.push_back({strategy, rank, conv_rank, cells[winner].head_lr, cells[winner].adapter_lr,
                                   cells[winner].wd, seeds[s], "test", cells[winner].test[s], adapter_params});
    }
    return out;
}

}  // namespace petah
