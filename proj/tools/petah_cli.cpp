#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "petah/bundle.hpp"
#include "petah/gradcheck.hpp"
#include "petah/serialize.hpp"
#include "petah/sparsity.hpp"
#include "petah/train.hpp"

using namespace petah;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---- shared flag groups ----

struct ModelFlags {
    std::string arch = "hybrid";
    int resolution = 32;
    std::vector<int> widths{16, 32, 64, 96};
    std::vector<int> blocks{1, 1, 1, 2};
    int heads = 4;
    int d_k = 24;
    int d_v = 24;
    int mlp_ratio = 2;
    int classes = 10;
    int patch_size = 4;

    ModelConfig config() const {
        if (widths.size() != 4 || blocks.size() != 4) {
            throw ValueError("--widths and --blocks need exactly 4 comma-separated values");
        }
        ModelConfig cfg;
        cfg.resolution = resolution;
        for (int i = 0; i < 4; ++i) {
            cfg.widths[static_cast<std::size_t>(i)] = widths[static_cast<std::size_t>(i)];
            cfg.blocks[static_cast<std::size_t>(i)] = blocks[static_cast<std::size_t>(i)];
        }
        cfg.heads = heads;
        cfg.d_k = d_k;
        cfg.d_v = d_v;
        cfg.mlp_ratio = mlp_ratio;
        cfg.num_classes = classes;
        cfg.patch_size = patch_size;
        return cfg;
    }

    ModuleGraph build(std::uint64_t seed) const {
        return arch == "vit" ? build_mini_vit(config(), seed) : build_mini_hybrid(config(), seed);
    }
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
    cmd->add_option("--arch", f.arch)->check(CLI::IsMember({"hybrid", "vit"}));
    cmd->add_option("--resolution", f.resolution);
    cmd->add_option("--widths", f.widths)->delimiter(',');
    cmd->add_option("--blocks", f.blocks)->delimiter(',');
    cmd->add_option("--heads", f.heads);
    cmd->add_option("--d-k", f.d_k);
    cmd->add_option("--d-v", f.d_v);
    cmd->add_option("--mlp-ratio", f.mlp_ratio);
    cmd->add_option("--classes", f.classes);
    cmd->add_option("--patch-size", f.patch_size);
}

struct TaskFlags {
    std::string kind = "textured-shapes";
    int classes = 10;
    int train_size = 256;
    int val_size = 64;
    int test_size = 128;
    float noise = 0.1f;
    std::uint64_t task_seed = 0;
    int resolution = 32;

    SyntheticTaskSpec spec() const {
        SyntheticTaskSpec s;
        s.kind = parse_task_kind(kind);
        s.num_classes = classes;
        s.train_size = train_size;
        s.val_size = val_size;
        s.test_size = test_size;
        s.noise = noise;
        s.seed = task_seed;
        s.resolution = resolution;
        return s;
    }
};

// class count and resolution always come from the model or checkpoint side,
// so the task group does not expose them
void add_task_flags(CLI::App* cmd, TaskFlags& f) {
    cmd->add_option("--task", f.kind)
        ->check(CLI::IsMember({"textured-shapes", "frequency-patterns", "color-statistics"}));
    cmd->add_option("--train-size", f.train_size);
    cmd->add_option("--val-size", f.val_size);
    cmd->add_option("--test-size", f.test_size);
    cmd->add_option("--noise", f.noise);
    cmd->add_option("--task-seed", f.task_seed);
}

// ---- verify property suites ----

Tensor rand_bounded(Rng& rng, Shape shape, float lo_mag, float hi_mag) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const float mag = lo_mag + (hi_mag - lo_mag) * rng.uniform();
        t[i] = rng.uniform() < 0.5f ? mag : -mag;
    }
    return t;
}

double scaled_gap(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double gap = std::abs(static_cast<double>(a[i]) - b[i]) / (std::abs(static_cast<double>(b[i])) + 1e-8);
        worst = std::max(worst, gap);
    }
    return worst;
}

double merge_equivalence_suite(int cases, std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (int c = 0; c < cases; ++c) {
        const bool conv = c % 2 == 1;
        if (!conv) {
            const int p = 1 + static_cast<int>(rng.uniform_int(64));
            const int q = 1 + static_cast<int>(rng.uniform_int(64));
            const int r = 1 + static_cast<int>(rng.uniform_int(std::min({16, p, q})));
            auto x = make_var(rand_bounded(rng, {3, q}, 0.0f, 0.05f), false, "x");
            auto w = make_var(rand_bounded(rng, {p, q}, 0.0f, 0.1f), false, "w");
            auto b = make_var(rand_bounded(rng, {p}, 1.0f, 2.0f), false, "b");
            LoraFactors f;
            f.target = "w";
            f.rank = r;
            f.A = make_var(rand_bounded(rng, {r, q}, 0.0f, 0.1f), false, "a");
            f.B = make_var(rand_bounded(rng, {p, r}, 0.0f, 0.1f), false, "bq");
            const Tensor factored = lora_linear_forward<float>(nullptr, x, w, b, f)->value;
            auto wm = make_var(merge(f, w->value), false, "wm");
            const Tensor merged = linear<float>(nullptr, x, wm, b)->value;
            worst = std::max(worst, scaled_gap(factored, merged));
        } else {
            const int p = 1 + static_cast<int>(rng.uniform_int(32));
            const int q = 1 + static_cast<int>(rng.uniform_int(32));
            const int k = 1 + 2 * static_cast<int>(rng.uniform_int(3));
            const int rc = std::min(1 << rng.uniform_int(3), std::min(p, q * k * k));
            const int stride = 1 + static_cast<int>(rng.uniform_int(2));
            const int padding = static_cast<int>(rng.uniform_int(3));
            const int hw = k + stride + static_cast<int>(rng.uniform_int(4));
            auto x = make_var(rand_bounded(rng, {2, q, hw, hw}, 0.0f, 0.05f), false, "x");
            auto w = make_var(rand_bounded(rng, {p, q, k, k}, 0.0f, 0.1f), false, "w");
            auto b = make_var(rand_bounded(rng, {p}, 1.0f, 2.0f), false, "b");
            LoraFactors f;
            f.target = "w";
            f.rank = rc;
            f.is_conv = true;
            f.stride = stride;
            f.padding = padding;
            f.groups = 1;
            f.A = make_var(rand_bounded(rng, {rc, q, k, k}, 0.0f, 0.1f), false, "a");
            f.B = make_var(rand_bounded(rng, {p, rc, 1, 1}, 0.0f, 0.1f), false, "bq");
            const Tensor factored = conv_lora_forward<float>(nullptr, x, w, b, stride, padding, 1, f)->value;
            auto wm = make_var(merge(f, w->value), false, "wm");
            const Tensor merged = conv2d<float>(nullptr, x, wm, b, stride, padding, 1)->value;
            worst = std::max(worst, scaled_gap(factored, merged));
        }
        if (worst > 1e-5) {
            throw VerificationError("merge equivalence violated: worst scaled gap " + fmt(worst));
        }
    }
    return worst;
}

using VarD = VarPtr<double>;

TensorD rand_td(Rng& rng, Shape shape) {
    TensorD t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform_double() * 2.0 - 1.0;
    return t;
}

double gradcheck_suite(int per_path, std::uint64_t seed) {
    double worst = 0.0;
    const auto run = [&worst](const char* name, const std::function<GradCheckReport(std::uint64_t)>& fn,
                              std::uint64_t s, int n) {
        for (int i = 0; i < n; ++i) {
            const GradCheckReport rep = fn(s + static_cast<std::uint64_t>(i));
            worst = std::max(worst, rep.max_rel_error);
            if (!rep.passed) {
                throw VerificationError(std::string("gradcheck failed on ") + name + ": max rel error " +
                                        fmt(rep.max_rel_error));
            }
        }
    };

    run("linear_factor_path", [](std::uint64_t s) {
        Rng rng(s);
        const int p = 5, q = 4, r = 2;
        auto x = make_var<double>(rand_td(rng, {3, q}), false, "x");
        auto w = make_var<double>(rand_td(rng, {p, q}), true, "w");
        auto b = make_var<double>(rand_td(rng, {p}), true, "b");
        LoraFactorsT<double> f;
        f.target = "w";
        f.rank = r;
        f.A = make_var<double>(rand_td(rng, {r, q}), true, "a");
        f.B = make_var<double>(rand_td(rng, {p, r}), true, "bf");
        Rng lw(s + 999);
        TensorD cached;
        const std::vector<VarD> params{f.A, f.B, w, b};
        return gradcheck<double>(
            [&](TapeD& t) {
                auto y = lora_linear_forward<double>(&t, x, w, b, f);
                const int m = static_cast<int>(y->value.numel());
                if (cached.numel() == 0) cached = rand_td(lw, {m, 1});
                auto flat = reshape<double>(&t, y, {1, m});
                return sum_all<double>(&t, matmul<double>(&t, flat, make_var<double>(cached, false, "lw")));
            },
            std::span<const VarD>(params), 1e-4, 1e-4);
    }, seed, per_path);

    run("conv_factor_path", [](std::uint64_t s) {
        Rng rng(s);
        const int p = 4, q = 3, k = 3, rc = 2;
        auto x = make_var<double>(rand_td(rng, {2, q, 6, 6}), false, "x");
        auto w = make_var<double>(rand_td(rng, {p, q, k, k}), true, "w");
        auto b = make_var<double>(rand_td(rng, {p}), true, "b");
        LoraFactorsT<double> f;
        f.target = "w";
        f.rank = rc;
        f.is_conv = true;
        f.stride = 2;
        f.padding = 1;
        f.groups = 1;
        f.A = make_var<double>(rand_td(rng, {rc, q, k, k}), true, "a");
        f.B = make_var<double>(rand_td(rng, {p, rc, 1, 1}), true, "bf");
        Rng lw(s + 999);
        TensorD cached;
        const std::vector<VarD> params{f.A, f.B, w, b};
        return gradcheck<double>(
            [&](TapeD& t) {
                auto y = conv_lora_forward<double>(&t, x, w, b, 2, 1, 1, f);
                const int m = static_cast<int>(y->value.numel());
                if (cached.numel() == 0) cached = rand_td(lw, {m, 1});
                auto flat = reshape<double>(&t, y, {1, m});
                return sum_all<double>(&t, matmul<double>(&t, flat, make_var<double>(cached, false, "lw")));
            },
            std::span<const VarD>(params), 1e-4, 1e-4);
    }, seed + 5000, per_path);

    return worst;
}

int roundtrip_suite(int cases, std::uint64_t seed) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "petah_verify";
    fs::create_directories(dir);
    Rng rng(seed);
    int done = 0;
    for (int c = 0; c < cases; ++c) {
        ModelConfig cfg;
        cfg.widths = {static_cast<int>(4 + rng.uniform_int(8)), static_cast<int>(8 + rng.uniform_int(8)),
                      static_cast<int>(8 + rng.uniform_int(16)), static_cast<int>(16 + rng.uniform_int(16))};
        cfg.blocks = {1, 1, 1, 1};
        cfg.heads = 1 + static_cast<int>(rng.uniform_int(3));
        cfg.d_k = 4 + static_cast<int>(rng.uniform_int(12));
        cfg.d_v = 4 + static_cast<int>(rng.uniform_int(12));
        cfg.mlp_ratio = 1 + static_cast<int>(rng.uniform_int(2));
        cfg.num_classes = 2 + static_cast<int>(rng.uniform_int(9));
        const bool vit = c % 3 == 2;
        ModuleGraph g;
        if (vit) {
            cfg.blocks = {0, 0, 0, 1 + static_cast<int>(rng.uniform_int(2))};
            g = build_mini_vit(cfg, rng.next_u32());
        } else {
            g = build_mini_hybrid(cfg, rng.next_u32());
        }
        const std::string path = (dir / ("rt_" + std::to_string(c) + ".ptah")).string();
        save_checkpoint(path, g);
        const Checkpoint back = load_checkpoint(path);
        const auto a = g.parameters();
        const auto b = back.graph.parameters();
        if (a.size() != b.size()) throw VerificationError("roundtrip changed the parameter list");
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i]->name != b[i]->name || a[i]->value.shape() != b[i]->value.shape()) {
                throw VerificationError("roundtrip changed '" + a[i]->name + "'");
            }
            for (std::int64_t j = 0; j < a[i]->value.numel(); ++j) {
                if (std::memcmp(&a[i]->value[j], &b[i]->value[j], 4) != 0) {
                    throw VerificationError("roundtrip changed bytes of '" + a[i]->name + "'");
                }
            }
        }
        done += 1;
    }
    return done;
}

// ---- commands ----

struct PretrainArgs {
    ModelFlags model;
    TaskFlags task;
    std::string out;
    int epochs = 8;
    int batch_size = 32;
    float lr = 0.01f;
    float weight_decay = 0.0f;
    bool crop = false;
    bool flip = false;
};

void cmd_pretrain(const PretrainArgs& a, std::uint64_t seed) {
    TaskFlags task = a.task;
    task.classes = a.model.classes;  // the head and the task must agree
    task.resolution = a.model.resolution;
    const DataSplits data = generate_dataset(task.spec());

    AdaptationPolicy policy;
    policy.strategy = Strategy::FullFt;
    AdaptedModel m = inject(a.model.build(seed), policy, seed);

    TrainConfig cfg;
    cfg.head_lr = a.lr;
    cfg.adapter_lr = a.lr;
    cfg.weight_decay = a.weight_decay;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.seed = seed;
    cfg.random_crop = a.crop;
    cfg.horizontal_flip = a.flip;
    const TrainResult tr = train(m, data, cfg);

    save_checkpoint(a.out, m.graph);
    std::cout << "pretrain: arch=" << a.model.arch << " task=" << task.kind
              << " best_val=" << fmt(tr.best_val_accuracy)
              << " test=" << fmt(evaluate(m, data.test).top1) << " checkpoint=" << a.out << "\n";
}

struct PruneArgs {
    std::string checkpoint;
    std::string out;
    double sparsity = 0.9;
    std::string scope = "per-layer";
};

void cmd_prune(const PruneArgs& a) {
    Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const PruneScope scope = a.scope == "global" ? PruneScope::Global : PruneScope::PerLayer;
    const SparsityMask mask = magnitude_prune(ckpt.graph, a.sparsity, scope);
    apply_mask(ckpt.graph, mask);
    save_checkpoint(a.out, ckpt.graph, mask.masks);
    std::cout << "prune: sparsity=" << fmt(a.sparsity) << " scope=" << a.scope
              << " achieved=" << fmt(mask.achieved()) << " checkpoint=" << a.out << "\n";
}

struct AdaptArgs {
    std::string checkpoint;
    std::string out;
    std::string csv;
    std::string strategy = "petah";
    int rank = 8;
    int conv_rank = 1;
    float scale = 1.0f;
    TaskFlags task;
    int epochs = 5;
    int batch_size = 32;
    std::vector<float> head_lrs{0.1f, 0.02f};
    std::vector<float> adapter_lrs{0.02f, 0.004f};
    std::vector<float> weight_decays{0.0f};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    bool crop = false;
    bool flip = false;
};

void cmd_adapt(const AdaptArgs& a) {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    TaskFlags task = a.task;
    task.classes = ckpt.graph.config.num_classes;
    task.resolution = ckpt.graph.config.resolution;
    const DataSplits data = generate_dataset(task.spec());

    AdaptationPolicy policy;
    policy.strategy = parse_strategy(a.strategy);
    policy.rank = a.rank;
    policy.conv_rank = a.conv_rank;
    policy.scale = a.scale;
    validate_policy(policy);

    const ModelBuilder build = [&](std::uint64_t seed) {
        AdaptedModel m = inject(ckpt.graph, policy, seed);
        reset_head(m);
        m.masks = ckpt.masks;
        return m;
    };

    TrainConfig base;
    base.epochs = a.epochs;
    base.batch_size = a.batch_size;
    base.random_crop = a.crop;
    base.horizontal_flip = a.flip;

    HyperGrid grid;
    grid.head_lrs = a.head_lrs;
    grid.adapter_lrs = a.adapter_lrs;
    grid.weight_decays = a.weight_decays;

    const GridOutcome out = grid_search(build, data, grid, base, a.seeds);

    // final artifact: the winner retrained on the first seed (same cell the
    // table already reports, reproduced exactly)
    AdaptedModel final_model = build(a.seeds.at(0));
    TrainConfig best = out.best;
    best.seed = a.seeds.at(0);
    train(final_model, data, best);

    std::vector<ResultRow> rows = out.table;
    rows.insert(rows.end(), out.winner_test.begin(), out.winner_test.end());
    const std::string csv_path = a.csv.empty() ? a.out + ".csv" : a.csv;
    {
        std::ofstream f(csv_path, std::ios::trunc);
        if (!f) throw IoError("cannot write " + csv_path);
        f << results_csv(rows);
    }

    std::cout << "adapt: strategy=" << a.strategy << " r=" << a.rank << " r_c=" << a.conv_rank
              << " head_lr=" << fmt(best.head_lr) << " adapter_lr=" << fmt(best.adapter_lr)
              << " wd=" << fmt(best.weight_decay) << " mean_val=" << fmt(out.best_val)
              << " mean_test=" << fmt(out.mean_test) << " adapter_params=" << final_model.adapter_param_count()
              << "\n";

    if (policy.strategy == Strategy::FullFt || policy.strategy == Strategy::AttnFt) {
        save_checkpoint(a.out, final_model.graph, final_model.masks);
        std::cout << "adapt: wrote checkpoint=" << a.out << " csv=" << csv_path << "\n";
    } else {
        const TaskAdapterBundle bundle = make_bundle(final_model, task.kind);
        const BundleSizes sizes = save_adapter_bundle(a.out, bundle);
        std::cout << "adapt: wrote bundle=" << a.out << " bytes=" << sizes.file
                  << " factor_bytes=" << sizes.factor_bytes << " head_bytes=" << sizes.head_bytes
                  << " csv=" << csv_path << "\n";
    }
}

struct MergeArgs {
    std::string checkpoint;
    std::string bundle;
    std::string out;
    bool force_dense = false;
};

void cmd_merge(const MergeArgs& a) {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const TaskAdapterBundle bundle = load_adapter_bundle(a.bundle);
    AdaptedModel m = attach(ckpt.graph, bundle, ckpt.masks);
    merge_all(m, a.force_dense);
    save_checkpoint(a.out, m.graph);  // merged weights are dense; masks do not apply
    std::cout << "merge: bundle=" << a.bundle << " dense_override=" << (m.dense_override ? "yes" : "no")
              << " checkpoint=" << a.out << "\n";
}

struct EvalArgs {
    std::string checkpoint;
    std::string bundle;
    std::string split = "test";
    TaskFlags task;
};

void cmd_eval(const EvalArgs& a) {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    TaskFlags task = a.task;
    task.classes = ckpt.graph.config.num_classes;
    task.resolution = ckpt.graph.config.resolution;
    const DataSplits data = generate_dataset(task.spec());
    const Dataset& split = a.split == "train" ? data.train : a.split == "val" ? data.val : data.test;

    AdaptedModel m;
    if (a.bundle.empty()) {
        m = inject(ckpt.graph, AdaptationPolicy{}, 0);  // plain graph, trained head included
        m.masks = ckpt.masks;
    } else {
        m = attach(ckpt.graph, load_adapter_bundle(a.bundle), ckpt.masks);
    }
    const EvalResult r = evaluate(m, split);
    std::cout << "eval: split=" << a.split << " top1=" << fmt(r.top1)
              << " mean_per_class=" << fmt(r.mean_per_class) << "\n";
}

struct CountArgs {
    ModelFlags model;
    std::string checkpoint;
    std::string strategy = "petah";
    int rank = 8;
    int conv_rank = 1;
};

void cmd_count(const CountArgs& a) {
    AdaptationPolicy policy;
    policy.strategy = parse_strategy(a.strategy);
    policy.rank = a.rank;
    policy.conv_rank = a.conv_rank;
    validate_policy(policy);
    const ModuleGraph graph = a.checkpoint.empty() ? a.model.build(0) : load_checkpoint(a.checkpoint).graph;
    const AdapterCount count = count_adapter_params(policy, graph);
    for (const auto& [name, n] : count.per_param) std::cout << name << " " << n << "\n";
    std::cout << "total " << count.total << "\n";
}

struct VerifyArgs {
    int merge_cases = 200;
    int gradcheck_cases = 5;
    int roundtrips = 10;
};

void cmd_verify(const VerifyArgs& a, std::uint64_t seed) {
    const double merge_worst = merge_equivalence_suite(a.merge_cases, seed);
    std::cout << "verify: merge_equivalence cases=" << a.merge_cases << " worst=" << fmt(merge_worst)
              << " ok\n";
    const double grad_worst = gradcheck_suite(a.gradcheck_cases, seed + 1);
    std::cout << "verify: gradcheck per_path=" << a.gradcheck_cases << " worst=" << fmt(grad_worst) << " ok\n";
    const int rt = roundtrip_suite(a.roundtrips, seed + 2);
    std::cout << "verify: roundtrip cases=" << rt << " ok\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"task adaptation toolkit for hybrid convolution/attention models"};
    app.require_subcommand(1);
    app.set_config("--config", "", "flat key = value file with [subcommand] sections; flags override it");
    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "root seed for every stochastic step")->configurable(true);
    const auto sub = [&app](const char* name, const char* desc) {
        CLI::App* s = app.add_subcommand(name, desc);
        s->fallthrough();  // lets --seed sit after the subcommand name
        return s;
    };

    PretrainArgs pre;
    CLI::App* pretrain = sub("pretrain", "train a backbone on a synthetic base task");
    add_model_flags(pretrain, pre.model);
    add_task_flags(pretrain, pre.task);
    pretrain->add_option("--out", pre.out)->required();
    pretrain->add_option("--epochs", pre.epochs);
    pretrain->add_option("--batch-size", pre.batch_size);
    pretrain->add_option("--lr", pre.lr);
    pretrain->add_option("--weight-decay", pre.weight_decay);
    pretrain->add_flag("--crop", pre.crop);
    pretrain->add_flag("--flip", pre.flip);

    PruneArgs pru;
    CLI::App* prune = sub("prune", "magnitude-mask a checkpoint");
    prune->add_option("--checkpoint", pru.checkpoint)->required();
    prune->add_option("--out", pru.out)->required();
    prune->add_option("--sparsity", pru.sparsity)->required();
    prune->add_option("--scope", pru.scope)->check(CLI::IsMember({"per-layer", "global"}));

    AdaptArgs ada;
    CLI::App* adapt = sub("adapt", "grid-search and train a task adapter");
    adapt->add_option("--checkpoint", ada.checkpoint)->required();
    adapt->add_option("--out", ada.out)->required();
    adapt->add_option("--csv", ada.csv);
    adapt->add_option("--strategy", ada.strategy)
        ->check(CLI::IsMember({"linear_probe", "full_ft", "attn_ft", "lora_attn", "lora_attn_mlp", "petah"}));
    adapt->add_option("--rank", ada.rank);
    adapt->add_option("--conv-rank", ada.conv_rank);
    adapt->add_option("--scale", ada.scale);
    add_task_flags(adapt, ada.task);
    adapt->add_option("--epochs", ada.epochs);
    adapt->add_option("--batch-size", ada.batch_size);
    adapt->add_option("--head-lrs", ada.head_lrs)->delimiter(',');
    adapt->add_option("--adapter-lrs", ada.adapter_lrs)->delimiter(',');
    adapt->add_option("--weight-decays", ada.weight_decays)->delimiter(',');
    adapt->add_option("--seeds", ada.seeds)->delimiter(',');
    adapt->add_flag("--crop", ada.crop);
    adapt->add_flag("--flip", ada.flip);

    MergeArgs mer;
    CLI::App* merge = sub("merge", "fold a bundle into dense weights");
    merge->add_option("--checkpoint", mer.checkpoint)->required();
    merge->add_option("--bundle", mer.bundle)->required();
    merge->add_option("--out", mer.out)->required();
    merge->add_flag("--force-dense", mer.force_dense);

    EvalArgs eva;
    CLI::App* eval_cmd = sub("eval", "report accuracies for a checkpoint or bundle");
    eval_cmd->add_option("--checkpoint", eva.checkpoint)->required();
    eval_cmd->add_option("--bundle", eva.bundle);
    eval_cmd->add_option("--split", eva.split)->check(CLI::IsMember({"train", "val", "test"}));
    add_task_flags(eval_cmd, eva.task);

    CountArgs cnt;
    CLI::App* count = sub("count-params", "print the adapter parameter breakdown");
    add_model_flags(count, cnt.model);
    count->add_option("--checkpoint", cnt.checkpoint);
    count->add_option("--strategy", cnt.strategy)
        ->check(CLI::IsMember({"linear_probe", "full_ft", "attn_ft", "lora_attn", "lora_attn_mlp", "petah"}));
    count->add_option("--rank", cnt.rank);
    count->add_option("--conv-rank", cnt.conv_rank);

    VerifyArgs ver;
    CLI::App* verify = sub("verify", "run the property suites");
    verify->add_option("--merge-cases", ver.merge_cases);
    verify->add_option("--gradcheck-cases", ver.gradcheck_cases);
    verify->add_option("--roundtrips", ver.roundtrips);

    try {
        app.parse(argc, argv);
        if (pretrain->parsed()) cmd_pretrain(pre, seed);
        if (prune->parsed()) cmd_prune(pru);
        if (adapt->parsed()) cmd_adapt(ada);
        if (merge->parsed()) cmd_merge(mer);
        if (eval_cmd->parsed()) cmd_eval(eva);
        if (count->parsed()) cmd_count(cnt);
        if (verify->parsed()) cmd_verify(ver, seed);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        if (code == 0) return 0;
        std::cerr << "error kind=usage msg=\"" << e.what() << "\"\n";
        return 1;
    } catch (const VerificationError& e) {
        std::cerr << "error kind=verification msg=\"" << e.what() << "\"\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error kind=io msg=\"" << e.what() << "\"\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "error kind=shape msg=\"" << e.what() << "\"\n";
        return 1;
    } catch (const ValueError& e) {
        std::cerr << "error kind=value msg=\"" << e.what() << "\"\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error kind=internal msg=\"" << e.what() << "\"\n";
        return 1;
    }
}
