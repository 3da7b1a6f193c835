// Command-line driver: train, evaluate, predict, synth, gradcheck, and
// plot-data subcommands over the forecasting library. Exit codes: 0 success,
// 1 usage error, 2 data or validation error, 3 numeric failure.
//
// Reported FLOP estimates count a multiply-accumulate as two operations and
// cover linear maps, attention contractions, and token-mean reductions;
// softmax, normalization, and activations are excluded.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "astra/gradcheck_suite.hpp"
#include "astra/train.hpp"

namespace {

using namespace astra;

struct TrainArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string mode;
    std::string data;
    std::string out;
    std::vector<std::string> overrides;
};

struct EvaluateArgs {
    std::string checkpoint;
    std::string data;
    std::size_t k = 0;  // 0 = the checkpoint's own k_eval
    std::string arb_variant;
    std::optional<std::uint64_t> seed;
};

struct PredictArgs {
    std::string checkpoint;
    std::string window;
    std::string out;
    std::string latents;
    std::size_t k = 0;
    std::optional<std::uint64_t> seed;
};

struct SynthArgs {
    std::string kind = "constant_velocity";
    std::size_t n = 32;
    std::uint64_t seed = 1;
    std::string out;
    std::size_t agents = 2;
    std::size_t t_obs = 8;
    std::size_t t_pred = 12;
    double speed = 1.0;
};

struct GradcheckArgs {
    std::string module = "all";
    double tol = 1e-5;
};

struct PlotArgs {
    std::string report;
    std::string out;
};

void apply_override(TrainConfig& cfg, const std::string& pair) {
    const auto eq = pair.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("--set expects key=value, got '" + pair + "'");
    }
    auto strip = [](std::string s) {
        const auto a = s.find_first_not_of(" \t");
        const auto b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    set_config_field(cfg, strip(pair.substr(0, eq)), strip(pair.substr(eq + 1)));
}

int run_train(const TrainArgs& args) {
    TrainConfig cfg = load_train_config(args.config);
    for (const auto& pair : args.overrides) {
        apply_override(cfg, pair);
    }
    if (!args.mode.empty()) {
        set_config_field(cfg, "mode", args.mode);
    }
    if (args.seed) {
        cfg.seed = *args.seed;
    }
    if (!args.data.empty()) {
        cfg.data_manifest = args.data;
    }
    if (!args.out.empty()) {
        cfg.out = args.out;
    }
    cfg.validate();

    const Dataset data = load_dataset(cfg);
    Model model(cfg.model, cfg.seed);
    const std::size_t a_count = data.scenes.front().windows.front().agents();
    std::printf("scenes %zu windows %zu\n", data.scenes.size(), data.window_count());
    std::printf("parameters %zu\n", count_parameters(model));
    std::printf("estimated_flops_per_window a=%zu k=%zu %llu\n", a_count, cfg.eval_k(),
                static_cast<unsigned long long>(estimate_flops(model, a_count, cfg.eval_k())));

    const TrainResult result = train(cfg, data);
    std::printf("best epoch %zu val_%s %.17g\n", result.best_epoch,
                selection_metric(cfg).c_str(), result.best_val);
    if (!result.checkpoint_path.empty()) {
        std::printf("wrote %s and %s.log\n", result.checkpoint_path.c_str(),
                    result.checkpoint_path.c_str());
    }
    if (result.diverged) {
        std::fprintf(stderr,
                     "error: training diverged; kept the best checkpoint seen so far\n");
        return 3;
    }
    return 0;
}

int run_evaluate(const EvaluateArgs& args) {
    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    TrainConfig cfg = config_from_checkpoint(ckpt);
    if (!args.arb_variant.empty()) {
        set_config_field(cfg, "arb_variant", args.arb_variant);
    }
    cfg.data_manifest = args.data;

    Model model(cfg.model, cfg.seed);
    apply_arrays(ckpt, model.params());
    const Dataset data = load_dataset(cfg);
    std::vector<WindowRef> refs;
    for (std::size_t s = 0; s < data.scenes.size(); ++s) {
        for (std::size_t w = 0; w < data.scenes[s].windows.size(); ++w) {
            refs.push_back({s, w});
        }
    }
    const std::size_t k = args.k == 0 ? cfg.eval_k() : args.k;
    const MetricsReport report = evaluate_model(model, data, refs, k,
                                                args.seed.value_or(cfg.seed),
                                                cfg.arb_variant);
    std::printf("parameters %zu\n", count_parameters(model));
    std::printf("%s", report.to_text().c_str());
    return 0;
}

int run_predict(const PredictArgs& args) {
    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    const TrainConfig cfg = config_from_checkpoint(ckpt);
    Model model(cfg.model, cfg.seed);
    apply_arrays(ckpt, model.params());

    const TableLayout layout = cfg.model.coord_dim == 4 ? TableLayout::frame_agent_bbox
                                                        : TableLayout::frame_agent_xy;
    const TrajectoryTable table = load_trajectory_table(args.window, layout,
                                                        cfg.column_order);
    const TrajectoryWindow w = build_observation_window(table, cfg.model.t_obs);
    const SceneLatentTable latents =
        args.latents.empty() ? latents_for_table(table, cfg, "", "window")
                             : load_scene_latents(args.latents, cfg.model.d_latent);

    const std::size_t k = args.k == 0 ? cfg.eval_k() : args.k;
    const PredictionSet set = model.predict(w, latents, k,
                                            Rng(args.seed.value_or(cfg.seed)));

    const std::int64_t last_frame = w.frame_ids.back();
    const std::int64_t step =
        w.frame_ids.size() > 1 ? w.frame_ids[1] - w.frame_ids[0] : 1;
    std::ofstream out(args.out);
    if (!out) {
        throw DataError("predict: cannot write '" + args.out + "'");
    }
    out.precision(17);
    out << "# columns: sample agent_id frame_id";
    for (std::size_t c = 0; c < set.coord_dim; ++c) {
        out << " c" << c;
    }
    out << "\n";
    const std::size_t stride_t = set.coord_dim;
    const std::size_t stride_k = set.t_pred * stride_t;
    const std::size_t stride_a = set.k * stride_k;
    for (std::size_t a = 0; a < set.agents(); ++a) {
        for (std::size_t s = 0; s < set.k; ++s) {
            for (std::size_t t = 0; t < set.t_pred; ++t) {
                out << s << " " << set.agent_ids[a] << " "
                    << last_frame + static_cast<std::int64_t>(t + 1) * step;
                for (std::size_t c = 0; c < set.coord_dim; ++c) {
                    const double v = set.trajectories[a * stride_a + s * stride_k +
                                                      t * stride_t + c];
                    out << " " << v + w.centering_offset[c];
                }
                out << "\n";
            }
        }
    }
    std::printf("wrote %zu trajectories (%zu agents x k=%zu, t_pred=%zu) to %s\n",
                set.agents() * set.k, set.agents(), set.k, set.t_pred, args.out.c_str());
    return 0;
}

int run_synth(const SynthArgs& args) {
    SynthOptions opts;
    opts.kind = synth_kind_from_name(args.kind);
    opts.n_windows = args.n;
    opts.agents = args.agents;
    opts.seed = args.seed;
    opts.t_obs = args.t_obs;
    opts.t_pred = args.t_pred;
    opts.speed = args.speed;
    const TrajectoryTable table = synth_generate(opts);

    std::filesystem::create_directories(args.out);
    const std::string table_path = args.out + "/trajectories.txt";
    const std::string manifest_path = args.out + "/manifest.txt";
    write_trajectory_table(table_path, table);
    std::ofstream manifest(manifest_path);
    if (!manifest) {
        throw DataError("synth: cannot write '" + manifest_path + "'");
    }
    manifest << "# scene_name table_path [latents_path]\n";
    manifest << "synth " << table_path << "\n";
    std::printf("wrote %zu records to %s (manifest %s)\n", table.records.size(),
                table_path.c_str(), manifest_path.c_str());
    return 0;
}

int run_gradcheck(const GradcheckArgs& args) {
    const auto checks = run_gradcheck_suite(args.module);
    std::size_t failed = 0;
    for (const auto& c : checks) {
        const bool ok = c.result.pass(args.tol);
        failed += ok ? 0 : 1;
        std::printf("[%s] %-26s checked %5zu skipped %zu max_rel %.3e %s\n",
                    c.module.c_str(), c.name.c_str(), c.result.checked, c.result.skipped,
                    c.result.max_rel_err, ok ? "ok" : "FAIL");
        if (!ok) {
            std::printf("    worst %s\n", c.result.worst.c_str());
        }
    }
    std::printf("%zu checks, %zu failed (tol %g)\n", checks.size(), failed, args.tol);
    return failed == 0 ? 0 : 3;
}

int run_plot(const PlotArgs& args) {
    std::ifstream in(args.report);
    if (!in) {
        throw DataError("plot-data: cannot open '" + args.report + "'");
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        lines.push_back(line);
    }
    std::filesystem::create_directories(args.out);
    for (const std::string& path : write_plot_series(lines, args.out)) {
        std::printf("wrote %s\n", path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pedestrian trajectory forecasting: training and evaluation"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("--config", train_args.config, "key = value config file")
        ->required();
    train_cmd->add_option("--seed", train_args.seed, "override the run seed");
    train_cmd->add_option("--mode", train_args.mode,
                          "override the prediction mode (det|stoch)");
    train_cmd->add_option("--data", train_args.data, "override the scene manifest path");
    train_cmd->add_option("--out", train_args.out, "override the checkpoint path");
    train_cmd->add_option("--set", train_args.overrides,
                          "override any config key (key=value, repeatable)");

    EvaluateArgs eval_args;
    auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file")
        ->required();
    eval_cmd->add_option("--data", eval_args.data, "scene manifest")->required();
    eval_cmd->add_option("--k", eval_args.k, "samples per agent (0 = checkpoint's k_eval)");
    eval_cmd->add_option("--arb-variant", eval_args.arb_variant,
                         "bbox RMSE aggregation (mean-of-rmse|joint-rmse)");
    eval_cmd->add_option("--seed", eval_args.seed, "sampling seed (default: run seed)");

    PredictArgs predict_args;
    auto* predict_cmd =
        app.add_subcommand("predict", "forecast one observed window with a checkpoint");
    predict_cmd->add_option("--checkpoint", predict_args.checkpoint, "checkpoint file")
        ->required();
    predict_cmd->add_option("--window", predict_args.window,
                            "trajectory table holding exactly t_obs frames")
        ->required();
    predict_cmd->add_option("--out", predict_args.out, "output file")->required();
    predict_cmd->add_option("--latents", predict_args.latents,
                            "scene latents file (default: configured latent source)");
    predict_cmd->add_option("--k", predict_args.k,
                            "samples per agent (0 = checkpoint's k_eval)");
    predict_cmd->add_option("--seed", predict_args.seed, "sampling seed (default: run seed)");

    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
    synth_cmd->add_option("--kind", synth_args.kind,
                          "constant_velocity|bimodal_turn|circular");
    synth_cmd->add_option("--n", synth_args.n, "number of windows");
    synth_cmd->add_option("--seed", synth_args.seed, "generator seed");
    synth_cmd->add_option("--out", synth_args.out, "output directory")->required();
    synth_cmd->add_option("--agents", synth_args.agents, "agents per window");
    synth_cmd->add_option("--t-obs", synth_args.t_obs, "observed frames per window");
    synth_cmd->add_option("--t-pred", synth_args.t_pred, "future frames per window");
    synth_cmd->add_option("--speed", synth_args.speed, "bimodal_turn step length");

    GradcheckArgs grad_args;
    auto* grad_cmd =
        app.add_subcommand("gradcheck", "finite-difference checks of every gradient");
    grad_cmd->add_option("--module", grad_args.module,
                         "all|tensor|encodings|encoder|cvae|losses|objective");
    grad_cmd->add_option("--tol", grad_args.tol, "max relative error allowed");

    PlotArgs plot_args;
    auto* plot_cmd = app.add_subcommand("plot-data",
                                        "expand a training log into per-metric series files");
    plot_cmd->add_option("--report", plot_args.report, "training log file")->required();
    plot_cmd->add_option("--out", plot_args.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (train_cmd->parsed()) {
            return run_train(train_args);
        }
        if (eval_cmd->parsed()) {
            return run_evaluate(eval_args);
        }
        if (predict_cmd->parsed()) {
            return run_predict(predict_args);
        }
        if (synth_cmd->parsed()) {
            return run_synth(synth_args);
        }
        if (grad_cmd->parsed()) {
            return run_gradcheck(grad_args);
        }
        if (plot_cmd->parsed()) {
            return run_plot(plot_args);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
