// Experiment driver: gen-data, train, eval, audit and bench subcommands over
// a flat key=value config. Logs go to stderr, results to CSV files under the
// output directory. Exit codes: 0 success, 1 config error, 2 runtime error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "canon/bench.hpp"
#include "canon/config.hpp"
#include "canon/svg.hpp"
#include "canon/train.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file")->required();
    cmd->add_option("--set", args.overrides, "override config entries, key=value");
    cmd->add_option("--out", args.out_dir, "output directory root");
}

canon::ExperimentConfig resolve(const CommonArgs& args) {
    canon::ExperimentConfig cfg = canon::ExperimentConfig::load(args.config_path, args.overrides);
    std::filesystem::create_directories(args.out_dir);
    std::ofstream os(args.out_dir + "/resolved_config.txt");
    os << cfg.resolved_text();
    return cfg;
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

int run_gen_data(const CommonArgs& args) {
    canon::ExperimentConfig cfg = resolve(args);
    canon::TaskData data = canon::load_or_generate(cfg, args.out_dir);
    log_line("gen-data: task=" + cfg.task + " train=" + std::to_string(data.train_x.size()) +
             " test=" + std::to_string(data.test_x.size()));
    return 0;
}

int run_train(const CommonArgs& args) {
    canon::ExperimentConfig cfg = resolve(args);
    canon::TrainOutput out = canon::train(cfg, args.out_dir);
    log_line("train: epochs_run=" + std::to_string(out.epochs_run) + " checkpoint=" +
             out.checkpoint_path);
    for (const auto& row : out.rows)
        if (row.split == "val")
            log_line("  epoch " + std::to_string(row.epoch) + " val loss " +
                     std::to_string(row.loss) + " metric " + std::to_string(row.metric));
    if (cfg.plots) {
        std::vector<double> xs;
        canon::SvgSeries train_loss{"train loss", {}}, val_loss{"val loss", {}};
        for (const auto& row : out.rows) {
            if (row.split == "train") {
                xs.push_back(static_cast<double>(row.epoch));
                train_loss.y.push_back(row.loss);
            } else if (row.split == "val") {
                val_loss.y.push_back(row.loss);
            }
        }
        std::vector<canon::SvgSeries> series{train_loss};
        if (!val_loss.y.empty()) series.push_back(val_loss);
        canon::write_line_chart(args.out_dir + "/metrics.svg", "training loss", xs, series,
                                "epoch", "loss");
    }
    return 0;
}

int run_eval(const CommonArgs& args) {
    canon::ExperimentConfig cfg = resolve(args);
    canon::MetricsRow row = canon::evaluate(cfg, args.out_dir);
    canon::write_metrics_csv(args.out_dir + "/eval.csv", {row});
    log_line("eval: split=" + row.split + " loss=" + std::to_string(row.loss) + " metric=" +
             std::to_string(row.metric));
    return 0;
}

int run_audit(const CommonArgs& args) {
    canon::ExperimentConfig cfg = resolve(args);
    canon::EquivarianceReport report = canon::run_audit(cfg, args.out_dir);
    log_line("audit: group=" + canon::to_string(report.group) + " samples=" +
             std::to_string(report.n_samples) + " max_rel_dev=" +
             std::to_string(report.max_rel_dev) + " flagged=" +
             std::to_string(report.symmetric_inputs_flagged) + " relaxed_failures=" +
             std::to_string(report.relaxed_failures));
    return 0;
}

int run_bench(const CommonArgs& args) {
    canon::ExperimentConfig cfg = resolve(args);
    std::vector<canon::BenchRow> rows = canon::benchmark_inference(cfg);
    canon::write_bench_csv(args.out_dir + "/bench.csv", rows);
    for (const auto& row : rows)
        log_line("bench: " + row.component + " order=" + std::to_string(row.group_order) +
                 " median_ms=" + std::to_string(row.median_ms));
    if (cfg.plots) {
        std::vector<double> orders;
        canon::SvgSeries canon_series{"canonicalizer", {}}, gcnn_series{"group-conv predictor", {}};
        for (const auto& row : rows) {
            if (row.component == "image_canonicalizer") {
                orders.push_back(static_cast<double>(row.group_order));
                canon_series.y.push_back(row.median_ms);
            } else if (row.component == "gcnn_predictor") {
                gcnn_series.y.push_back(row.median_ms);
            }
        }
        if (!orders.empty())
            canon::write_line_chart(args.out_dir + "/bench.svg", "inference vs group order",
                                    orders, {canon_series, gcnn_series}, "group order",
                                    "median ms / batch");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"canonicalization toolkit experiment driver"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, audit_args, bench_args;
    CLI::App* gen = app.add_subcommand("gen-data", "generate and store task datasets");
    add_common(gen, gen_args);
    CLI::App* tr = app.add_subcommand("train", "train a model per the config");
    add_common(tr, train_args);
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(ev, eval_args);
    CLI::App* au = app.add_subcommand("audit", "equivariance audit of the configured model");
    add_common(au, audit_args);
    CLI::App* be = app.add_subcommand("bench", "inference timing table");
    add_common(be, bench_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return run_gen_data(gen_args);
        if (tr->parsed()) return run_train(train_args);
        if (ev->parsed()) return run_eval(eval_args);
        if (au->parsed()) return run_audit(audit_args);
        if (be->parsed()) return run_bench(bench_args);
    } catch (const canon::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
