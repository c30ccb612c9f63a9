#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pte/cli/commands.hpp"
#include "pte/errors.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Progressive thought encoding: cache-constrained GRPO training on synthetic reasoning tasks"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    pte::CommandOptions options;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
        sub->add_option("--set", overrides, "Override a config key, e.g. --set train.iterations=10 (repeatable)");
        sub->add_option("--seed", seed, "Run seed");
        sub->add_option("--out", out_dir, "Output directory");
    };
    auto* pretrain = app.add_subcommand("pretrain", "Supervised pretraining of the base model on gold responses");
    auto* train = app.add_subcommand("train", "GRPO training of the adapter bank under the windowed cache");
    auto* eval = app.add_subcommand("eval", "Greedy success rate per window length");
    auto* sweep = app.add_subcommand("sweep", "Eviction-ratio, window or global-token sweep");
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the training gradient");
    auto* dump = app.add_subcommand("rollout-dump", "Sample trajectories and write them as JSON lines");
    for (auto* sub : {pretrain, train, eval, sweep, gradcheck, dump}) common(sub);
    train->add_option("--resume", options.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
    for (auto* sub : {eval, sweep, dump}) {
        sub->add_option("--checkpoint", options.checkpoint, "Checkpoint to load")->check(CLI::ExistingFile);
    }
    dump->add_option("--count", options.count, "Number of tasks")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    if (!out_dir.empty()) overrides.push_back("out=" + nlohmann::json(out_dir).dump());
    pte::RunConfig config;
    try {
        config = pte::load_run_config(config_path, overrides);
    } catch (const pte::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }

    if (*pretrain) return pte::cmd_pretrain(config, std::cout, std::cerr);
    if (*train) return pte::cmd_train(config, options, std::cout, std::cerr);
    if (*eval) return pte::cmd_eval(config, options, std::cout, std::cerr);
    if (*sweep) return pte::cmd_sweep(config, options, std::cout, std::cerr);
    if (*gradcheck) return pte::cmd_gradcheck(config, std::cout, std::cerr);
    return pte::cmd_rollout_dump(config, options, std::cout, std::cerr);
}
