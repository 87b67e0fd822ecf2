// minidiff: staged defect-image generation and recognition runs over a workdir.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "minidiff/config.hpp"
#include "minidiff/pipeline.hpp"

namespace {

int exit_code(minidiff::ErrorKind kind) {
    switch (kind) {
        case minidiff::ErrorKind::config_error: return 2;
        case minidiff::ErrorKind::dependency_missing: return 3;
        default: return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot defect image generation, FID tuning and classifier training"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::string workdir = "run";
    std::optional<std::uint64_t> seed;
    bool force = false;
    std::vector<std::string> overrides;

    const std::vector<std::pair<std::string, std::string>> verbs = {
        {"pretrain", "build the dataset manifest, auto-encoder and base text-conditional denoiser"},
        {"adapt-token", "learn the placeholder token embedding per class"},
        {"adapt-lora", "learn per-class low-rank adapters (or full fine-tuning with adapt.full)"},
        {"generate", "generate the per-class image pool"},
        {"tune", "select guidance scale and strength per class by FID"},
        {"fid", "report FID of the generated pool against real images"},
        {"classify", "train and test the defect classifier on the configured data protocol"},
        {"pipeline", "run every enabled stage in order"},
    };
    for (const auto& [name, help] : verbs) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
        sub->add_option("--workdir", workdir, "run directory")->capture_default_str();
        sub->add_option("--seed", seed, "root seed (overrides run.seed)");
        sub->add_flag("--force", force, "rerun even when outputs are up to date");
        sub->add_option("--set", overrides, "extra key=value override, repeatable");
    }
    app.add_subcommand("config", "print every configuration key with its default")->callback([] {
        for (const minidiff::ConfigKey& k : minidiff::config_schema())
            std::cout << "# " << k.doc << "\n" << k.key << " = " << k.default_value << "\n\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    CLI::App* chosen = app.get_subcommands().front();
    if (chosen->get_name() == "config") return 0;

    try {
        minidiff::Config cfg;
        if (!config_path.empty()) cfg.load(config_path);
        for (const std::string& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw minidiff::Error(minidiff::ErrorKind::config_error, "--set expects key=value, got '" + kv + "'");
            cfg.parse(kv, "--set");
        }
        minidiff::Pipeline pipeline(std::move(cfg), workdir, seed, force, &std::cerr);
        for (const minidiff::RunRecord& r : pipeline.run(minidiff::parse_stage(chosen->get_name()))) {
            std::cout << r.stage << ": " << r.status;
            if (r.status == "ran") std::cout << " in " << r.wall_seconds << " s";
            if (!r.metrics.empty()) std::cout << " " << r.metrics.dump();
            std::cout << "\n";
        }
    } catch (const minidiff::Error& e) {
        std::cerr << "minidiff: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "minidiff: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
