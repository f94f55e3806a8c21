// mygram command-line driver: train, eval, ablate, sweep, synth, check.

#include "mygram/experiments.hpp"
#include "mygram/selfcheck.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace mygram;

namespace {

// Written by `synth` so later commands ingest the data the same way.
constexpr const char* ingest_file = "ingest.json";

struct Source {
    std::string data_dir;
    std::string synth_spec;
    std::string config_file;
    std::vector<std::string> overrides; // key=value, value parsed as JSON
};

void add_source(CLI::App* cmd, Source& s, bool allow_synth)
{
    auto* data = cmd->add_option("--data", s.data_dir, "Dataset directory");
    if (allow_synth) {
        auto* synth = cmd->add_option("--synth", s.synth_spec, "Synthetic spec JSON, generated per seed")
                          ->check(CLI::ExistingFile);
        data->excludes(synth);
        synth->excludes(data);
    } else {
        data->required();
    }
    cmd->add_option("--config", s.config_file, "Flat JSON config with dotted keys")->check(CLI::ExistingFile);
    cmd->add_option("--set", s.overrides, "Config override key=value (repeatable)");
}

TrainConfig resolve_config(const Source& s)
{
    TrainConfig cfg;
    if (!s.data_dir.empty() && fs::exists(fs::path(s.data_dir) / ingest_file))
        cfg = config_from_json(read_json_file(fs::path(s.data_dir) / ingest_file), cfg);
    if (!s.config_file.empty())
        cfg = config_from_json(read_json_file(s.config_file), cfg);
    nlohmann::json extra = nlohmann::json::object();
    for (const auto& kv : s.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw Error("--set expects key=value, got '" + kv + "'");
        const std::string value = kv.substr(eq + 1);
        try {
            extra[kv.substr(0, eq)] = nlohmann::json::parse(value);
        } catch (const nlohmann::json::exception&) {
            extra[kv.substr(0, eq)] = value;
        }
    }
    cfg = config_from_json(extra, cfg);
    cfg.validate();
    return cfg;
}

SyntheticRequest read_synth(const std::string& path) { return synthetic_from_json(read_json_file(path)); }

nlohmann::json ingest_json(const SyntheticRequest& req)
{
    return {{"data.attr_vocab", req.spec.attr_vocab},
            {"data.rel_vocab", req.spec.relations},
            {"data.visual_dim", req.spec.visual_dim},
            {"data.train_ratio", req.spec.train_ratio},
            {"data.seed", req.seed}};
}

std::vector<std::uint64_t> parse_seeds(const std::string& list)
{
    std::vector<std::uint64_t> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty())
            out.push_back(std::stoull(item));
    if (out.empty())
        throw Error("--seeds: expected a comma-separated list");
    return out;
}

std::vector<double> parse_ratios(const std::string& list)
{
    std::vector<double> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty())
            out.push_back(std::stod(item));
    return out;
}

void print_report(const std::string& label, const RankingReport& r)
{
    std::printf("%-24s hits@1 %.4f  hits@10 %.4f  mrr %.4f  (%zu queries)\n", label.c_str(), r.hits1, r.hits10, r.mrr,
                r.ranks.size());
}

nlohmann::json history_json(const std::vector<EpochLoss>& h)
{
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : h)
        out.push_back({{"total", e.total}, {"infonce", e.infonce}, {"gram", e.gram}});
    return out;
}

// One dataset per seed: regenerated from the spec, or the loaded directory.
struct Runs {
    std::optional<AlignmentDataset> fixed;
    std::optional<SyntheticRequest> spec;

    AlignmentDataset data(std::uint64_t seed) const { return fixed ? *fixed : generate_synthetic(spec->spec, seed); }
};

Runs open_runs(const Source& s, const TrainConfig& cfg)
{
    Runs r;
    if (!s.synth_spec.empty())
        r.spec = read_synth(s.synth_spec);
    else if (!s.data_dir.empty())
        r.fixed = load_dataset(s.data_dir, cfg.data);
    else
        throw Error("one of --data or --synth is required");
    return r;
}

int cmd_train(const Source& src, const std::string& out, const std::string& history)
{
    const TrainConfig cfg = resolve_config(src);
    const AlignmentDataset data = load_dataset(src.data_dir, cfg.data);
    const ModelInputs in = prepare_inputs(data);
    TrainOptions opt;
    const Index every = std::max<Index>(1, cfg.epochs / 10);
    opt.on_epoch = [&](Index epoch, const EpochLoss& l, const ModelParams&) {
        if ((epoch + 1) % every == 0 || epoch + 1 == cfg.epochs)
            std::fprintf(stderr, "epoch %4ld  loss %.6f  infonce %.6f  gram %.6f\n", static_cast<long>(epoch + 1),
                         l.total, l.infonce, l.gram);
    };
    const auto result = train(in, data.seeds.train_pairs(), cfg, opt);
    save_checkpoint(out, result.params.snapshot());
    if (!history.empty()) {
        std::ofstream os(history);
        os << history_json(result.history).dump(1) << '\n';
    }
    print_report("test", evaluate(result.params, in, data.seeds.test_pairs(), cfg));
    return 0;
}

int cmd_eval(const Source& src, const std::string& ckpt, bool json)
{
    const TrainConfig cfg = resolve_config(src);
    const AlignmentDataset data = load_dataset(src.data_dir, cfg.data);
    const ModelInputs in = prepare_inputs(data);
    std::mt19937_64 rng(cfg.seed);
    ModelParams params = init_params(in, cfg, rng);
    params.restore(load_checkpoint(ckpt));
    const auto report = evaluate(params, in, data.seeds.test_pairs(), cfg);
    if (json)
        std::cout << report_to_json(report).dump() << '\n';
    else
        print_report("test", report);
    return 0;
}

int cmd_ablate(const Source& src, const std::string& variants, const std::string& seeds, bool json)
{
    const TrainConfig base = resolve_config(src);
    std::vector<Variant> list;
    std::stringstream ss(variants);
    std::string name;
    while (std::getline(ss, name, ',')) {
        const auto v = parse_variant(name);
        if (!v)
            throw Error("unknown ablation variant '" + name + "'");
        list.push_back(*v);
    }
    const auto seed_list = seeds.empty() ? std::vector<std::uint64_t>{base.seed} : parse_seeds(seeds);
    const Runs runs = open_runs(src, base);

    nlohmann::json out = nlohmann::json::object();
    for (Variant v : list)
        out[variant_name(v)] = {{"runs", nlohmann::json::array()}};
    for (std::uint64_t seed : seed_list) {
        const AlignmentDataset data = runs.data(seed);
        TrainConfig cfg = base;
        cfg.seed = seed;
        for (Variant v : list) {
            const auto r = ablate(data, cfg, v);
            auto j = report_to_json(r.report);
            j["seed"] = seed;
            out[variant_name(v)]["runs"].push_back(j);
            if (!json)
                print_report(std::string(variant_name(v)) + " seed " + std::to_string(seed), r.report);
        }
    }
    for (Variant v : list) {
        auto& entry = out[variant_name(v)];
        double h1 = 0.0, h10 = 0.0, mrr = 0.0;
        for (const auto& r : entry["runs"]) {
            h1 += r["hits1"].get<double>();
            h10 += r["hits10"].get<double>();
            mrr += r["mrr"].get<double>();
        }
        const auto n = static_cast<double>(seed_list.size());
        entry["mean"] = {{"hits1", h1 / n}, {"hits10", h10 / n}, {"mrr", mrr / n}};
        if (!json)
            std::printf("%-24s hits@1 %.4f  hits@10 %.4f  mrr %.4f  (mean of %zu)\n",
                        (std::string(variant_name(v)) + " mean").c_str(), h1 / n, h10 / n, mrr / n, seed_list.size());
    }
    if (json)
        std::cout << out.dump() << '\n';
    return 0;
}

int cmd_sweep(const Source& src, const std::string& ratios, bool json)
{
    const TrainConfig cfg = resolve_config(src);
    const Runs runs = open_runs(src, cfg);
    const auto list = parse_ratios(ratios);
    const AlignmentDataset data = runs.data(cfg.seed);
    TrainConfig run_cfg = cfg;
    if (runs.spec)
        run_cfg.data.seed = cfg.seed;
    const auto reports = seed_sweep(data, run_cfg, list);
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
        auto j = report_to_json(reports[i]);
        j["ratio"] = list[i];
        out.push_back(j);
        if (!json) {
            std::ostringstream label;
            label << "ratio " << list[i];
            print_report(label.str(), reports[i]);
        }
    }
    if (json)
        std::cout << out.dump() << '\n';
    return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out)
{
    const auto req = read_synth(spec_path);
    const auto data = generate_synthetic(req.spec, req.seed);
    save_dataset(out, data);
    std::ofstream os(fs::path(out) / ingest_file);
    os << ingest_json(req).dump(1) << '\n';
    std::printf("wrote %ld + %ld entities, %zu + %zu triples, %zu aligned pairs (%zu train) to %s\n",
                static_cast<long>(data.source.entity_count), static_cast<long>(data.target.entity_count),
                data.source.triples.size(), data.target.triples.size(), data.seeds.pairs.size(),
                data.seeds.train_pairs().size(), out.c_str());
    return 0;
}

int cmd_check()
{
    bool ok = true;
    for (const auto& r : selfcheck::run_all()) {
        std::printf("%s %d %s: %s\n", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str(), r.detail.c_str());
        ok = ok && r.passed;
    }
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multi-modal entity alignment: training, evaluation and experiments"};
    app.require_subcommand(1);

    Source train_src, eval_src, ablate_src, sweep_src;
    std::string out, history, ckpt, variants, seeds, ratios = "0.05,0.1,0.2,0.3", spec, synth_out;
    bool eval_json = false, ablate_json = false, sweep_json = false;

    auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
    add_source(train_cmd, train_src, false);
    train_cmd->add_option("--out", out, "Checkpoint path")->required();
    train_cmd->add_option("--history", history, "Write the per-epoch loss history as JSON");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test pairs");
    add_source(eval_cmd, eval_src, false);
    eval_cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required()->check(CLI::ExistingFile);
    eval_cmd->add_flag("--json", eval_json, "Emit a JSON object");

    auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate ablation variants");
    add_source(ablate_cmd, ablate_src, true);
    ablate_cmd->add_option("--variant", variants, "full, no_relation, no_attribute, no_image, no_mgd, no_gram (comma list)")
        ->required();
    ablate_cmd->add_option("--seeds", seeds, "Comma-separated seeds; with --synth each seed also regenerates the data");
    ablate_cmd->add_flag("--json", ablate_json, "Emit JSON");

    auto* sweep_cmd = app.add_subcommand("sweep", "Low-resource sweep over seed ratios");
    add_source(sweep_cmd, sweep_src, true);
    sweep_cmd->add_option("--ratios", ratios, "Comma-separated train ratios in (0,1)");
    sweep_cmd->add_flag("--json", sweep_json, "Emit JSON");

    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic aligned pair of graphs");
    synth_cmd->add_option("--spec", spec, "Synthetic spec JSON")->required()->check(CLI::ExistingFile);
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();

    app.add_subcommand("check", "Run the built-in invariant and gradient checks");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train_cmd)
            return cmd_train(train_src, out, history);
        if (*eval_cmd)
            return cmd_eval(eval_src, ckpt, eval_json);
        if (*ablate_cmd)
            return cmd_ablate(ablate_src, variants, seeds, ablate_json);
        if (*sweep_cmd)
            return cmd_sweep(sweep_src, ratios, sweep_json);
        if (*synth_cmd)
            return cmd_synth(spec, synth_out);
        return cmd_check();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
