// SPDX-License-Identifier: Apache-2.0
// talora: command-line driver for the prompt-tuning pipeline.

#include <CLI11.hpp>
#include <toml.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "talora/analysis.hpp"
#include "talora/errors.hpp"
#include "talora/pipeline.hpp"
#include "talora/training.hpp"

namespace fs = std::filesystem;
using namespace talora;

namespace {

struct Flags {
    std::string config;
    std::string out = "runs";
    std::optional<std::uint64_t> seed;
    std::string task;
    std::optional<int> shots;
    bool force = false;
};

nlohmann::json toml_to_json(const toml::node& node) {
    if (const auto* t = node.as_table()) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
        return j;
    }
    if (const auto* a = node.as_array()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& v : *a) j.push_back(toml_to_json(v));
        return j;
    }
    if (const auto* v = node.as_string()) return v->get();
    if (const auto* v = node.as_integer()) return v->get();
    if (const auto* v = node.as_floating_point()) return v->get();
    if (const auto* v = node.as_boolean()) return v->get();
    throw ParseError("unsupported TOML value type");
}

nlohmann::json read_config_file(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    if (!fs::is_regular_file(path)) throw MissingFileError("config file not found: " + path);
    try {
        return toml_to_json(toml::parse_file(path));
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << path << ":" << e.source().begin.line << ": " << e.description();
        throw ParseError(os.str());
    }
}

/// Resolved run: the merged config plus where its stage outputs live.
struct Run {
    RunConfig config;
    std::string seed_source;
    std::string hash;
    fs::path root;
    Flags flags;

    fs::path stage_dir(const std::string& stage) const { return root / (stage + "-" + hash); }
};

Run resolve(const Flags& flags) {
    nlohmann::json file = read_config_file(flags.config);
    Run run;
    run.flags = flags;
    run.root = flags.out;
    if (file.contains("out") && flags.out == "runs") run.root = file["out"].get<std::string>();
    file.erase("out");

    std::uint64_t seed = 42;
    run.seed_source = "default";
    if (file.contains("seed")) {
        seed = file["seed"].get<std::uint64_t>();
        run.seed_source = "config";
    }
    if (const char* env = std::getenv("TALORA_SEED"); env && *env) {
        try {
            seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ArgumentError(std::string("TALORA_SEED is not an unsigned integer: ") + env);
        }
        run.seed_source = "env";
    }
    if (flags.seed) {
        seed = *flags.seed;
        run.seed_source = "flag";
    }
    file["seed"] = seed;
    if (flags.shots) file["train"]["shots"] = *flags.shots;
    run.config = run_config_from_json(file);

    // Stage outputs chain through a hash that ignores per-invocation choices.
    nlohmann::json keyed = to_json(run.config);
    keyed["train"].erase("shots");
    run.hash = fnv1a_hex(keyed.dump()).substr(0, 12);
    return run;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
}

/// Creates the run directory of a stage and echoes the resolved config into it.
fs::path open_stage(const Run& run, const std::string& stage, const std::string& dir_name,
                    const nlohmann::json& extra = nlohmann::json::object()) {
    const fs::path dir = run.root / dir_name;
    if (fs::exists(dir)) {
        if (!run.flags.force) {
            throw StateError("run directory " + dir.string() + " already exists; pass --force to overwrite");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    nlohmann::json resolved = to_json(run.config);
    resolved["stage"] = stage;
    resolved["seed_source"] = run.seed_source;
    resolved["config_hash"] = run.hash;
    for (const auto& [k, v] : extra.items()) resolved[k] = v;
    write_json(dir / "config.json", resolved);
    std::cout << "run directory: " << dir.string() << "\n";
    return dir;
}

fs::path require(const Run& run, const std::string& stage, const std::string& file, const std::string& needed_by) {
    const fs::path p = run.stage_dir(stage) / file;
    if (!fs::is_regular_file(p)) {
        throw StageOrderError("'" + needed_by + "' requires the output of '" + stage + "' (missing " + p.string() +
                              ")");
    }
    return p;
}

std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", x);
    return buf;
}

void write_losses(const fs::path& path, const std::vector<std::vector<double>>& traces,
                  const std::vector<std::string>& names) {
    std::ostringstream os;
    os << "step,task,loss\n";
    for (std::size_t i = 0; i < traces.size(); ++i) {
        for (std::size_t s = 0; s < traces[i].size(); ++s) os << s << ',' << names[i] << ',' << fmt(traces[i][s]) << '\n';
    }
    write_text(path, os.str());
}

nlohmann::json metrics_json(const Metrics& m) {
    return {{"exact_match", m.exact_match}, {"token_accuracy", m.token_accuracy}, {"loss", m.loss}, {"samples", m.samples}};
}

// Snapshot tensors are named snap.s{step}.t{task}.l{layer}.
Checkpoint snapshot_checkpoint(const BasePromptResult& base) {
    Checkpoint ck;
    nlohmann::json steps = nlohmann::json::array();
    for (const BankSnapshot& snap : base.snapshots) {
        steps.push_back(snap.step);
        for (std::size_t i = 0; i < snap.theta.size(); ++i) {
            for (std::size_t l = 0; l < snap.theta[i].size(); ++l) {
                ck.tensors.push_back({"snap.s" + std::to_string(snap.step) + ".t" + std::to_string(i) + ".l" +
                                          std::to_string(base.bank.first_layer + static_cast<int>(l)),
                                      snap.theta[i][l]});
            }
        }
    }
    ck.config["snapshots"] = {{"steps", steps},
                              {"tasks", base.bank.tasks},
                              {"first_layer", base.bank.first_layer},
                              {"layers", base.bank.layer_count()}};
    return ck;
}

std::vector<BankSnapshot> snapshots_from(const Checkpoint& ck) {
    const auto& s = ck.config.at("snapshots");
    const std::size_t tasks = s.at("tasks").size(), layers = s.at("layers").get<std::size_t>();
    const int first = s.at("first_layer").get<int>();
    std::vector<BankSnapshot> out;
    for (const auto& step : s.at("steps")) {
        BankSnapshot snap;
        snap.step = step.get<int>();
        for (std::size_t i = 0; i < tasks; ++i) {
            std::vector<num::Tensor> theta;
            for (std::size_t l = 0; l < layers; ++l) {
                theta.push_back(ck.at("snap.s" + std::to_string(snap.step) + ".t" + std::to_string(i) + ".l" +
                                      std::to_string(first + static_cast<int>(l))));
            }
            snap.theta.push_back(std::move(theta));
        }
        out.push_back(std::move(snap));
    }
    return out;
}

int cmd_pretrain(const Run& run) {
    const RunConfig& c = run.config;
    const fs::path dir = open_stage(run, "pretrain-backbone", "pretrain-backbone-" + run.hash);
    const auto mixture = pretrain_mixture(c.suite, c.backbone.vocab_size);
    const PretrainResult r = pretrain_backbone(init_backbone(c.backbone, c.seed), mixture, c.pretrain);
    Checkpoint ck;
    ck.config["seed"] = c.seed;
    add_backbone(ck, r.weights);
    save_checkpoint(dir / "backbone.talr", ck);
    write_losses(dir / "pretrain_loss.csv", {r.loss_trace}, {"mixture"});
    nlohmann::json summary = {{"steps", r.loss_trace.size()},
                              {"tasks", task_names(mixture)},
                              {"parameters", r.weights.parameter_count()}};
    if (!r.loss_trace.empty()) {
        summary["initial_loss"] = r.loss_trace.front();
        summary["final_loss"] = r.loss_trace.back();
    }
    write_json(dir / "summary.json", summary);
    std::cout << "pretrained " << r.weights.parameter_count() << " parameters over " << r.loss_trace.size()
              << " steps\n";
    return 0;
}

BackboneWeights load_backbone(const Run& run, const std::string& who) {
    return backbone_from(load_checkpoint(require(run, "pretrain-backbone", "backbone.talr", who)));
}

int cmd_train_base(const Run& run) {
    const RunConfig& c = run.config;
    const BackboneWeights backbone = load_backbone(run, "train-base");
    const fs::path dir = open_stage(run, "train-base", "train-base-" + run.hash);
    const auto sources = source_datasets(c.suite, c.backbone.vocab_size);
    const BasePromptResult base = train_base_prompts(backbone, sources, c.train);
    Checkpoint ck;
    add_base_prompts(ck, base);
    save_checkpoint(dir / "base_prompts.talr", ck);
    save_checkpoint(dir / "snapshots.talr", snapshot_checkpoint(base));
    write_losses(dir / "phase1_loss.csv", base.loss_trace, base.bank.tasks);
    nlohmann::json summary = {{"tasks", base.bank.tasks}, {"unseen_data", nlohmann::json::object()}};
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const PromptSet prompts = base.prompts(i);
        const Metrics m = evaluate(backbone, &prompts, sources[i].unseen);
        summary["unseen_data"][sources[i].task] = metrics_json(m);
        std::cout << "PT " << sources[i].task << ": exact_match " << fmt(m.exact_match) << "\n";
    }
    write_json(dir / "summary.json", summary);
    return 0;
}

int cmd_train_talora(const Run& run) {
    const RunConfig& c = run.config;
    const BackboneWeights backbone = load_backbone(run, "train-talora");
    const BasePromptResult base =
        base_prompts_from(load_checkpoint(require(run, "train-base", "base_prompts.talr", "train-talora")));
    const fs::path dir = open_stage(run, "train-talora", "train-talora-" + run.hash);
    const auto sources = source_datasets(c.suite, c.backbone.vocab_size);
    const LoraFactors init = LoraFactors::init(c.backbone, task_names(sources), c.train.lora, c.seed);
    const TaloraResult r = train_talora(backbone, base.bank, init, sources, c.train);
    Checkpoint ck;
    add_factors(ck, base.bank, r.factors);
    save_checkpoint(dir / "talora.talr", ck);
    write_trace_csv(dir / "phase2_metrics.csv", r.trace);
    nlohmann::json summary = {{"steps", r.trace.size()}};
    if (!r.trace.empty()) {
        summary["final_loss"] = r.trace.back().loss;
        summary["final_penalty"] = r.trace.back().penalty;
        summary["final_mean_abs_tanh_gate"] = r.trace.back().mean_abs_tanh_gate;
    }
    write_json(dir / "summary.json", summary);
    std::cout << "phase-2 steps " << r.trace.size() << ", mean |tanh(g)| "
              << fmt(r.trace.empty() ? 0.0 : r.trace.back().mean_abs_tanh_gate) << "\n";
    return 0;
}

int cmd_adapt(const Run& run) {
    const RunConfig& c = run.config;
    const std::string task = run.flags.task.empty() ? c.suite.target.front() : run.flags.task;
    const int k = c.train.shots;
    const BackboneWeights backbone = load_backbone(run, "adapt-target");
    const auto [theta0, factors] =
        factors_from(load_checkpoint(require(run, "train-talora", "talora.talr", "adapt-target")));
    SuiteConfig one = c.suite;
    one.target = {task};
    const TaskDataset target = target_datasets(one, c.backbone.vocab_size).front();
    const fs::path dir = open_stage(run, "adapt-target", "adapt-target-" + task + "-k" + std::to_string(k) + "-" + run.hash,
                                    {{"task", task}, {"shots", k}});
    const AdaptResult r = adapt_target(backbone, theta0, factors.slow, target, k, c.train);
    Checkpoint ck;
    ck.config["task"] = task;
    ck.config["shots"] = k;
    add_task_factors(ck, r.factors);
    save_checkpoint(dir / "target.talr", ck);
    std::ostringstream csv;
    csv << "task,k,seed,exact_match,token_accuracy,loss,baseline_exact_match\n"
        << task << ',' << k << ',' << c.seed << ',' << fmt(r.metrics.exact_match) << ','
        << fmt(r.metrics.token_accuracy) << ',' << fmt(r.metrics.loss) << ',' << fmt(r.baseline.exact_match) << '\n';
    write_text(dir / "fewshot.csv", csv.str());
    const nlohmann::json out = {{"task", task},
                                {"k", k},
                                {"seed", c.seed},
                                {"metrics", metrics_json(r.metrics)},
                                {"baseline", metrics_json(r.baseline)}};
    write_json(dir / "fewshot.json", out);
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_eval(const Run& run) {
    const RunConfig& c = run.config;
    const BackboneWeights backbone = load_backbone(run, "eval");
    const BasePromptResult base =
        base_prompts_from(load_checkpoint(require(run, "train-base", "base_prompts.talr", "eval")));
    const auto [theta0, factors] = factors_from(load_checkpoint(require(run, "train-talora", "talora.talr", "eval")));
    const fs::path dir = open_stage(run, "eval", "eval-" + run.hash);
    const auto sources = source_datasets(c.suite, c.backbone.vocab_size);
    std::ostringstream csv;
    csv << "task,method,seed,exact_match,token_accuracy,loss\n";
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const PromptSet pt = base.prompts(i);
        const PromptSet ta = assemble_prompts(theta0, factors, i);
        for (const auto& [method, prompts] : {std::pair{"PT", &pt}, std::pair{"TA-LoRA", &ta}}) {
            const Metrics m = evaluate(backbone, prompts, sources[i].unseen);
            csv << sources[i].task << ',' << method << ',' << c.seed << ',' << fmt(m.exact_match) << ','
                << fmt(m.token_accuracy) << ',' << fmt(m.loss) << '\n';
            nlohmann::json row = metrics_json(m);
            row["task"] = sources[i].task;
            row["method"] = method;
            out.push_back(row);
            std::cout << method << " " << sources[i].task << ": exact_match " << fmt(m.exact_match) << "\n";
        }
    }
    write_text(dir / "unseen_data.csv", csv.str());
    write_json(dir / "eval.json", out);
    return 0;
}

int cmd_analyze_sim(const Run& run) {
    const Checkpoint ck = load_checkpoint(require(run, "train-base", "snapshots.talr", "analyze-sim"));
    const auto snaps = snapshots_from(ck);
    const fs::path dir = open_stage(run, "analyze-sim", "analyze-sim-" + run.hash);
    const int first = ck.config.at("snapshots").at("first_layer").get<int>();
    const auto tasks = ck.config.at("snapshots").at("tasks").get<std::vector<std::string>>();
    const auto traces = layer_similarity(snaps, first);
    write_similarity_csv(dir / "similarity.csv", traces, tasks);
    nlohmann::json summary = nlohmann::json::array();
    bool warned = false;
    for (const SimilarityTrace& t : traces) {
        summary.push_back({{"step", t.step},
                           {"layer", t.layer},
                           {"mean_abs_cosine", t.mean_abs_pairwise()},
                           {"mean_cosine", t.mean_pairwise()},
                           {"zero_norm", t.zero_norm}});
        warned = warned || t.zero_norm;
    }
    write_json(dir / "similarity.json", summary);
    if (warned) std::cerr << "warning: zero-norm prompt encountered; its similarities are reported as 0\n";
    std::cout << "wrote " << traces.size() << " similarity matrices\n";
    return 0;
}

int cmd_count_params(const Run& run) {
    const RunConfig& c = run.config;
    const ParamAccounting a = count_params(c.backbone, static_cast<int>(c.suite.source.size()), c.train.lora.rank,
                                           c.train.lora.per_head_gates);
    const auto rows = efficiency_report(a);
    const fs::path dir = open_stage(run, "count-params", "count-params-" + run.hash);
    write_efficiency_csv(dir / "params.csv", rows);
    write_json(dir / "params.json", efficiency_json(a, rows));
    std::printf("%-8s %12s %12s %12s %12s\n", "method", "per_task", "shared", "total", "per_task/FT");
    for (const EfficiencyRow& r : rows) {
        std::printf("%-8s %12zu %12zu %12zu %11.4f%%\n", r.method.c_str(), r.per_task, r.shared, r.total,
                    100.0 * r.per_task_ratio);
    }
    return 0;
}

int cmd_report(const Run& run) {
    const fs::path dir = open_stage(run, "report", "report-" + run.hash);
    const fs::path p2 = run.stage_dir("train-talora") / "phase2_metrics.csv";
    const fs::path ud = run.stage_dir("eval") / "unseen_data.csv";
    if (fs::is_regular_file(p2)) fs::copy_file(p2, dir / "phase2_metrics.csv");
    if (fs::is_regular_file(ud)) fs::copy_file(ud, dir / "unseen_data.csv");
    // Few-shot rows of every adapt-target run of this config, in name order.
    std::vector<fs::path> shots;
    if (fs::is_directory(run.root)) {
        const std::string suffix = "-" + run.hash;
        for (const auto& e : fs::directory_iterator(run.root)) {
            const std::string name = e.path().filename().string();
            if (name.rfind("adapt-target-", 0) == 0 && name.size() > suffix.size() &&
                name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0 &&
                fs::is_regular_file(e.path() / "fewshot.csv")) {
                shots.push_back(e.path() / "fewshot.csv");
            }
        }
    }
    std::sort(shots.begin(), shots.end());
    if (!shots.empty()) {
        std::ostringstream merged;
        for (std::size_t i = 0; i < shots.size(); ++i) {
            std::ifstream is(shots[i]);
            std::string line;
            bool header = true;
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                if (header) {
                    if (i == 0) merged << line << '\n';
                    header = false;
                    continue;
                }
                merged << line << '\n';
            }
        }
        write_text(dir / "fewshot.csv", merged.str());
    }
    const nlohmann::json report = emit_report(dir, dir);
    const auto problems = validate_report(report);
    if (!problems.empty()) throw FormatError("report failed schema validation: " + problems.front(), 0);
    std::cout << "wrote " << (dir / "report.json").string() << "\n";
    return 0;
}

void print_error(const std::string& code, const std::string& message) {
    std::string flat = message;
    std::replace(flat.begin(), flat.end(), '\n', ' ');
    std::cerr << "error code=" << code << " message=" << nlohmann::json(flat).dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Task-adaptive low-rank prompt tuning pipeline"};
    app.require_subcommand(1);
    Flags flags;
    std::uint64_t seed = 0;
    int shots = 0;

    struct Sub {
        const char* name;
        const char* help;
        int (*fn)(const Run&);
    };
    const Sub subs[] = {
        {"pretrain-backbone", "Pre-train and freeze the backbone", cmd_pretrain},
        {"train-base", "Phase 1: per-task vanilla prompts", cmd_train_base},
        {"train-talora", "Phase 2: joint fast/slow factor training", cmd_train_talora},
        {"adapt-target", "Phase 3: few-shot adaptation to a target task", cmd_adapt},
        {"eval", "Unseen-data metrics of phase 1 and phase 2", cmd_eval},
        {"analyze-sim", "Inter-task prompt similarity over phase 1", cmd_analyze_sim},
        {"count-params", "Trainable-parameter accounting", cmd_count_params},
        {"report", "Consolidate metrics into report.json", cmd_report},
    };
    std::vector<std::pair<CLI::App*, const Sub*>> registered;
    for (const Sub& s : subs) {
        CLI::App* sub = app.add_subcommand(s.name, s.help);
        sub->add_option("--config", flags.config, "TOML config file");
        sub->add_option("--out", flags.out, "Root directory for run directories");
        sub->add_option("--seed", seed, "Run seed (overrides TALORA_SEED and the config)");
        sub->add_option("--task", flags.task, "Target task name");
        sub->add_option("--shots", shots, "Few-shot sample count")->check(CLI::IsMember({16, 32, 64}));
        sub->add_flag("--force", flags.force, "Overwrite an existing run directory");
        registered.emplace_back(sub, &s);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        print_error("usage", e.what());
        return 64;
    }

    try {
        for (const auto& [sub, s] : registered) {
            if (!sub->parsed()) continue;
            if (sub->count("--seed")) flags.seed = seed;
            if (sub->count("--shots")) flags.shots = shots;
            const Run run = resolve(flags);
            std::cout << "seed: " << run.config.seed << " (" << run.seed_source << ")\n";
            return s->fn(run);
        }
    } catch (const StageOrderError& e) {
        print_error(e.code(), e.what());
        return 2;
    } catch (const Error& e) {
        print_error(e.code(), e.what());
        return 1;
    } catch (const nlohmann::json::exception& e) {
        print_error("config", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 1;
}
