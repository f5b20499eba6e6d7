// SPDX-License-Identifier: Apache-2.0
#include "talora/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "talora/errors.hpp"

namespace talora {

using num::Tensor;

namespace {

std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    return os;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os = open_out(path);
    os << text;
    if (!os) throw IoError("failed writing " + path.string());
}

double to_double(const std::string& s, const std::filesystem::path& path) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError(path.string() + ": '" + s + "' is not a number");
    }
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double mean(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace

Cosine cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("cosine_similarity on " + num::shape_to_string(a.shape()) + " and " +
                             num::shape_to_string(b.shape()));
    }
    const auto x = a.data(), y = b.data();
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xy += x[i] * y[i];
        xx += x[i] * x[i];
        yy += y[i] * y[i];
    }
    if (xx == 0.0 || yy == 0.0) return {0.0, true};
    const double c = xy / (std::sqrt(xx) * std::sqrt(yy));
    return {std::clamp(c, -1.0, 1.0), false};
}

double SimilarityTrace::mean_abs_pairwise() const {
    std::vector<double> xs;
    for (std::size_t i = 0; i < cosine.size(); ++i) {
        for (std::size_t j = i + 1; j < cosine.size(); ++j) xs.push_back(std::abs(cosine[i][j]));
    }
    return mean(xs);
}

double SimilarityTrace::mean_pairwise() const {
    std::vector<double> xs;
    for (std::size_t i = 0; i < cosine.size(); ++i) {
        for (std::size_t j = i + 1; j < cosine.size(); ++j) xs.push_back(cosine[i][j]);
    }
    return mean(xs);
}

std::vector<SimilarityTrace> layer_similarity(std::span<const BankSnapshot> snapshots, int first_layer) {
    std::vector<SimilarityTrace> out;
    for (const BankSnapshot& snap : snapshots) {
        const std::size_t t = snap.theta.size();
        if (t < 2) throw ArgumentError("layer_similarity: needs at least two tasks");
        const std::size_t layers = snap.theta.front().size();
        for (std::size_t l = 0; l < layers; ++l) {
            SimilarityTrace tr;
            tr.step = snap.step;
            tr.layer = first_layer + static_cast<int>(l);
            tr.cosine.assign(t, std::vector<double>(t, 0.0));
            for (std::size_t i = 0; i < t; ++i) {
                tr.cosine[i][i] = 1.0;
                for (std::size_t j = i + 1; j < t; ++j) {
                    const Cosine c = cosine_similarity(snap.theta[i][l], snap.theta[j][l]);
                    tr.cosine[i][j] = tr.cosine[j][i] = c.value;
                    tr.zero_norm = tr.zero_norm || c.zero_norm;
                }
            }
            out.push_back(std::move(tr));
        }
    }
    return out;
}

void write_similarity_csv(const std::filesystem::path& path, std::span<const SimilarityTrace> traces,
                          std::span<const std::string> tasks) {
    std::ofstream os = open_out(path);
    os << "step,layer,task_i,task_j,cosine\n";
    for (const SimilarityTrace& tr : traces) {
        if (tr.cosine.size() != tasks.size()) throw DimensionError("write_similarity_csv: task names do not match");
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            for (std::size_t j = i + 1; j < tasks.size(); ++j) {
                os << tr.step << ',' << tr.layer << ',' << tasks[i] << ',' << tasks[j] << ',' << fmt(tr.cosine[i][j])
                   << '\n';
            }
        }
    }
    if (!os) throw IoError("failed writing " + path.string());
}

std::vector<EfficiencyRow> efficiency_report(const ParamAccounting& a) {
    const double backbone = static_cast<double>(a.backbone_frozen);
    auto ratio = [&](std::size_t n) { return static_cast<double>(n) / backbone; };
    std::vector<EfficiencyRow> rows;
    rows.push_back({"FT", a.backbone_frozen, 0, a.tasks * a.backbone_frozen, 1.0});
    rows.push_back({"PT", a.pt_per_task, 0, a.tasks * a.pt_per_task, ratio(a.pt_per_task)});
    const std::size_t shared = a.shared_slow + a.prompt_mean + a.gates;
    rows.push_back({"TA-LoRA", a.per_task_fast, shared, a.tasks * a.per_task_fast + shared, ratio(a.per_task_fast)});
    return rows;
}

void write_efficiency_csv(const std::filesystem::path& path, std::span<const EfficiencyRow> rows) {
    std::ofstream os = open_out(path);
    os << "method,per_task,shared,total,per_task_ratio\n";
    for (const EfficiencyRow& r : rows) {
        os << r.method << ',' << r.per_task << ',' << r.shared << ',' << r.total << ',' << fmt(r.per_task_ratio) << '\n';
    }
    if (!os) throw IoError("failed writing " + path.string());
}

nlohmann::json efficiency_json(const ParamAccounting& a, std::span<const EfficiencyRow> rows) {
    nlohmann::json j;
    j["accounting"] = {{"per_task_fast", a.per_task_fast}, {"shared_slow", a.shared_slow},
                       {"prompt_mean", a.prompt_mean},     {"gates", a.gates},
                       {"backbone_frozen", a.backbone_frozen}, {"pt_per_task", a.pt_per_task},
                       {"tasks", a.tasks},                 {"ratio", a.ratio},
                       {"total_trainable", a.total_trainable()}};
    j["rows"] = nlohmann::json::array();
    for (const EfficiencyRow& r : rows) {
        j["rows"].push_back({{"method", r.method},
                             {"per_task", r.per_task},
                             {"shared", r.shared},
                             {"total", r.total},
                             {"per_task_ratio", r.per_task_ratio}});
    }
    return j;
}

std::size_t CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    throw ParseError("csv has no column '" + name + "'");
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFileError("cannot open " + path.string());
    CsvTable t;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = split(line);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size()) {
            throw ParseError(path.string() + ": line " + std::to_string(line_no) + " has " +
                             std::to_string(cells.size()) + " cells, expected " + std::to_string(t.header.size()));
        }
        t.rows.push_back(std::move(cells));
    }
    if (t.header.empty()) throw ParseError(path.string() + ": missing header");
    return t;
}

std::vector<std::string> report_inputs() { return {"phase2_metrics.csv", "unseen_data.csv", "fewshot.csv"}; }

nlohmann::json emit_report(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir) {
    std::vector<std::string> missing;
    for (const std::string& f : report_inputs()) {
        if (!std::filesystem::is_regular_file(in_dir / f)) missing.push_back(f);
    }
    if (!missing.empty()) {
        std::string list;
        for (const std::string& f : report_inputs()) list += (list.empty() ? "" : ", ") + f;
        std::string absent;
        for (const std::string& f : missing) absent += (absent.empty() ? "" : ", ") + f;
        throw MissingFileError("report inputs missing in " + in_dir.string() + ": " + absent + " (expected " + list +
                               ")");
    }

    // Gate trajectory: mean over the rows logged at each step.
    const std::filesystem::path p2 = in_dir / "phase2_metrics.csv";
    const CsvTable trace = read_csv(p2);
    std::map<long, std::vector<double>> gate_at, loss_at;
    {
        const std::size_t cs = trace.column("step"), cg = trace.column("mean_abs_tanh_gate"), cl = trace.column("loss");
        for (const auto& r : trace.rows) {
            const long step = static_cast<long>(to_double(r[cs], p2));
            gate_at[step].push_back(to_double(r[cg], p2));
            loss_at[step].push_back(to_double(r[cl], p2));
        }
    }

    const std::filesystem::path ud = in_dir / "unseen_data.csv";
    const CsvTable unseen = read_csv(ud);
    // (task, method) -> metric samples over seeds
    std::map<std::pair<std::string, std::string>, std::array<std::vector<double>, 3>> by_method;
    {
        const std::size_t ct = unseen.column("task"), cm = unseen.column("method"), ce = unseen.column("exact_match"),
                          ca = unseen.column("token_accuracy"), cl = unseen.column("loss");
        for (const auto& r : unseen.rows) {
            auto& slot = by_method[{r[ct], r[cm]}];
            slot[0].push_back(to_double(r[ce], ud));
            slot[1].push_back(to_double(r[ca], ud));
            slot[2].push_back(to_double(r[cl], ud));
        }
    }

    const std::filesystem::path fs = in_dir / "fewshot.csv";
    const CsvTable fewshot = read_csv(fs);
    std::map<std::pair<std::string, long>, std::array<std::vector<double>, 3>> by_shot;
    {
        const std::size_t ct = fewshot.column("task"), ck = fewshot.column("k"), ce = fewshot.column("exact_match"),
                          ca = fewshot.column("token_accuracy"), cb = fewshot.column("baseline_exact_match");
        for (const auto& r : fewshot.rows) {
            auto& slot = by_shot[{r[ct], static_cast<long>(to_double(r[ck], fs))}];
            slot[0].push_back(to_double(r[ce], fs));
            slot[1].push_back(to_double(r[ca], fs));
            slot[2].push_back(to_double(r[cb], fs));
        }
    }

    nlohmann::json report;
    report["schema_version"] = kReportSchemaVersion;
    report["unseen_data"] = nlohmann::json::array();
    for (const auto& [key, m] : by_method) {
        report["unseen_data"].push_back({{"task", key.first},
                                         {"method", key.second},
                                         {"runs", m[0].size()},
                                         {"exact_match", mean(m[0])},
                                         {"token_accuracy", mean(m[1])},
                                         {"loss", mean(m[2])}});
    }
    report["unseen_task"] = nlohmann::json::array();
    for (const auto& [key, m] : by_shot) {
        report["unseen_task"].push_back({{"task", key.first},
                                         {"k", key.second},
                                         {"runs", m[0].size()},
                                         {"exact_match", mean(m[0])},
                                         {"token_accuracy", mean(m[1])},
                                         {"baseline_exact_match", mean(m[2])}});
    }
    report["gate_trajectory"] = nlohmann::json::array();
    for (const auto& [step, gs] : gate_at) {
        report["gate_trajectory"].push_back(
            {{"step", step}, {"mean_abs_tanh_gate", mean(gs)}, {"loss", mean(loss_at[step])}});
    }

    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "report.json", report.dump(2) + "\n");
    {
        std::ostringstream os;
        os << "step,mean_abs_tanh_gate,loss\n";
        for (const auto& g : report["gate_trajectory"]) {
            os << g["step"].get<long>() << ',' << fmt(g["mean_abs_tanh_gate"].get<double>()) << ','
               << fmt(g["loss"].get<double>()) << '\n';
        }
        write_text(out_dir / "fig_gate_trajectory.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "task,method,exact_match,token_accuracy,loss\n";
        for (const auto& u : report["unseen_data"]) {
            os << u["task"].get<std::string>() << ',' << u["method"].get<std::string>() << ','
               << fmt(u["exact_match"].get<double>()) << ',' << fmt(u["token_accuracy"].get<double>()) << ','
               << fmt(u["loss"].get<double>()) << '\n';
        }
        write_text(out_dir / "fig_unseen_data.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "task,k,exact_match,token_accuracy,baseline_exact_match\n";
        for (const auto& u : report["unseen_task"]) {
            os << u["task"].get<std::string>() << ',' << u["k"].get<long>() << ','
               << fmt(u["exact_match"].get<double>()) << ',' << fmt(u["token_accuracy"].get<double>()) << ','
               << fmt(u["baseline_exact_match"].get<double>()) << '\n';
        }
        write_text(out_dir / "fig_fewshot.csv", os.str());
    }
    return report;
}

std::vector<std::string> validate_report(const nlohmann::json& r) {
    std::vector<std::string> errors;
    auto need = [&](const nlohmann::json& obj, const std::string& where, const std::string& key, auto check,
                    const char* type) {
        if (!obj.is_object() || !obj.contains(key)) {
            errors.push_back(where + ": missing '" + key + "'");
        } else if (!check(obj.at(key))) {
            errors.push_back(where + ": '" + key + "' must be " + type);
        }
    };
    auto is_string = [](const nlohmann::json& j) { return j.is_string(); };
    auto is_number = [](const nlohmann::json& j) { return j.is_number(); };
    auto is_count = [](const nlohmann::json& j) { return j.is_number_integer() && j.get<long>() >= 0; };
    auto is_unit = [](const nlohmann::json& j) { return j.is_number() && j.get<double>() >= 0.0 && j.get<double>() <= 1.0; };
    auto is_array = [](const nlohmann::json& j) { return j.is_array(); };

    if (!r.is_object()) return {"report: not an object"};
    need(r, "report", "schema_version",
         [](const nlohmann::json& j) { return j.is_number_integer() && j.get<int>() == kReportSchemaVersion; },
         "the current schema version");
    need(r, "report", "unseen_data", is_array, "an array");
    need(r, "report", "unseen_task", is_array, "an array");
    need(r, "report", "gate_trajectory", is_array, "an array");
    if (!errors.empty()) return errors;
    for (std::size_t i = 0; i < r["unseen_data"].size(); ++i) {
        const auto& e = r["unseen_data"][i];
        const std::string w = "unseen_data[" + std::to_string(i) + "]";
        need(e, w, "task", is_string, "a string");
        need(e, w, "method", is_string, "a string");
        need(e, w, "runs", is_count, "a count");
        need(e, w, "exact_match", is_unit, "in [0, 1]");
        need(e, w, "token_accuracy", is_unit, "in [0, 1]");
        need(e, w, "loss", is_number, "a number");
    }
    for (std::size_t i = 0; i < r["unseen_task"].size(); ++i) {
        const auto& e = r["unseen_task"][i];
        const std::string w = "unseen_task[" + std::to_string(i) + "]";
        need(e, w, "task", is_string, "a string");
        need(e, w, "k", is_count, "a count");
        need(e, w, "runs", is_count, "a count");
        need(e, w, "exact_match", is_unit, "in [0, 1]");
        need(e, w, "token_accuracy", is_unit, "in [0, 1]");
        need(e, w, "baseline_exact_match", is_unit, "in [0, 1]");
    }
    for (std::size_t i = 0; i < r["gate_trajectory"].size(); ++i) {
        const auto& e = r["gate_trajectory"][i];
        const std::string w = "gate_trajectory[" + std::to_string(i) + "]";
        need(e, w, "step", is_count, "a count");
        need(e, w, "mean_abs_tanh_gate", is_unit, "in [0, 1]");
        need(e, w, "loss", is_number, "a number");
    }
    return errors;
}

}  // namespace talora
