// SPDX-License-Identifier: Apache-2.0
#include "talora/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "talora/errors.hpp"

namespace talora {

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view salt) {
    std::uint64_t h = fnv1a(salt);
    h ^= seed + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

int positive_mod(int a, int m) { return ((a % m) + m) % m; }

std::vector<int> default_symbols(int vocab_size) {
    std::vector<int> s;
    for (int t = vocab::kFirstSymbol; t < vocab_size; ++t) s.push_back(t);
    return s;
}

std::vector<int> random_input(const TaskSpec& spec, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
    std::uniform_int_distribution<std::size_t> sym_dist(0, spec.symbols.size() - 1);
    std::vector<int> input(static_cast<std::size_t>(len_dist(rng)));
    for (int& t : input) t = spec.symbols[sym_dist(rng)];
    return input;
}

}  // namespace

void TaskSpec::validate() const {
    if (vocab_size <= vocab::kFirstSymbol) throw ArgumentError("task " + name + ": vocabulary too small");
    if (min_len < 1 || max_len < min_len) throw ArgumentError("task " + name + ": invalid length range");
    for (int t : symbols) {
        if (t < 0 || t >= vocab_size) {
            throw ArgumentError("task " + name + ": symbol " + std::to_string(t) + " outside vocabulary");
        }
    }
    std::size_t needed = 1;
    switch (kind) {
        case TaskKind::Copy:
        case TaskKind::TokenShift:
            needed = 1;
            break;
        case TaskKind::Reverse:
        case TaskKind::SortAscending:
        case TaskKind::SortDescending:
        case TaskKind::CountParity:
            needed = 2;
            break;
    }
    if (symbols.size() < needed) {
        throw ArgumentError("task " + name + ": vocabulary subset of " + std::to_string(symbols.size()) +
                            " symbols is too small");
    }
    if (kind == TaskKind::TokenShift && positive_mod(shift, vocab_size) == 0) {
        throw ArgumentError("task " + name + ": shift offset must be nonzero modulo the vocabulary size");
    }
    if (kind == TaskKind::CountParity && std::find(symbols.begin(), symbols.end(), parity_token) == symbols.end()) {
        throw ArgumentError("task " + name + ": parity token is not one of the task symbols");
    }
}

std::vector<int> apply_task(const TaskSpec& spec, std::span<const int> input) {
    std::vector<int> out(input.begin(), input.end());
    switch (spec.kind) {
        case TaskKind::Copy:
            break;
        case TaskKind::Reverse:
            std::reverse(out.begin(), out.end());
            break;
        case TaskKind::SortAscending:
            std::sort(out.begin(), out.end());
            break;
        case TaskKind::SortDescending:
            std::sort(out.begin(), out.end(), std::greater<>());
            break;
        case TaskKind::TokenShift:
            for (int& t : out) t = positive_mod(t + spec.shift, spec.vocab_size);
            break;
        case TaskKind::CountParity: {
            const auto n = std::count(input.begin(), input.end(), spec.parity_token);
            out = {n % 2 == 0 ? vocab::kEven : vocab::kOdd};
            break;
        }
    }
    return out;
}

TaskSpec builtin_task(const std::string& name, int vocab_size) {
    TaskSpec spec;
    spec.name = name;
    spec.vocab_size = vocab_size;
    spec.symbols = default_symbols(vocab_size);
    if (name == "copy") {
        spec.kind = TaskKind::Copy;
    } else if (name == "reverse") {
        spec.kind = TaskKind::Reverse;
    } else if (name == "sort-asc") {
        spec.kind = TaskKind::SortAscending;
    } else if (name == "sort-desc") {
        spec.kind = TaskKind::SortDescending;
    } else if (name == "parity") {
        spec.kind = TaskKind::CountParity;
        spec.symbols = {vocab::kFirstSymbol, vocab::kFirstSymbol + 1, vocab::kFirstSymbol + 2, vocab::kFirstSymbol + 3};
        spec.parity_token = vocab::kFirstSymbol;
    } else if (name.rfind("shift-", 0) == 0) {
        spec.kind = TaskKind::TokenShift;
        try {
            spec.shift = std::stoi(name.substr(6));
        } catch (const std::exception&) {
            throw ArgumentError("unknown task '" + name + "'");
        }
    } else {
        throw ArgumentError("unknown task '" + name + "'");
    }
    spec.validate();
    return spec;
}

std::vector<std::string> default_source_tasks() { return {"copy", "reverse", "sort-asc", "shift-5"}; }
std::vector<std::string> default_target_tasks() { return {"sort-desc", "shift-11", "parity"}; }

TaskDataset generate_task(const TaskSpec& spec, std::uint64_t seed, std::size_t count) {
    spec.validate();
    if (count < 2) throw ArgumentError("generate_task: count must be at least 2");
    std::mt19937_64 rng(mix_seed(seed, spec.name));
    std::set<std::vector<int>> seen;
    std::vector<Sample> samples;
    samples.reserve(count);
    const std::size_t max_attempts = count * 200;
    for (std::size_t attempt = 0; samples.size() < count; ++attempt) {
        if (attempt >= max_attempts) {
            throw ArgumentError("generate_task: task " + spec.name + " cannot produce " + std::to_string(count) +
                                " distinct inputs");
        }
        auto input = random_input(spec, rng);
        if (!seen.insert(input).second) continue;
        auto target = apply_task(spec, input);
        samples.push_back({std::move(input), std::move(target)});
    }
    const std::size_t unseen = std::max<std::size_t>(1, (count + 5) / 10);
    TaskDataset ds;
    ds.task = spec.name;
    ds.train.assign(samples.begin(), samples.end() - static_cast<std::ptrdiff_t>(unseen));
    ds.unseen.assign(samples.end() - static_cast<std::ptrdiff_t>(unseen), samples.end());
    ds.provenance = "synthetic:seed=" + std::to_string(seed);
    ds.spec = spec;
    return ds;
}

Sample augment_sample(const TaskSpec& spec, const Sample& sample, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> input = sample.input;
    std::uniform_int_distribution<std::size_t> sym_dist(0, spec.symbols.size() - 1);
    std::vector<int> ops = {0};
    if (static_cast<int>(input.size()) < spec.max_len) ops.push_back(1);
    if (static_cast<int>(input.size()) > spec.min_len) ops.push_back(2);
    const int op = ops[std::uniform_int_distribution<std::size_t>(0, ops.size() - 1)(rng)];
    if (op == 0) {
        const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, input.size() - 1)(rng);
        input[pos] = spec.symbols[sym_dist(rng)];
    } else if (op == 1) {
        const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, input.size())(rng);
        input.insert(input.begin() + static_cast<std::ptrdiff_t>(pos), spec.symbols[sym_dist(rng)]);
    } else {
        const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, input.size() - 1)(rng);
        input.erase(input.begin() + static_cast<std::ptrdiff_t>(pos));
    }
    Sample out;
    out.target = apply_task(spec, input);
    out.input = std::move(input);
    return out;
}

std::vector<TaskDataset> balance(std::vector<TaskDataset> datasets, std::size_t target_size, std::uint64_t seed) {
    if (target_size < 1) throw ArgumentError("balance: target size must be at least 1");
    for (TaskDataset& ds : datasets) {
        std::mt19937_64 rng(mix_seed(seed, ds.task));
        auto& train = ds.train;
        if (train.size() > target_size) {
            std::vector<std::size_t> idx(train.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(target_size);
            std::sort(idx.begin(), idx.end());
            std::vector<Sample> kept;
            kept.reserve(target_size);
            for (std::size_t i : idx) kept.push_back(train[i]);
            train = std::move(kept);
        } else if (train.size() < target_size) {
            if (train.empty()) throw ArgumentError("balance: dataset " + ds.task + " has no training samples");
            std::set<std::vector<int>> held_out;
            for (const Sample& s : ds.unseen) held_out.insert(s.input);
            const std::size_t original = train.size();
            std::uniform_int_distribution<std::size_t> pick(0, original - 1);
            while (train.size() < target_size) {
                const Sample& base = train[pick(rng)];
                if (!ds.spec) {
                    train.push_back(base);
                    continue;
                }
                Sample aug = augment_sample(*ds.spec, base, rng());
                // Keep splits disjoint.
                if (held_out.count(aug.input)) continue;
                train.push_back(std::move(aug));
            }
        }
    }
    return datasets;
}

double task_disagreement(const TaskSpec& a, const TaskSpec& b, std::size_t trials, std::uint64_t seed) {
    if (trials == 0) throw ArgumentError("task_disagreement: trials must be positive");
    std::mt19937_64 rng(seed);
    TaskSpec domain = a;
    std::size_t differ = 0;
    for (std::size_t i = 0; i < trials; ++i) {
        const auto input = random_input(domain, rng);
        if (apply_task(a, input) != apply_task(b, input)) ++differ;
    }
    return static_cast<double>(differ) / static_cast<double>(trials);
}

TaskDataset load_jsonl(const std::filesystem::path& path, const std::filesystem::path& vocab_file) {
    std::ifstream vin(vocab_file);
    if (!vin) throw MissingFileError("cannot open vocabulary file " + vocab_file.string());
    std::unordered_map<std::string, int> ids;
    std::string line;
    int next = 0;
    while (std::getline(vin, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        ids.emplace(line, next++);
    }
    const auto unk_it = ids.find("<unk>");
    const int unk = unk_it != ids.end() ? unk_it->second : vocab::kUnk;

    std::ifstream in(path);
    if (!in) throw MissingFileError("cannot open dataset file " + path.string());
    auto tokenize = [&](const std::string& text) {
        std::vector<int> out;
        std::istringstream ss(text);
        std::string tok;
        while (ss >> tok) {
            const auto it = ids.find(tok);
            out.push_back(it != ids.end() ? it->second : unk);
        }
        return out;
    };

    TaskDataset ds;
    ds.task = path.stem().string();
    ds.provenance = "file:" + path.string();
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!obj.is_object() || !obj.contains("input") || !obj.contains("target") || !obj["input"].is_string() ||
            !obj["target"].is_string()) {
            throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                             ": expected an object with string fields \"input\" and \"target\"");
        }
        ds.train.push_back({tokenize(obj["input"].get<std::string>()), tokenize(obj["target"].get<std::string>())});
    }
    return ds;
}

EncodedSample encode_sample(const Sample& sample, std::optional<int> lead_token) {
    if (sample.input.empty() || sample.target.empty()) throw ArgumentError("encode_sample: empty input or target");
    EncodedSample enc;
    if (lead_token) enc.tokens.push_back(*lead_token);
    enc.tokens.insert(enc.tokens.end(), sample.input.begin(), sample.input.end());
    enc.tokens.push_back(vocab::kSep);
    enc.tokens.insert(enc.tokens.end(), sample.target.begin(), sample.target.end() - 1);
    enc.labels.assign(enc.tokens.size(), -1);
    const std::size_t sep = enc.tokens.size() - sample.target.size();
    for (std::size_t j = 0; j < sample.target.size(); ++j) enc.labels[sep + j] = sample.target[j];
    return enc;
}

}  // namespace talora
