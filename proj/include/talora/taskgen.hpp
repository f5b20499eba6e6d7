// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace talora {

/// Reserved ids of the synthetic vocabulary. Task symbols start at kFirstSymbol.
namespace vocab {
inline constexpr int kSep = 0;
inline constexpr int kUnk = 1;
inline constexpr int kEven = 2;
inline constexpr int kOdd = 3;
/// Lead token meaning "no task given".
inline constexpr int kNullMarker = 4;
/// Per-task lead tokens used only while pre-training the backbone.
inline constexpr int kFirstMarker = 5;
inline constexpr int kMaxMarkers = 7;
inline constexpr int kFirstSymbol = kFirstMarker + kMaxMarkers;  // 12
}  // namespace vocab

enum class TaskKind { Copy, Reverse, SortAscending, SortDescending, TokenShift, CountParity };

struct TaskSpec {
    std::string name;
    TaskKind kind = TaskKind::Copy;
    /// Offset for TokenShift, applied modulo vocab_size.
    int shift = 0;
    /// Token counted by CountParity.
    int parity_token = 0;
    int min_len = 4;
    int max_len = 12;
    /// Symbols inputs are drawn from.
    std::vector<int> symbols;
    int vocab_size = 32;

    bool single_label() const { return kind == TaskKind::CountParity; }
    void validate() const;
};

/// Exact target of `input` under the task.
std::vector<int> apply_task(const TaskSpec& spec, std::span<const int> input);

struct Sample {
    std::vector<int> input;
    std::vector<int> target;
    bool operator==(const Sample&) const = default;
};

struct TaskDataset {
    std::string task;
    std::vector<Sample> train;
    /// Held-out samples from the training distribution.
    std::vector<Sample> unseen;
    std::string provenance;
    /// Present for synthetic tasks; lets augmentation recompute labels.
    std::optional<TaskSpec> spec;
};

/// Looks up one of the built-in tasks by name: copy, reverse, sort-asc,
/// sort-desc, shift-5, shift-11, parity (and shift-<k> for any k).
TaskSpec builtin_task(const std::string& name, int vocab_size = 32);
std::vector<std::string> default_source_tasks();
std::vector<std::string> default_target_tasks();

/// `count` distinct inputs, 90% train / 10% unseen, deterministic in (spec, seed).
TaskDataset generate_task(const TaskSpec& spec, std::uint64_t seed, std::size_t count);

/// Resizes every train split to exactly `target_size`: up-sampling with
/// label-recomputing augmentation where a TaskSpec is known, uniform
/// down-sampling otherwise.
std::vector<TaskDataset> balance(std::vector<TaskDataset> datasets, std::size_t target_size, std::uint64_t seed);

/// One augmented copy of `sample`: a symbol substitution, insertion or deletion,
/// with the target recomputed from the perturbed input.
Sample augment_sample(const TaskSpec& spec, const Sample& sample, std::uint64_t seed);

/// Fraction of random inputs on which two tasks disagree.
double task_disagreement(const TaskSpec& a, const TaskSpec& b, std::size_t trials, std::uint64_t seed);

/// Whitespace-tokenized JSONL reader ({"input": ..., "target": ...} per line).
/// Tokens missing from the vocabulary map to its "<unk>" entry, or vocab::kUnk
/// when the vocabulary has none. All samples land in the train split.
TaskDataset load_jsonl(const std::filesystem::path& path, const std::filesystem::path& vocab_file);

/// Model-facing encoding of a sample: lead? input SEP target[0..m-2], with the
/// label of each position being the next target token or -1.
struct EncodedSample {
    std::vector<int> tokens;
    std::vector<int> labels;
};
EncodedSample encode_sample(const Sample& sample, std::optional<int> lead_token);

}  // namespace talora
