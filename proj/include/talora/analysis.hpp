// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "talora/numerics/tensor.hpp"
#include "talora/talora.hpp"
#include "talora/training.hpp"

namespace talora {

struct Cosine {
    double value = 0.0;
    /// Set when either vector has zero norm; value is then 0.
    bool zero_norm = false;
};

/// Cosine similarity of two tensors flattened row-major.
Cosine cosine_similarity(const num::Tensor& a, const num::Tensor& b);

struct SimilarityTrace {
    int step = 0;
    /// Absolute layer index.
    int layer = 0;
    /// Symmetric task×task matrix with unit diagonal.
    std::vector<std::vector<double>> cosine;
    bool zero_norm = false;

    /// Mean |cosine| over the off-diagonal pairs.
    double mean_abs_pairwise() const;
    /// Mean cosine over the off-diagonal pairs.
    double mean_pairwise() const;
};

/// One trace per (snapshot, lora layer), in snapshot-major order.
std::vector<SimilarityTrace> layer_similarity(std::span<const BankSnapshot> snapshots, int first_layer);

/// Columns step,layer,task_i,task_j,cosine over every unordered task pair.
void write_similarity_csv(const std::filesystem::path& path, std::span<const SimilarityTrace> traces,
                          std::span<const std::string> tasks);

struct EfficiencyRow {
    std::string method;
    std::size_t per_task = 0;
    std::size_t shared = 0;
    /// Trainable parameters for all tasks together.
    std::size_t total = 0;
    /// per_task as a fraction of the backbone size.
    double per_task_ratio = 0.0;
};

/// Rows for full fine-tuning, vanilla prompt tuning and TA-LoRA.
std::vector<EfficiencyRow> efficiency_report(const ParamAccounting& accounting);
void write_efficiency_csv(const std::filesystem::path& path, std::span<const EfficiencyRow> rows);
nlohmann::json efficiency_json(const ParamAccounting& accounting, std::span<const EfficiencyRow> rows);

inline constexpr int kReportSchemaVersion = 1;

/// Files emit_report reads from its input directory.
std::vector<std::string> report_inputs();

/// Consolidates phase2_metrics.csv, unseen_data.csv and fewshot.csv from
/// `in_dir` into report.json and per-figure CSVs in `out_dir`.
/// Throws MissingFileError naming every expected file when one is absent.
nlohmann::json emit_report(const std::filesystem::path& in_dir, const std::filesystem::path& out_dir);

/// Problems found in a report document; empty when it matches the schema.
std::vector<std::string> validate_report(const nlohmann::json& report);

/// Minimal comma-separated reader: header row, then rows of equal width.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace talora
