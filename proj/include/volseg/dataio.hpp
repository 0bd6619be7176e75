#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "volseg/volume.hpp"

namespace volseg {

// ---------------------------------------------------------------------------
// Array files

enum class FileFormat { npy, raw };

/// A decoded array file before conversion to a domain type.
struct ArrayData {
    std::vector<std::size_t> shape;
    std::vector<double> values; // C order
    bool integral = false;
};

/// Reads an NPY (v1.0/v2.0) or raw VSEG file; the format is detected from the magic bytes.
ArrayData read_array(const std::filesystem::path& path);
ArrayData parse_npy(std::span<const std::uint8_t> bytes);
ArrayData parse_raw(std::span<const std::uint8_t> bytes);

/// Images must be rank 2 or 3; anything else raises RankError.
Image read_volume(const std::filesystem::path& path);
LabelMask read_mask(const std::filesystem::path& path, int num_classes);

void write_volume(const Image& image, const std::filesystem::path& path, FileFormat format = FileFormat::npy);
void write_mask(const LabelMask& mask, const std::filesystem::path& path, FileFormat format = FileFormat::npy);

std::vector<std::uint8_t> encode_npy(const Image& image);
std::vector<std::uint8_t> encode_npy(const LabelMask& mask);
std::vector<std::uint8_t> encode_raw(const Image& image);
std::vector<std::uint8_t> encode_raw(const LabelMask& mask);

/// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

FileFormat format_from_extension(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset manifests

enum class Variant { LungTumor2D, Tumor2D, Tumor3D };
enum class BatchTag { bright, dark };
enum class Split { train, test };

Variant parse_variant(std::string_view s);
std::string_view to_string(Variant v);
/// 3 for the lung+tumor variant, 2 for the tumor-only ones.
int class_count(Variant v);
bool is_2d(Variant v);

BatchTag parse_batch_tag(std::string_view s);
std::string_view to_string(BatchTag b);

struct ManifestEntry {
    std::string image_path;
    std::optional<std::string> mask_path;
    BatchTag batch_tag = BatchTag::bright;
    std::string subject_id;
    Split split = Split::train;
};

struct DatasetManifest {
    Variant variant = Variant::Tumor2D;
    std::vector<ManifestEntry> entries;

    [[nodiscard]] std::size_t count(Split s) const;
};

/// Throws ConfigError on duplicate paths or a training entry without a mask.
void validate(const DatasetManifest& manifest);

/// JSON: {"variant": "...", "entries": [{"image_path", "mask_path", "batch_tag", "subject_id", "split"}]}.
/// Relative paths are resolved against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(std::string_view json_text, const std::filesystem::path& base_dir = {});

// ---------------------------------------------------------------------------
// Metric records

enum class EvalUnitKind { slice, stack };
std::string_view to_string(EvalUnitKind u);
EvalUnitKind parse_unit(std::string_view s);

struct MetricRecord {
    std::string subject_id;
    std::string class_name;
    double iou = 0.0;
    double f1 = 0.0;
    EvalUnitKind unit = EvalUnitKind::stack;
    bool postprocessed = false;
    int z_index = -1; // slice units only
};

enum class StdMode { population, sample };
StdMode parse_std_mode(std::string_view s);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

MeanStd mean_std(std::span<const double> values, StdMode mode = StdMode::population);

/// "0.73 ± 0.19"
std::string format_mean_std(MeanStd m, int decimals = 2);

struct SummaryRow {
    std::string class_name;
    EvalUnitKind unit = EvalUnitKind::stack;
    bool postprocessed = false;
    std::size_t count = 0;
    MeanStd iou;
    MeanStd f1;
};

/// One row per (class, unit, postprocessed) group, in first-seen order.
std::vector<SummaryRow> summarize(std::span<const MetricRecord> records, StdMode mode = StdMode::population);

std::string metrics_csv(std::span<const MetricRecord> records);
std::string metrics_summary_json(std::span<const MetricRecord> records, StdMode mode = StdMode::population);

/// Writes the CSV to `csv_path` and the JSON summary next to it (same stem, ".json").
/// Returns the JSON path.
std::filesystem::path write_metrics(std::span<const MetricRecord> records, const std::filesystem::path& csv_path,
                                    StdMode mode = StdMode::population);

} // namespace volseg
