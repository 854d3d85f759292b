#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dynasty/model.hpp"
#include "dynasty/random.hpp"
#include "dynasty/tensor.hpp"
#include "json.hpp"

namespace dynasty {

// One example in the per-sample layout used on disk and by the recipes.
struct DynamicGraphSample {
  NdArray x_hist;  // [N, D, L]
  NdArray a_hist;  // [N, N, L]
  NdArray y;       // [N, D, H]
  std::string sample_id;
};

// How samples relate in time; decides the split policy.
enum class SampleLayout {
  independent,    // unrelated samples (synthetic generators)
  single_stream,  // overlapping windows over one system's history
  multi_stream,   // overlapping windows, one stream per subject
};

std::string layout_name(SampleLayout layout);
SampleLayout parse_layout(const std::string& name);

struct NormStats {
  std::vector<double> mean;  // per feature dimension
  std::vector<double> std;
  std::vector<bool> degenerate;  // std was 0 and forced to 1

  bool any_degenerate() const;
  bool operator==(const NormStats&) const = default;
};

void to_json(nlohmann::json& j, const NormStats& s);
void from_json(const nlohmann::json& j, NormStats& s);

struct Dataset {
  std::size_t num_nodes = 0;     // N
  std::size_t feature_dim = 0;   // D
  std::size_t history_len = 0;   // L
  std::size_t horizon = 0;       // H
  std::vector<DynamicGraphSample> samples;
  nlohmann::json provenance = nlohmann::json::object();
  SampleLayout layout = SampleLayout::independent;
  std::optional<NormStats> norm;  // set once the features are z-scored
  std::vector<std::string> warnings;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  // Checks shapes and finiteness of every sample; throws DataError.
  void validate() const;
};

// ---- synthetic diffusion ----------------------------------------------------

struct DiffusionConfig {
  std::size_t num_nodes = 10;
  std::size_t feature_dim = 1;
  std::size_t history_len = 12;
  std::size_t horizon = 8;
  std::size_t num_samples = 8;
  double graph_switch_prob = 0.2;  // chance per step of drawing a fresh graph
  double noise_std = 0.1;
  double coupling = 0.5;    // beta
  double avg_degree = 2.0;  // expected neighbours per node
  std::size_t burn_in = 0;  // steps simulated and discarded before the window
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DiffusionConfig& c);
void from_json(const nlohmann::json& j, DiffusionConfig& c);

// x: [N, D], adj: [N, N]. Returns (1 - beta) x + beta rownorm(adj) x. A row
// without neighbours keeps the node's own value.
NdArray diffusion_step(const NdArray& x, const NdArray& adj, double beta);

Dataset generate_diffusion_dataset(const DiffusionConfig& config);

// ---- temporal edge lists ----------------------------------------------------

struct TemporalEdgeRecord {
  std::int64_t source = 0;
  std::int64_t target = 0;
  double rating = 0.0;
  std::int64_t timestamp = 0;
};

// CSV with header source,target,rating,timestamp. Throws DataError naming the
// offending line.
std::vector<TemporalEdgeRecord> parse_edge_csv(const std::string& text);
std::vector<TemporalEdgeRecord> read_edge_csv(const std::filesystem::path& path);

// Sorted distinct node ids; position = contiguous index.
std::vector<std::int64_t> node_index(const std::vector<TemporalEdgeRecord>& records);

struct EdgeIntervals {
  std::vector<std::int64_t> node_ids;
  std::vector<NdArray> adjacency;  // per interval [N, N], mean rating i -> j
  std::vector<NdArray> features;   // per interval [N, 2], [avg given, avg received]
};

EdgeIntervals bucket_edge_list(const std::vector<TemporalEdgeRecord>& records, std::int64_t interval_seconds);

Dataset ingest_edge_list(const std::vector<TemporalEdgeRecord>& records, std::int64_t interval_seconds,
                         std::size_t history_len, std::size_t horizon);

// ---- correlation graphs -----------------------------------------------------

// series: [N, w] -> [N, N] Pearson correlations; zero-variance rows give 0
// off the diagonal (the diagonal is 1 for every node).
NdArray pearson_matrix(const NdArray& series);

std::size_t correlation_window_count(std::size_t T, std::size_t window, std::size_t stride);

struct CorrelationWindows {
  std::vector<NdArray> adjacency;  // per window [N, N], binary
  std::vector<NdArray> features;   // per window [N, 1], last in-window value
};

CorrelationWindows correlation_windows(const NdArray& series, std::size_t window, std::size_t stride,
                                       double threshold);

// One [N, T] series per subject; each subject is one sample stream.
Dataset window_correlation_graphs(const std::vector<NdArray>& subjects, std::size_t window, std::size_t stride,
                                  double threshold, std::size_t history_len, std::size_t horizon);

// ---- static aggregation and graph variants ---------------------------------

// sequences: each [N, N, T]. Mean of binarized slices, kept where > tau.
NdArray aggregate_static_consensus(const std::vector<NdArray>& sequences, double tau);
// Binary OR of nonzero entries over all slices.
NdArray aggregate_static_union(const std::vector<NdArray>& sequences);
NdArray aggregate_static_union(const std::vector<TemporalEdgeRecord>& records);

std::vector<NdArray> adjacency_sequences(const Dataset& dataset);

// Every sample's A_hist becomes the dataset-wide consensus graph repeated L times.
Dataset make_static_variant(const Dataset& dataset, double tau = 0.5);
// Deranges the assignment of A_hist tensors across samples.
Dataset shuffle_graphs(const Dataset& dataset, Rng& rng);

// ---- splits and normalization -----------------------------------------------

struct DatasetSplit {
  Dataset train, val, test;
};

DatasetSplit split_dataset(const Dataset& dataset, std::array<double, 3> fractions, std::uint64_t seed);

NormStats fit_normalizer(const Dataset& train);
// Feature axis of the array holds the D dimensions.
NdArray normalize(const NormStats& stats, const NdArray& values, std::size_t feature_axis);
NdArray denormalize(const NormStats& stats, const NdArray& values, std::size_t feature_axis);
// Z-scores x_hist and y; adjacency is left untouched. Throws ConfigError if
// the dataset is already normalized.
Dataset apply_normalizer(const NormStats& stats, const Dataset& dataset);

// ---- batching and storage ---------------------------------------------------

struct Batch {
  GraphBatch inputs;  // x [B, N, L, D], adj [B, L, N, N]
  Tensor targets;     // [B, N, H, D]
};

Batch make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices);

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Raw series for window_correlation_graphs: a bundle of [N, T] tensors.
void save_series(const std::vector<NdArray>& subjects, const std::filesystem::path& dir);
std::vector<NdArray> load_series(const std::filesystem::path& dir);

}  // namespace dynasty
