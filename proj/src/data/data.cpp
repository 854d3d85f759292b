#include "dynasty/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "dynasty/bundle.hpp"
#include "dynasty/error.hpp"

namespace dynasty {

std::string layout_name(SampleLayout layout) {
  switch (layout) {
    case SampleLayout::independent: return "independent";
    case SampleLayout::single_stream: return "single_stream";
    case SampleLayout::multi_stream: return "multi_stream";
  }
  return "independent";
}

SampleLayout parse_layout(const std::string& name) {
  if (name == "independent") return SampleLayout::independent;
  if (name == "single_stream") return SampleLayout::single_stream;
  if (name == "multi_stream") return SampleLayout::multi_stream;
  throw DataError("unknown sample layout '" + name + "'");
}

bool NormStats::any_degenerate() const { return std::find(degenerate.begin(), degenerate.end(), true) != degenerate.end(); }

void to_json(nlohmann::json& j, const NormStats& s) {
  j = {{"mean", s.mean}, {"std", s.std}, {"degenerate", s.degenerate}};
}

void from_json(const nlohmann::json& j, NormStats& s) {
  try {
    j.at("mean").get_to(s.mean);
    j.at("std").get_to(s.std);
    s.degenerate = j.contains("degenerate") ? j.at("degenerate").get<std::vector<bool>>()
                                            : std::vector<bool>(s.mean.size(), false);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("normalization stats: ") + e.what());
  }
  if (s.std.size() != s.mean.size() || s.degenerate.size() != s.mean.size()) {
    throw DataError("normalization stats: mean, std and degenerate lengths differ");
  }
}

void Dataset::validate() const {
  const Shape xs{num_nodes, feature_dim, history_len};
  const Shape as{num_nodes, num_nodes, history_len};
  const Shape ys{num_nodes, feature_dim, horizon};
  auto finite = [](const NdArray& a) {
    return std::all_of(a.values.begin(), a.values.end(), [](double v) { return std::isfinite(v); });
  };
  for (const auto& s : samples) {
    if (s.x_hist.shape != xs || s.a_hist.shape != as || s.y.shape != ys) {
      throw DataError("sample '" + s.sample_id + "' has shapes x " + shape_to_string(s.x_hist.shape) + ", a " +
                      shape_to_string(s.a_hist.shape) + ", y " + shape_to_string(s.y.shape) + "; dataset expects " +
                      shape_to_string(xs) + ", " + shape_to_string(as) + ", " + shape_to_string(ys));
    }
    if (!finite(s.x_hist) || !finite(s.a_hist) || !finite(s.y)) {
      throw DataError("sample '" + s.sample_id + "' contains non-finite values");
    }
  }
}

namespace {

std::string padded(std::size_t i, int width = 6) {
  std::string s = std::to_string(i);
  return std::string(s.size() < static_cast<std::size_t>(width) ? width - s.size() : 0, '0') + s;
}

// Stacks per-step [N, C] frames (steps first..first+count) into [N, C, count].
NdArray stack_frames(const std::vector<NdArray>& frames, std::size_t first, std::size_t count) {
  const std::size_t N = frames[first].shape[0], C = frames[first].shape[1];
  NdArray out(Shape{N, C, count});
  for (std::size_t t = 0; t < count; ++t) {
    const NdArray& f = frames[first + t];
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < C; ++c) out.values[(i * C + c) * count + t] = f.values[i * C + c];
  }
  return out;
}

NdArray random_graph(Rng& rng, std::size_t N, double edge_prob) {
  NdArray a(Shape{N, N});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) {
      if (bernoulli(rng, edge_prob)) a.values[i * N + j] = a.values[j * N + i] = 1.0;
    }
  return a;
}

// Windows of length L + H with stride 1 over per-step frames.
void emit_windows(Dataset& ds, const std::vector<NdArray>& features, const std::vector<NdArray>& adjacency,
                  const std::string& prefix) {
  const std::size_t L = ds.history_len, H = ds.horizon;
  for (std::size_t s = 0; s + L + H <= features.size(); ++s) {
    DynamicGraphSample sample;
    sample.x_hist = stack_frames(features, s, L);
    sample.a_hist = stack_frames(adjacency, s, L);
    sample.y = stack_frames(features, s + L, H);
    sample.sample_id = prefix + padded(s);
    ds.samples.push_back(std::move(sample));
  }
}

}  // namespace

// ---- synthetic diffusion ----------------------------------------------------

void to_json(nlohmann::json& j, const DiffusionConfig& c) {
  j = {{"num_nodes", c.num_nodes},
       {"feature_dim", c.feature_dim},
       {"history_len", c.history_len},
       {"horizon", c.horizon},
       {"num_samples", c.num_samples},
       {"graph_switch_prob", c.graph_switch_prob},
       {"noise_std", c.noise_std},
       {"coupling", c.coupling},
       {"avg_degree", c.avg_degree},
       {"burn_in", c.burn_in},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DiffusionConfig& c) {
  if (!j.is_object()) throw ConfigError("diffusion config must be a JSON object");
  nlohmann::json defaults = c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) throw ConfigError("unknown diffusion config key '" + it.key() + "'");
  }
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    read("num_nodes", c.num_nodes);
    read("feature_dim", c.feature_dim);
    read("history_len", c.history_len);
    read("horizon", c.horizon);
    read("num_samples", c.num_samples);
    read("graph_switch_prob", c.graph_switch_prob);
    read("noise_std", c.noise_std);
    read("coupling", c.coupling);
    read("avg_degree", c.avg_degree);
    read("burn_in", c.burn_in);
    read("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("diffusion config: ") + e.what());
  }
}

NdArray diffusion_step(const NdArray& x, const NdArray& adj, double beta) {
  const std::size_t N = x.shape.at(0), D = x.shape.at(1);
  if (adj.shape != Shape{N, N}) {
    throw DimensionError("diffusion_step: adjacency " + shape_to_string(adj.shape) + " does not match " +
                         std::to_string(N) + " nodes");
  }
  NdArray next(Shape{N, D});
  for (std::size_t i = 0; i < N; ++i) {
    double degree = 0.0;
    for (std::size_t j = 0; j < N; ++j) degree += adj.values[i * N + j];
    for (std::size_t d = 0; d < D; ++d) {
      double mixed = x.values[i * D + d];
      if (degree != 0.0) {
        mixed = 0.0;
        for (std::size_t j = 0; j < N; ++j) mixed += adj.values[i * N + j] / degree * x.values[j * D + d];
      }
      next.values[i * D + d] = (1.0 - beta) * x.values[i * D + d] + beta * mixed;
    }
  }
  return next;
}

Dataset generate_diffusion_dataset(const DiffusionConfig& c) {
  if (c.num_nodes == 0 || c.feature_dim == 0 || c.history_len == 0 || c.horizon == 0 || c.num_samples == 0) {
    throw ConfigError("diffusion generator: all sizes must be positive");
  }
  const double max_degree = static_cast<double>(c.num_nodes - 1);
  if (!(c.avg_degree >= 0.0) || c.avg_degree > max_degree) {
    throw ConfigError("diffusion generator: average degree " + std::to_string(c.avg_degree) +
                      " is impossible with " + std::to_string(c.num_nodes) + " nodes (maximum " +
                      std::to_string(max_degree) + ")");
  }
  if (!(c.graph_switch_prob >= 0.0 && c.graph_switch_prob <= 1.0)) {
    throw ConfigError("diffusion generator: graph_switch_prob must lie in [0, 1]");
  }
  if (!(c.noise_std >= 0.0) || !(c.coupling >= 0.0 && c.coupling <= 1.0)) {
    throw ConfigError("diffusion generator: noise_std must be >= 0 and coupling in [0, 1]");
  }
  const std::size_t N = c.num_nodes, D = c.feature_dim, L = c.history_len, H = c.horizon;
  const double edge_prob = max_degree > 0 ? c.avg_degree / max_degree : 0.0;

  Dataset ds;
  ds.num_nodes = N;
  ds.feature_dim = D;
  ds.history_len = L;
  ds.horizon = H;
  ds.layout = SampleLayout::independent;
  ds.provenance = {{"generator", "diffusion"}, {"config", c}};
  for (std::size_t s = 0; s < c.num_samples; ++s) {
    Rng rng = derive_rng(c.seed, s);
    NdArray x(Shape{N, D});
    for (double& v : x.values) v = standard_normal(rng);
    NdArray a = random_graph(rng, N, edge_prob);
    auto advance = [&] {
      x = diffusion_step(x, a, c.coupling);
      if (c.noise_std > 0.0) {
        for (double& v : x.values) v += c.noise_std * standard_normal(rng);
      }
      if (c.graph_switch_prob > 0.0 && bernoulli(rng, c.graph_switch_prob)) a = random_graph(rng, N, edge_prob);
    };
    for (std::size_t t = 0; t < c.burn_in; ++t) advance();
    std::vector<NdArray> frames, graphs;
    for (std::size_t t = 0; t < L + H; ++t) {
      frames.push_back(x);
      graphs.push_back(a);
      if (t + 1 < L + H) advance();
    }
    DynamicGraphSample sample;
    sample.x_hist = stack_frames(frames, 0, L);
    sample.a_hist = stack_frames(graphs, 0, L);
    sample.y = stack_frames(frames, L, H);
    sample.sample_id = "diffusion-" + padded(s);
    ds.samples.push_back(std::move(sample));
  }
  ds.validate();
  return ds;
}

// ---- temporal edge lists ----------------------------------------------------

std::vector<TemporalEdgeRecord> parse_edge_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<TemporalEdgeRecord> records;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (!header) {
      if (cells != std::vector<std::string>{"source", "target", "rating", "timestamp"}) {
        throw DataError("edge list line " + std::to_string(line_no) +
                        ": expected header source,target,rating,timestamp, got '" + line + "'");
      }
      header = true;
      continue;
    }
    if (cells.size() != 4) {
      throw DataError("edge list line " + std::to_string(line_no) + ": expected 4 fields, got " +
                      std::to_string(cells.size()));
    }
    TemporalEdgeRecord r;
    try {
      std::size_t used = 0;
      r.source = std::stoll(cells[0], &used);
      if (used != cells[0].size()) throw std::invalid_argument("source");
      r.target = std::stoll(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument("target");
      r.rating = std::stod(cells[2], &used);
      if (used != cells[2].size()) throw std::invalid_argument("rating");
      // Timestamps may be written as floats (e.g. 1289241911.72836).
      const double ts = std::stod(cells[3], &used);
      if (used != cells[3].size()) throw std::invalid_argument("timestamp");
      r.timestamp = static_cast<std::int64_t>(std::floor(ts));
    } catch (const std::exception&) {
      throw DataError("edge list line " + std::to_string(line_no) + ": cannot parse '" + line + "'");
    }
    if (r.timestamp < 0) throw DataError("edge list line " + std::to_string(line_no) + ": negative timestamp");
    if (!std::isfinite(r.rating)) throw DataError("edge list line " + std::to_string(line_no) + ": non-finite rating");
    records.push_back(r);
  }
  if (!header) throw DataError("edge list is empty (no header)");
  return records;
}

std::vector<TemporalEdgeRecord> read_edge_csv(const std::filesystem::path& path) {
  return parse_edge_csv(read_text_file(path));
}

std::vector<std::int64_t> node_index(const std::vector<TemporalEdgeRecord>& records) {
  std::vector<std::int64_t> ids;
  for (const auto& r : records) {
    ids.push_back(r.source);
    ids.push_back(r.target);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

EdgeIntervals bucket_edge_list(const std::vector<TemporalEdgeRecord>& records, std::int64_t interval_seconds) {
  if (records.empty()) throw ConfigError("edge list ingest: no records");
  if (interval_seconds <= 0) throw ConfigError("edge list ingest: interval_seconds must be positive");
  EdgeIntervals out;
  out.node_ids = node_index(records);
  const std::size_t N = out.node_ids.size();
  auto index_of = [&](std::int64_t id) {
    return static_cast<std::size_t>(std::lower_bound(out.node_ids.begin(), out.node_ids.end(), id) -
                                    out.node_ids.begin());
  };
  std::int64_t t0 = records[0].timestamp, t1 = records[0].timestamp;
  for (const auto& r : records) {
    if (r.timestamp < 0) throw DataError("edge list ingest: negative timestamp");
    t0 = std::min(t0, r.timestamp);
    t1 = std::max(t1, r.timestamp);
  }
  const auto K = static_cast<std::size_t>((t1 - t0) / interval_seconds + 1);

  std::vector<NdArray> rating_sum(K, NdArray(Shape{N, N})), rating_count(K, NdArray(Shape{N, N}));
  std::vector<NdArray> given(K, NdArray(Shape{N, 2})), seen(K, NdArray(Shape{N, 2}));
  for (const auto& r : records) {
    if (r.source == r.target) continue;  // self-ratings carry no edge
    const auto k = static_cast<std::size_t>((r.timestamp - t0) / interval_seconds);
    const std::size_t i = index_of(r.source), j = index_of(r.target);
    rating_sum[k].values[i * N + j] += r.rating;
    rating_count[k].values[i * N + j] += 1.0;
    given[k].values[i * 2 + 0] += r.rating;
    seen[k].values[i * 2 + 0] += 1.0;
    given[k].values[j * 2 + 1] += r.rating;
    seen[k].values[j * 2 + 1] += 1.0;
  }
  for (std::size_t k = 0; k < K; ++k) {
    NdArray a(Shape{N, N}), f(Shape{N, 2});
    for (std::size_t e = 0; e < N * N; ++e) {
      if (rating_count[k].values[e] > 0) a.values[e] = rating_sum[k].values[e] / rating_count[k].values[e];
    }
    for (std::size_t e = 0; e < N * 2; ++e) {
      if (seen[k].values[e] > 0) f.values[e] = given[k].values[e] / seen[k].values[e];
    }
    out.adjacency.push_back(std::move(a));
    out.features.push_back(std::move(f));
  }
  return out;
}

Dataset ingest_edge_list(const std::vector<TemporalEdgeRecord>& records, std::int64_t interval_seconds,
                         std::size_t history_len, std::size_t horizon) {
  if (history_len == 0 || horizon == 0) throw ConfigError("edge list ingest: L and H must be positive");
  EdgeIntervals iv = bucket_edge_list(records, interval_seconds);
  const std::size_t K = iv.features.size();
  if (K < history_len + horizon) {
    throw DataError("edge list ingest: " + std::to_string(K) + " intervals available, a sample needs L + H = " +
                    std::to_string(history_len + horizon));
  }
  Dataset ds;
  ds.num_nodes = iv.node_ids.size();
  ds.feature_dim = 2;
  ds.history_len = history_len;
  ds.horizon = horizon;
  ds.layout = SampleLayout::single_stream;
  ds.provenance = {{"generator", "edge_list"},
                   {"interval_seconds", interval_seconds},
                   {"intervals", K},
                   {"records", records.size()},
                   {"node_ids", iv.node_ids}};
  emit_windows(ds, iv.features, iv.adjacency, "interval-");
  ds.validate();
  return ds;
}

// ---- correlation graphs -----------------------------------------------------

NdArray pearson_matrix(const NdArray& series) {
  if (series.shape.size() != 2) throw DimensionError("pearson_matrix: expected [N, w], got " + shape_to_string(series.shape));
  const std::size_t N = series.shape[0], w = series.shape[1];
  std::vector<double> centered(series.values), norm(N, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    double mean = 0.0;
    for (std::size_t t = 0; t < w; ++t) mean += series.values[i * w + t];
    mean /= static_cast<double>(w);
    for (std::size_t t = 0; t < w; ++t) {
      centered[i * w + t] -= mean;
      norm[i] += centered[i * w + t] * centered[i * w + t];
    }
    norm[i] = std::sqrt(norm[i]);
  }
  NdArray corr(Shape{N, N});
  for (std::size_t i = 0; i < N; ++i) {
    corr.values[i * N + i] = 1.0;
    for (std::size_t j = i + 1; j < N; ++j) {
      double r = 0.0;
      if (norm[i] > 0.0 && norm[j] > 0.0) {
        double dot = 0.0;
        for (std::size_t t = 0; t < w; ++t) dot += centered[i * w + t] * centered[j * w + t];
        r = std::clamp(dot / (norm[i] * norm[j]), -1.0, 1.0);
      }
      corr.values[i * N + j] = corr.values[j * N + i] = r;
    }
  }
  return corr;
}

std::size_t correlation_window_count(std::size_t T, std::size_t window, std::size_t stride) {
  if (window < 2) throw ConfigError("correlation window must hold at least 2 points, got " + std::to_string(window));
  if (stride == 0) throw ConfigError("correlation window stride must be positive");
  if (T < window) {
    throw DataError("series of length " + std::to_string(T) + " is shorter than the window " + std::to_string(window));
  }
  return (T - window) / stride + 1;
}

CorrelationWindows correlation_windows(const NdArray& series, std::size_t window, std::size_t stride,
                                       double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("correlation threshold must lie in [0, 1]");
  if (series.shape.size() != 2) throw DimensionError("series must be [N, T], got " + shape_to_string(series.shape));
  const std::size_t N = series.shape[0], T = series.shape[1];
  const std::size_t count = correlation_window_count(T, window, stride);
  CorrelationWindows out;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t start = k * stride;
    NdArray slice(Shape{N, window});
    NdArray last(Shape{N, 1});
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t t = 0; t < window; ++t) slice.values[i * window + t] = series.values[i * T + start + t];
      last.values[i] = series.values[i * T + start + window - 1];
    }
    NdArray a = pearson_matrix(slice);
    for (double& v : a.values) v = std::fabs(v) > threshold ? 1.0 : 0.0;
    out.adjacency.push_back(std::move(a));
    out.features.push_back(std::move(last));
  }
  return out;
}

Dataset window_correlation_graphs(const std::vector<NdArray>& subjects, std::size_t window, std::size_t stride,
                                  double threshold, std::size_t history_len, std::size_t horizon) {
  if (subjects.empty()) throw ConfigError("window_correlation_graphs: no subjects");
  if (history_len == 0 || horizon == 0) throw ConfigError("window_correlation_graphs: L and H must be positive");
  Dataset ds;
  ds.num_nodes = subjects[0].shape.at(0);
  ds.feature_dim = 1;
  ds.history_len = history_len;
  ds.horizon = horizon;
  ds.layout = SampleLayout::multi_stream;
  ds.provenance = {{"generator", "window_correlation"}, {"window", window},     {"stride", stride},
                   {"threshold", threshold},            {"subjects", subjects.size()}};
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    if (subjects[s].shape.size() != 2 || subjects[s].shape[0] != ds.num_nodes) {
      throw DimensionError("subject " + std::to_string(s) + " series has shape " + shape_to_string(subjects[s].shape) +
                           ", expected [" + std::to_string(ds.num_nodes) + ", T]");
    }
    CorrelationWindows cw = correlation_windows(subjects[s], window, stride, threshold);
    if (cw.features.size() < history_len + horizon) {
      throw DataError("subject " + std::to_string(s) + " yields " + std::to_string(cw.features.size()) +
                      " windows, a sample needs L + H = " + std::to_string(history_len + horizon));
    }
    emit_windows(ds, cw.features, cw.adjacency, "subject-" + padded(s, 4) + "-window-");
  }
  ds.validate();
  return ds;
}

// ---- static aggregation and graph variants ---------------------------------

NdArray aggregate_static_consensus(const std::vector<NdArray>& sequences, double tau) {
  if (sequences.empty()) throw ConfigError("consensus aggregation: no adjacency sequences");
  const std::size_t N = sequences[0].shape.at(0);
  NdArray mean(Shape{N, N});
  std::size_t slices = 0;
  for (const auto& seq : sequences) {
    if (seq.shape.size() != 3 || seq.shape[0] != N || seq.shape[1] != N) {
      throw DimensionError("consensus aggregation: sequence shape " + shape_to_string(seq.shape) + ", expected [" +
                           std::to_string(N) + "," + std::to_string(N) + ",T]");
    }
    const std::size_t T = seq.shape[2];
    slices += T;
    for (std::size_t e = 0; e < N * N; ++e)
      for (std::size_t t = 0; t < T; ++t) mean.values[e] += seq.values[e * T + t] != 0.0 ? 1.0 : 0.0;
  }
  if (slices == 0) throw ConfigError("consensus aggregation: no slices");
  NdArray out(Shape{N, N});
  for (std::size_t e = 0; e < N * N; ++e) out.values[e] = mean.values[e] / static_cast<double>(slices) > tau ? 1.0 : 0.0;
  return out;
}

NdArray aggregate_static_union(const std::vector<NdArray>& sequences) {
  if (sequences.empty()) throw ConfigError("union aggregation: no adjacency sequences");
  const std::size_t N = sequences[0].shape.at(0);
  NdArray out(Shape{N, N});
  for (const auto& seq : sequences) {
    if (seq.shape.size() != 3 || seq.shape[0] != N || seq.shape[1] != N) {
      throw DimensionError("union aggregation: sequence shape " + shape_to_string(seq.shape));
    }
    const std::size_t T = seq.shape[2];
    for (std::size_t e = 0; e < N * N; ++e)
      for (std::size_t t = 0; t < T; ++t)
        if (seq.values[e * T + t] != 0.0) out.values[e] = 1.0;
  }
  return out;
}

NdArray aggregate_static_union(const std::vector<TemporalEdgeRecord>& records) {
  if (records.empty()) throw ConfigError("union aggregation: no records");
  const auto ids = node_index(records);
  const std::size_t N = ids.size();
  auto index_of = [&](std::int64_t id) {
    return static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };
  NdArray out(Shape{N, N});
  for (const auto& r : records) {
    if (r.source == r.target) continue;
    out.values[index_of(r.source) * N + index_of(r.target)] = 1.0;
  }
  return out;
}

std::vector<NdArray> adjacency_sequences(const Dataset& dataset) {
  std::vector<NdArray> out;
  for (const auto& s : dataset.samples) out.push_back(s.a_hist);
  return out;
}

Dataset make_static_variant(const Dataset& dataset, double tau) {
  if (dataset.empty()) throw ConfigError("static variant of an empty dataset");
  const NdArray consensus = aggregate_static_consensus(adjacency_sequences(dataset), tau);
  const std::size_t N = dataset.num_nodes, L = dataset.history_len;
  NdArray repeated(Shape{N, N, L});
  for (std::size_t e = 0; e < N * N; ++e)
    for (std::size_t t = 0; t < L; ++t) repeated.values[e * L + t] = consensus.values[e];
  Dataset out = dataset;
  for (auto& s : out.samples) s.a_hist = repeated;
  const double edges = std::accumulate(consensus.values.begin(), consensus.values.end(), 0.0);
  out.provenance["graph_variant"] = {{"kind", "static_consensus"}, {"tau", tau}, {"edges", edges}};
  if (edges == 0.0) out.warnings.push_back("consensus graph is empty at tau " + std::to_string(tau));
  return out;
}

Dataset shuffle_graphs(const Dataset& dataset, Rng& rng) {
  if (dataset.empty()) throw ConfigError("shuffle_graphs on an empty dataset");
  const std::size_t n = dataset.size();
  std::vector<std::size_t> source(n);
  std::iota(source.begin(), source.end(), std::size_t{0});
  Dataset out = dataset;
  if (n == 1) {
    out.warnings.push_back("shuffle_graphs: a single sample cannot be deranged; graphs left in place");
  } else {
    // Sattolo's algorithm: a uniformly random cyclic permutation, hence a derangement.
    for (std::size_t i = n - 1; i > 0; --i) std::swap(source[i], source[uniform_index(rng, i)]);
  }
  for (std::size_t k = 0; k < n; ++k) out.samples[k].a_hist = dataset.samples[source[k]].a_hist;
  out.provenance["graph_variant"] = {{"kind", "shuffled"}, {"source_index", source}};
  return out;
}

// ---- splits and normalization -----------------------------------------------

DatasetSplit split_dataset(const Dataset& dataset, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0, 1]");
    total += f;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("split fractions sum to " + std::to_string(total) + ", not 1");
  const std::size_t n = dataset.size();
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
  const std::size_t n_test = n >= n_train + n_val ? n - n_train - n_val : 0;
  const char* names[3] = {"train", "validation", "test"};
  const std::size_t sizes[3] = {n_train, n_val, n_test};
  for (int k = 0; k < 3; ++k) {
    if (sizes[k] == 0) {
      throw ConfigError(std::string("split leaves the ") + names[k] + " set empty (" + std::to_string(n) +
                        " samples, fractions " + std::to_string(fractions[0]) + "/" + std::to_string(fractions[1]) +
                        "/" + std::to_string(fractions[2]) + ")");
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const bool chronological = dataset.layout == SampleLayout::single_stream;
  if (!chronological) {
    Rng rng(seed);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  }
  DatasetSplit split;
  Dataset* parts[3] = {&split.train, &split.val, &split.test};
  std::size_t cursor = 0;
  for (int k = 0; k < 3; ++k) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor + sizes[k]));
    cursor += sizes[k];
    std::sort(idx.begin(), idx.end());
    Dataset& part = *parts[k];
    part = dataset;
    part.samples.clear();
    for (std::size_t i : idx) part.samples.push_back(dataset.samples[i]);
    part.provenance["split"] = {{"policy", chronological ? "chronological" : "random"},
                                {"part", names[k]},
                                {"fractions", fractions},
                                {"seed", seed},
                                {"source_index", idx}};
  }
  return split;
}

NormStats fit_normalizer(const Dataset& train) {
  if (train.empty()) throw ConfigError("fit_normalizer on an empty training split");
  const std::size_t D = train.feature_dim;
  std::vector<std::vector<double>> per_dim(D);
  for (const auto& s : train.samples) {
    for (const NdArray* a : {&s.x_hist, &s.y}) {
      const std::size_t N = a->shape[0], T = a->shape[2];
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t d = 0; d < D; ++d)
          for (std::size_t t = 0; t < T; ++t) per_dim[d].push_back(a->values[(i * D + d) * T + t]);
    }
  }
  NormStats stats;
  for (std::size_t d = 0; d < D; ++d) {
    const auto& v = per_dim[d];
    const bool constant = std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    const double sd = std::sqrt(var);
    const bool degenerate = constant || sd <= 1e-12 * std::max(1.0, std::fabs(mean));
    stats.mean.push_back(constant ? v[0] : mean);
    stats.std.push_back(degenerate ? 1.0 : sd);
    stats.degenerate.push_back(degenerate);
  }
  return stats;
}

namespace {

NdArray transform(const NormStats& stats, const NdArray& values, std::size_t feature_axis, bool forward) {
  if (feature_axis >= values.shape.size() || values.shape[feature_axis] != stats.mean.size()) {
    throw DimensionError("normalization: array " + shape_to_string(values.shape) + " has no feature axis " +
                         std::to_string(feature_axis) + " of size " + std::to_string(stats.mean.size()));
  }
  std::size_t inner = 1;
  for (std::size_t i = feature_axis + 1; i < values.shape.size(); ++i) inner *= values.shape[i];
  const std::size_t D = stats.mean.size();
  NdArray out = values;
  for (std::size_t e = 0; e < out.values.size(); ++e) {
    const std::size_t d = (e / inner) % D;
    out.values[e] = forward ? (values.values[e] - stats.mean[d]) / stats.std[d]
                            : values.values[e] * stats.std[d] + stats.mean[d];
  }
  return out;
}

}  // namespace

NdArray normalize(const NormStats& stats, const NdArray& values, std::size_t feature_axis) {
  return transform(stats, values, feature_axis, true);
}

NdArray denormalize(const NormStats& stats, const NdArray& values, std::size_t feature_axis) {
  return transform(stats, values, feature_axis, false);
}

Dataset apply_normalizer(const NormStats& stats, const Dataset& dataset) {
  if (dataset.norm) throw ConfigError("dataset is already normalized");
  if (stats.mean.size() != dataset.feature_dim) {
    throw DimensionError("normalization stats cover " + std::to_string(stats.mean.size()) +
                         " features, dataset has " + std::to_string(dataset.feature_dim));
  }
  Dataset out = dataset;
  for (auto& s : out.samples) {
    s.x_hist = normalize(stats, s.x_hist, 1);
    s.y = normalize(stats, s.y, 1);
  }
  out.norm = stats;
  if (stats.any_degenerate()) out.warnings.push_back("some feature dimensions have zero variance; std set to 1");
  return out;
}

// ---- batching and storage ---------------------------------------------------

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("make_batch needs at least one sample");
  const std::size_t B = indices.size(), N = ds.num_nodes, D = ds.feature_dim, L = ds.history_len, H = ds.horizon;
  std::vector<double> x(B * N * L * D), a(B * L * N * N), y(B * N * H * D);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = ds.samples.at(indices[b]);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t t = 0; t < L; ++t) x[((b * N + n) * L + t) * D + d] = s.x_hist.values[(n * D + d) * L + t];
        for (std::size_t t = 0; t < H; ++t) y[((b * N + n) * H + t) * D + d] = s.y.values[(n * D + d) * H + t];
      }
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t t = 0; t < L; ++t) a[((b * L + t) * N + i) * N + j] = s.a_hist.values[(i * N + j) * L + t];
  }
  Batch batch;
  batch.inputs.x = Tensor::from({B, N, L, D}, std::move(x));
  batch.inputs.adj = Tensor::from({B, L, N, N}, std::move(a));
  batch.targets = Tensor::from({B, N, H, D}, std::move(y));
  return batch;
}

namespace {
const char* kDatasetFormat = "dynasty-dataset";
const char* kSeriesFormat = "dynasty-series";
}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  Bundle bundle;
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& s : ds.samples) ids.push_back(s.sample_id);
  bundle.metadata = {{"num_nodes", ds.num_nodes},   {"feature_dim", ds.feature_dim}, {"history_len", ds.history_len},
                     {"horizon", ds.horizon},       {"layout", layout_name(ds.layout)}, {"provenance", ds.provenance},
                     {"warnings", ds.warnings},     {"sample_ids", ids}};
  if (ds.norm) bundle.metadata["norm"] = *ds.norm;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    const std::string prefix = "sample/" + padded(i) + "/";
    bundle.tensors.push_back({prefix + "x_hist", s.x_hist});
    bundle.tensors.push_back({prefix + "a_hist", s.a_hist});
    bundle.tensors.push_back({prefix + "y", s.y});
  }
  write_bundle(dir, kDatasetFormat, bundle);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Bundle bundle = read_bundle(dir, kDatasetFormat);
  Dataset ds;
  try {
    const auto& m = bundle.metadata;
    ds.num_nodes = m.at("num_nodes").get<std::size_t>();
    ds.feature_dim = m.at("feature_dim").get<std::size_t>();
    ds.history_len = m.at("history_len").get<std::size_t>();
    ds.horizon = m.at("horizon").get<std::size_t>();
    ds.layout = parse_layout(m.at("layout").get<std::string>());
    ds.provenance = m.at("provenance");
    ds.warnings = m.at("warnings").get<std::vector<std::string>>();
    if (m.contains("norm")) ds.norm = m.at("norm").get<NormStats>();
    const auto ids = m.at("sample_ids").get<std::vector<std::string>>();
    if (bundle.tensors.size() != 3 * ids.size()) {
      throw DataError("dataset " + dir.string() + " lists " + std::to_string(ids.size()) + " samples but holds " +
                      std::to_string(bundle.tensors.size()) + " tensors");
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::string prefix = "sample/" + padded(i) + "/";
      DynamicGraphSample s;
      s.x_hist = bundle.get(prefix + "x_hist");
      s.a_hist = bundle.get(prefix + "a_hist");
      s.y = bundle.get(prefix + "y");
      s.sample_id = ids[i];
      ds.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset " + dir.string() + ": malformed manifest (" + e.what() + ")");
  }
  ds.validate();
  return ds;
}

void save_series(const std::vector<NdArray>& subjects, const std::filesystem::path& dir) {
  Bundle bundle;
  bundle.metadata = {{"subjects", subjects.size()}};
  for (std::size_t s = 0; s < subjects.size(); ++s) bundle.tensors.push_back({"subject/" + padded(s), subjects[s]});
  write_bundle(dir, kSeriesFormat, bundle);
}

std::vector<NdArray> load_series(const std::filesystem::path& dir) {
  Bundle bundle = read_bundle(dir, kSeriesFormat);
  std::vector<NdArray> out;
  for (auto& e : bundle.tensors) {
    if (e.array.shape.size() != 2) {
      throw DataError("series '" + e.name + "' has shape " + shape_to_string(e.array.shape) + ", expected [N, T]");
    }
    out.push_back(std::move(e.array));
  }
  if (out.empty()) throw DataError("series bundle " + dir.string() + " holds no subjects");
  return out;
}

}  // namespace dynasty
