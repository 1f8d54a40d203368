#include "pv3d/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "pv3d/errors.hpp"
#include "pv3d/image_io.hpp"
#include "pv3d/renderer.hpp"

namespace pv3d {

namespace fs = std::filesystem;

std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%05d.png", index);
  return buf;
}

ClipRecord clip_record(const fs::path& clip_dir) {
  ClipRecord rec;
  rec.clip_id = clip_dir.filename().string();
  rec.pose_path = clip_dir / "poses.txt";
  for (int i = 0;; ++i) {
    auto p = clip_dir / frame_filename(i);
    if (!fs::exists(p)) break;
    rec.frame_paths.push_back(p);
  }
  return rec;
}

std::vector<ClipRecord> scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " not found");
  std::map<std::string, std::pair<std::optional<std::string>, int>> manifest;
  const auto manifest_path = root / "manifest.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad manifest " + manifest_path.string() + ": " + e.what());
    }
    for (const auto& c : j.value("clips", nlohmann::json::array())) {
      std::optional<std::string> identity;
      if (c.contains("identity") && !c["identity"].is_null()) identity = c["identity"].get<std::string>();
      manifest[c.at("id").get<std::string>()] = {identity, c.value("resolution", 0)};
    }
  }
  std::vector<ClipRecord> records;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_directory() || !fs::exists(entry.path() / "poses.txt")) continue;
    auto rec = clip_record(entry.path());
    if (auto it = manifest.find(rec.clip_id); it != manifest.end()) {
      rec.identity = it->second.first;
      rec.resolution = it->second.second;
    }
    records.push_back(std::move(rec));
  }
  std::sort(records.begin(), records.end(),
            [](const ClipRecord& a, const ClipRecord& b) { return a.clip_id < b.clip_id; });
  return records;
}

ClipFrames load_clip(const ClipRecord& record, std::span<const int> indices) {
  std::vector<CameraPose> all_poses;
  try {
    all_poses = read_pose_file(record.pose_path);
  } catch (const Error& e) {
    throw DataError("clip " + record.clip_id + ": " + e.what());
  }
  if (static_cast<int>(all_poses.size()) != record.frame_count()) {
    throw DataError("clip " + record.clip_id + ": " + std::to_string(all_poses.size()) +
                    " pose lines for " + std::to_string(record.frame_count()) + " frames");
  }
  ClipFrames out;
  std::vector<torch::Tensor> frames;
  for (int idx : indices) {
    if (idx < 0 || idx >= record.frame_count()) {
      throw DataError("clip " + record.clip_id + ": frame index " + std::to_string(idx) +
                      " out of range");
    }
    try {
      frames.push_back(read_png(record.frame_paths[idx]));
    } catch (const DataError& e) {
      throw DataError("clip " + record.clip_id + ": " + e.what());
    }
    out.poses.push_back(all_poses[idx]);
  }
  out.frames = frames.empty() ? torch::empty({0, 3, 0, 0}) : torch::stack(frames);
  return out;
}

Eigen::MatrixXd cosine_distances(const Eigen::MatrixXd& embeddings) {
  Eigen::MatrixXd normed = embeddings;
  for (Eigen::Index i = 0; i < normed.rows(); ++i) {
    const double n = normed.row(i).norm();
    if (n > 0.0) normed.row(i) /= n;
  }
  Eigen::MatrixXd d = Eigen::MatrixXd::Ones(normed.rows(), normed.rows()) - normed * normed.transpose();
  d.diagonal().setZero();
  return d;
}

// Nearest-neighbour-chain agglomeration with Lance-Williams average updates.
std::vector<int> average_linkage_clusters(const Eigen::MatrixXd& distances, double threshold) {
  const int n = static_cast<int>(distances.rows());
  if (n == 0) return {};
  if (distances.cols() != n) throw ParameterError("distance matrix must be square");

  Eigen::MatrixXd d = distances;
  std::vector<int> size(n, 1);
  std::vector<bool> active(n, true);
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&parent](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  // slot -> representative original item, so merges can be replayed
  std::vector<int> slot_item(n);
  std::iota(slot_item.begin(), slot_item.end(), 0);

  std::vector<int> chain;
  int remaining = n;
  while (remaining > 1) {
    if (chain.empty()) {
      for (int i = 0; i < n; ++i)
        if (active[i]) {
          chain.push_back(i);
          break;
        }
    }
    const int a = chain.back();
    const int prev = chain.size() >= 2 ? chain[chain.size() - 2] : -1;
    int best = -1;
    double best_d = 0.0;
    for (int c = 0; c < n; ++c) {
      if (!active[c] || c == a) continue;
      const double dc = d(a, c);
      if (best < 0 || dc < best_d || (dc == best_d && c == prev)) {
        best = c;
        best_d = dc;
      }
    }
    if (best != prev) {
      chain.push_back(best);
      continue;
    }
    chain.pop_back();
    chain.pop_back();
    const int b = best;
    if (best_d <= threshold) {
      parent[find(slot_item[b])] = find(slot_item[a]);
    }
    for (int c = 0; c < n; ++c) {
      if (!active[c] || c == a || c == b) continue;
      const double merged = (size[a] * d(a, c) + size[b] * d(b, c)) / (size[a] + size[b]);
      d(a, c) = d(c, a) = merged;
    }
    size[a] += size[b];
    active[b] = false;
    --remaining;
  }

  std::vector<int> labels(n);
  std::map<int, int> relabel;
  for (int i = 0; i < n; ++i) {
    const int root = find(i);
    auto [it, inserted] = relabel.emplace(root, static_cast<int>(relabel.size()));
    labels[i] = it->second;
  }
  return labels;
}

std::vector<std::string> balance_identities(std::span<const ClipEmbedding> clips,
                                            double linkage_threshold, int max_per_identity) {
  if (clips.empty()) throw ParameterError("balance_identities needs at least one embedding");
  const Eigen::Index dim = clips.front().embedding.size();
  Eigen::MatrixXd rows(clips.size(), dim);
  for (size_t i = 0; i < clips.size(); ++i) {
    if (clips[i].embedding.size() != dim) throw ParameterError("embedding dimensions differ");
    rows.row(i) = clips[i].embedding.transpose();
  }
  const auto labels = average_linkage_clusters(cosine_distances(rows), linkage_threshold);

  std::map<int, std::vector<size_t>> groups;
  for (size_t i = 0; i < clips.size(); ++i) groups[labels[i]].push_back(i);
  std::vector<std::string> selected;
  for (auto& [label, members] : groups) {
    std::sort(members.begin(), members.end(), [&](size_t x, size_t y) {
      if (clips[x].resolution != clips[y].resolution) {
        return clips[x].resolution > clips[y].resolution;
      }
      return clips[x].clip_id < clips[y].clip_id;
    });
    for (size_t k = 0; k < members.size() && static_cast<int>(k) < max_per_identity; ++k) {
      selected.push_back(clips[members[k]].clip_id);
    }
  }
  std::sort(selected.begin(), selected.end());
  return selected;
}

ClipVerification verify_clip(const Eigen::MatrixXd& frame_embeddings, double threshold,
                             int max_noisy) {
  const Eigen::Index n = frame_embeddings.rows();
  if (n < 2) throw ParameterError("verify_clip needs at least two frame embeddings");
  const Eigen::MatrixXd sim = Eigen::MatrixXd::Ones(n, n) - cosine_distances(frame_embeddings);
  ClipVerification out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = (sim.row(i).sum() - sim(i, i)) / static_cast<double>(n - 1);
    out.mean_similarity.push_back(mean);
    if (mean < threshold) out.noisy_frames.push_back(static_cast<int>(i));
  }
  out.keep = static_cast<int>(out.noisy_frames.size()) <= max_noisy;
  return out;
}

Eigen::MatrixXd read_embedding_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<double> row;
    double v;
    while (ss >> v) row.push_back(v);
    if (!ss.eof()) throw FormatError("bad number in embedding file " + path.string());
    if (row.empty()) continue;
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw FormatError("ragged embedding file " + path.string());
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("empty embedding file " + path.string());
  Eigen::MatrixXd m(rows.size(), rows.front().size());
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

void write_embedding_file(const fs::path& path, const Eigen::MatrixXd& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write embedding file " + path.string());
  out.precision(17);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) out << (j ? " " : "") << rows(i, j);
    out << '\n';
  }
}

namespace {

struct EllipsoidClip {
  std::array<double, 3> color_a{}, color_b{};
  double stripes = 3.0;
  double stripe_phase = 0.0;
  double stretch = 0.15, stretch_freq = 1.0, stretch_phase = 0.0;
  double nod = 0.2, nod_freq = 1.0, nod_phase = 0.0;
  double yaw_phase = 0.0, pitch_phase = 0.0;
};

RadianceField ellipsoid_field(const EllipsoidClip& clip, double t) {
  const double half_height = 0.26 * (1.0 + clip.stretch * std::sin(2 * std::numbers::pi *
                                                                    clip.stretch_freq * t +
                                                                    clip.stretch_phase));
  const double angle = clip.nod * std::sin(2 * std::numbers::pi * clip.nod_freq * t + clip.nod_phase);
  return [clip, half_height, angle](const torch::Tensor& points) {
    auto x = points.select(-1, 0);
    auto y0 = points.select(-1, 1), z0 = points.select(-1, 2);
    // nod: rotate about the x axis
    auto y = std::cos(angle) * y0 + std::sin(angle) * z0;
    auto z = -std::sin(angle) * y0 + std::cos(angle) * z0;
    auto q = torch::sqrt((x / 0.22).square() + (y / half_height).square() + (z / 0.22).square());
    auto density = 60.0 * torch::sigmoid(30.0 * (1.0 - q));
    auto mix = 0.5 + 0.5 * torch::sin(clip.stripes * 2 * std::numbers::pi * y + clip.stripe_phase);
    auto face = 0.55 + 0.45 * torch::sigmoid(10.0 * z);
    std::vector<torch::Tensor> channels;
    for (int c = 0; c < 3; ++c) {
      channels.push_back((clip.color_a[c] * mix + clip.color_b[c] * (1.0 - mix)) * face);
    }
    auto color = torch::stack(channels, -1).clamp(0.0, 1.0);
    return RadianceSamples{density, color, torch::Tensor()};
  };
}

}  // namespace

std::vector<ClipRecord> make_synthetic_dataset(const fs::path& root,
                                               const SyntheticDatasetConfig& config) {
  if (config.n_clips < 1 || config.frames < 1 || config.resolution < 1) {
    throw ParameterError("synthetic dataset needs positive clip/frame counts and resolution");
  }
  fs::create_directories(root);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  nlohmann::json manifest = {{"clips", nlohmann::json::array()}};

  for (int clip_index = 0; clip_index < config.n_clips; ++clip_index) {
    EllipsoidClip clip;
    for (int c = 0; c < 3; ++c) {
      clip.color_a[c] = 0.3 + 0.7 * unit(rng);
      clip.color_b[c] = 0.1 + 0.5 * unit(rng);
    }
    clip.stripes = 1.5 + 2.5 * unit(rng);
    clip.stripe_phase = 2 * std::numbers::pi * unit(rng);
    clip.stretch = 0.05 + 0.15 * unit(rng);
    clip.stretch_freq = 0.5 + unit(rng);
    clip.stretch_phase = 2 * std::numbers::pi * unit(rng);
    clip.nod = 0.05 + 0.25 * unit(rng);
    clip.nod_freq = 0.5 + unit(rng);
    clip.nod_phase = 2 * std::numbers::pi * unit(rng);
    clip.yaw_phase = 2 * std::numbers::pi * unit(rng);
    clip.pitch_phase = 2 * std::numbers::pi * unit(rng);

    char id[32];
    std::snprintf(id, sizeof(id), "clip_%04d", clip_index);
    const fs::path dir = root / id;
    fs::create_directories(dir);

    std::vector<CameraPose> poses;
    for (int f = 0; f < config.frames; ++f) {
      const double t = config.frames > 1 ? static_cast<double>(f) / (config.frames - 1) : 0.0;
      const double yaw = config.yaw_range_degrees * std::numbers::pi / 180.0 *
                         std::sin(std::numbers::pi * t + clip.yaw_phase);
      const double pitch = 5.0 * std::numbers::pi / 180.0 *
                           std::sin(2 * std::numbers::pi * t + clip.pitch_phase);
      const Eigen::Vector3d pos = kDefaultOrbitRadius * Eigen::Vector3d(std::sin(yaw) * std::cos(pitch),
                                                                        std::sin(pitch),
                                                                        std::cos(yaw) * std::cos(pitch));
      const auto pose = look_at_origin(pos, kDefaultFocal);
      poses.push_back(pose);

      auto rays = generate_rays(std::vector<CameraPose>{pose}, config.resolution, 2.25, 3.3);
      RenderSettings settings{config.render_steps, false, std::nullopt};
      torch::NoGradGuard guard;
      auto out = render_field(ellipsoid_field(clip, t), rays, settings, torch::kFloat64);
      write_png(dir / frame_filename(f), out.rgb[0]);
    }
    write_pose_file(dir / "poses.txt", poses);
    manifest["clips"].push_back({{"id", id}, {"identity", id}, {"resolution", config.resolution}});
  }
  {
    std::ofstream out(root / "manifest.json");
    out << manifest.dump(2) << '\n';
  }
  return scan_dataset(root);
}

InMemoryDataset InMemoryDataset::load(const fs::path& root) {
  return InMemoryDataset(scan_dataset(root));
}

InMemoryDataset::InMemoryDataset(std::vector<ClipRecord> records) : records_(std::move(records)) {
  if (records_.empty()) throw DataError("dataset contains no clips");
  for (const auto& rec : records_) {
    std::vector<int> all(rec.frame_count());
    std::iota(all.begin(), all.end(), 0);
    clips_.push_back(load_clip(rec, all));
  }
}

int InMemoryDataset::resolution() const {
  return static_cast<int>(clips_.front().frames.size(-1));
}

}  // namespace pv3d
