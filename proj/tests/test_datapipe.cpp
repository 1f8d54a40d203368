#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "pv3d/datapipe.hpp"
#include "pv3d/errors.hpp"
#include "pv3d/image_io.hpp"

namespace fs = std::filesystem;
using namespace pv3d;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("pv3d_datapipe_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Brute force: repeatedly merge the closest pair of clusters, recomputing the
// average distance from scratch, until the closest pair exceeds the threshold.
std::vector<int> brute_force_average_linkage(const Eigen::MatrixXd& d, double threshold) {
  const int n = static_cast<int>(d.rows());
  std::vector<std::vector<int>> clusters;
  for (int i = 0; i < n; ++i) clusters.push_back({i});
  while (clusters.size() > 1) {
    double best = std::numeric_limits<double>::infinity();
    size_t bi = 0, bj = 0;
    for (size_t i = 0; i < clusters.size(); ++i) {
      for (size_t j = i + 1; j < clusters.size(); ++j) {
        double sum = 0.0;
        for (int a : clusters[i])
          for (int b : clusters[j]) sum += d(a, b);
        const double avg = sum / (clusters[i].size() * clusters[j].size());
        if (avg < best) {
          best = avg;
          bi = i;
          bj = j;
        }
      }
    }
    if (best > threshold) break;
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    clusters.erase(clusters.begin() + bj);
  }
  std::vector<int> owner(n);
  for (size_t c = 0; c < clusters.size(); ++c)
    for (int i : clusters[c]) owner[i] = static_cast<int>(c);
  std::vector<int> labels(n);
  std::map<int, int> relabel;
  for (int i = 0; i < n; ++i) {
    auto [it, _] = relabel.emplace(owner[i], static_cast<int>(relabel.size()));
    labels[i] = it->second;
  }
  return labels;
}

void write_fixture_clip(const fs::path& dir, int frames, int pose_lines) {
  fs::create_directories(dir);
  for (int i = 0; i < frames; ++i) {
    write_png(dir / frame_filename(i), torch::full({3, 4, 4}, i / 255.0));
  }
  std::vector<CameraPose> poses(pose_lines, frontal_pose());
  write_pose_file(dir / "poses.txt", poses);
}

}  // namespace

TEST(LoadClip, SingleFrameFixture) {
  auto root = scratch_dir("single");
  write_fixture_clip(root / "a", 1, 1);
  auto rec = clip_record(root / "a");
  std::vector<int> idx{0};
  auto clip = load_clip(rec, idx);
  EXPECT_EQ(clip.frames.size(0), 1);
  EXPECT_EQ(clip.poses.size(), 1u);
  EXPECT_EQ(clip.poses[0], frontal_pose());
}

TEST(LoadClip, RequestedOrder) {
  auto root = scratch_dir("order");
  write_fixture_clip(root / "a", 16, 16);
  auto rec = clip_record(root / "a");
  EXPECT_TRUE(rec.trainable());
  std::vector<int> idx{5, 9};
  auto clip = load_clip(rec, idx);
  ASSERT_EQ(clip.frames.size(0), 2);
  EXPECT_NEAR(clip.frames[0][0][0][0].item<float>(), 5 / 255.0, 1e-6);
  EXPECT_NEAR(clip.frames[1][0][0][0].item<float>(), 9 / 255.0, 1e-6);
}

TEST(LoadClip, PoseCountMismatchNamesClip) {
  auto root = scratch_dir("mismatch");
  write_fixture_clip(root / "broken_clip", 16, 15);
  auto rec = clip_record(root / "broken_clip");
  std::vector<int> idx{0};
  try {
    load_clip(rec, idx);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("broken_clip"), std::string::npos);
  }
}

TEST(LoadClip, OutOfRangeIndex) {
  auto root = scratch_dir("range");
  write_fixture_clip(root / "a", 2, 2);
  std::vector<int> idx{2};
  EXPECT_THROW(load_clip(clip_record(root / "a"), idx), DataError);
}

TEST(LoadClip, MissingFrameFile) {
  auto root = scratch_dir("missing");
  write_fixture_clip(root / "a", 3, 3);
  auto rec = clip_record(root / "a");
  fs::remove(root / "a" / frame_filename(1));
  std::vector<int> idx{1};
  EXPECT_THROW(load_clip(rec, idx), DataError);
}

TEST(AverageLinkage, MatchesBruteForceOracle) {
  std::mt19937 rng(7);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 2 + trial % 19;
    Eigen::MatrixXd emb(n, 5);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 5; ++j) emb(i, j) = normal(rng);
    const auto d = cosine_distances(emb);
    for (double threshold : {0.1, 0.4, 0.8, 1.2}) {
      EXPECT_EQ(average_linkage_clusters(d, threshold), brute_force_average_linkage(d, threshold))
          << "n=" << n << " threshold=" << threshold;
    }
  }
}

TEST(BalanceIdentities, IdenticalEmbeddingsKeepTwo) {
  std::vector<ClipEmbedding> clips;
  for (int i = 0; i < 5; ++i) {
    clips.push_back({"clip" + std::to_string(i), Eigen::Vector3d(1, 2, 3), 256});
  }
  clips[3].resolution = 512;
  auto selected = balance_identities(clips, 0.3);
  EXPECT_EQ(selected, (std::vector<std::string>{"clip0", "clip3"}));
}

TEST(BalanceIdentities, TwoOrthogonalGroups) {
  std::mt19937 rng(3);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<ClipEmbedding> clips;
  Eigen::MatrixXd rows(12, 4);
  for (int i = 0; i < 12; ++i) {
    Eigen::Vector4d v = i < 6 ? Eigen::Vector4d(1, 0, 0, 0) : Eigen::Vector4d(0, 0, 1, 0);
    for (int k = 0; k < 4; ++k) v[k] += noise(rng);
    rows.row(i) = v.transpose();
    char id[8];
    std::snprintf(id, sizeof(id), "c%02d", i);
    clips.push_back({id, v, 128});
  }
  const auto d = cosine_distances(rows);
  const auto labels = average_linkage_clusters(d, 0.5);
  EXPECT_EQ(labels, brute_force_average_linkage(d, 0.5));
  EXPECT_EQ(std::set<int>(labels.begin(), labels.end()).size(), 2u);
  auto selected = balance_identities(clips, 0.5);
  EXPECT_EQ(selected, (std::vector<std::string>{"c00", "c01", "c06", "c07"}));
}

TEST(BalanceIdentities, SingleClip) {
  std::vector<ClipEmbedding> clips{{"only", Eigen::Vector2d(1, 0), 64}};
  EXPECT_EQ(balance_identities(clips, 0.5), std::vector<std::string>{"only"});
}

TEST(BalanceIdentities, OutputBoundedByClusters) {
  std::mt19937 rng(11);
  std::normal_distribution<double> normal;
  std::vector<ClipEmbedding> clips;
  Eigen::MatrixXd rows(15, 3);
  for (int i = 0; i < 15; ++i) {
    Eigen::Vector3d v(normal(rng), normal(rng), normal(rng));
    rows.row(i) = v.transpose();
    clips.push_back({"c" + std::to_string(i), v, 0});
  }
  const auto labels = average_linkage_clusters(cosine_distances(rows), 0.6);
  const size_t clusters = std::set<int>(labels.begin(), labels.end()).size();
  EXPECT_LE(balance_identities(clips, 0.6).size(), 2 * clusters);
}

TEST(VerifyClip, IdenticalKeep) {
  Eigen::MatrixXd rows = Eigen::MatrixXd::Ones(8, 4);
  auto v = verify_clip(rows);
  EXPECT_TRUE(v.keep);
  EXPECT_TRUE(v.noisy_frames.empty());
}

TEST(VerifyClip, OneOutlierKept) {
  Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(10, 4);
  rows.col(0).setOnes();
  rows.row(4) << 0, 1, 0, 0;
  auto v = verify_clip(rows);
  EXPECT_TRUE(v.keep);
  EXPECT_EQ(v.noisy_frames, std::vector<int>{4});
  // Hand-computed: the outlier matches nobody; the others match 8 of 9.
  EXPECT_NEAR(v.mean_similarity[4], 0.0, 1e-12);
  EXPECT_NEAR(v.mean_similarity[0], 8.0 / 9.0, 1e-12);
}

TEST(VerifyClip, ThreeOutliersDiscarded) {
  Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(10, 4);
  rows.col(0).setOnes();
  rows.row(2) << 0, 1, 0, 0;
  rows.row(5) << 0, 0, 1, 0;
  rows.row(8) << 0, 0, 0, 1;
  auto v = verify_clip(rows);
  EXPECT_FALSE(v.keep);
  EXPECT_EQ(v.noisy_frames, (std::vector<int>{2, 5, 8}));
}

TEST(VerifyClip, DecisionPermutationInvariant) {
  std::mt19937 rng(5);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd rows(8, 3);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 3; ++j) rows(i, j) = normal(rng) + (j == 0 ? 1.0 : 0.0);
    std::vector<int> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::MatrixXd shuffled(8, 3);
    for (int i = 0; i < 8; ++i) shuffled.row(i) = rows.row(perm[i]);
    auto a = verify_clip(rows);
    auto b = verify_clip(shuffled);
    EXPECT_EQ(a.keep, b.keep);
    EXPECT_EQ(a.noisy_frames.size(), b.noisy_frames.size());
  }
}

TEST(EmbeddingFile, RoundTrip) {
  auto root = scratch_dir("emb");
  Eigen::MatrixXd rows = Eigen::MatrixXd::Random(4, 6);
  write_embedding_file(root / "x.emb", rows);
  EXPECT_EQ(read_embedding_file(root / "x.emb"), rows);
  std::ofstream(root / "bad.emb") << "1 2 3\n4 5\n";
  EXPECT_THROW(read_embedding_file(root / "bad.emb"), FormatError);
}

TEST(SyntheticDataset, CountContract) {
  auto root = scratch_dir("synth_count");
  SyntheticDatasetConfig cfg;
  cfg.resolution = 16;
  cfg.render_steps = 16;
  auto records = make_synthetic_dataset(root, cfg);
  ASSERT_EQ(records.size(), 8u);
  for (const auto& rec : records) {
    EXPECT_EQ(rec.frame_count(), 16);
    // Pose files go through parse/validate without errors.
    auto poses = read_pose_file(rec.pose_path);
    EXPECT_EQ(poses.size(), 16u);
    EXPECT_TRUE(rec.trainable());
    ASSERT_TRUE(rec.identity.has_value());
    EXPECT_EQ(rec.resolution, 16);
  }
}

TEST(SyntheticDataset, SameSeedBitwiseIdentical) {
  SyntheticDatasetConfig cfg;
  cfg.n_clips = 2;
  cfg.frames = 3;
  cfg.resolution = 24;
  cfg.seed = 42;
  auto a = make_synthetic_dataset(scratch_dir("synth_a"), cfg);
  auto b = make_synthetic_dataset(scratch_dir("synth_b"), cfg);
  ASSERT_EQ(a.size(), b.size());
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  for (size_t i = 0; i < a.size(); ++i) {
    for (int f = 0; f < 3; ++f) EXPECT_EQ(slurp(a[i].frame_paths[f]), slurp(b[i].frame_paths[f]));
    EXPECT_EQ(slurp(a[i].pose_path), slurp(b[i].pose_path));
  }
  cfg.seed = 43;
  auto c = make_synthetic_dataset(scratch_dir("synth_c"), cfg);
  EXPECT_NE(slurp(a[0].frame_paths[0]), slurp(c[0].frame_paths[0]));
}

TEST(SyntheticDataset, FramesShowObjectAndLoad) {
  SyntheticDatasetConfig cfg;
  cfg.n_clips = 1;
  cfg.frames = 2;
  cfg.resolution = 32;
  auto root = scratch_dir("synth_load");
  make_synthetic_dataset(root, cfg);
  auto ds = InMemoryDataset::load(root);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.resolution(), 32);
  const auto& frames = ds.clip(0).frames;
  // Centre pixel is covered by the object, corner pixel is background.
  EXPECT_GT(frames[0].select(1, 16).select(1, 16).sum().item<float>(), 0.1f);
  EXPECT_EQ(frames[0].select(1, 0).select(1, 0).sum().item<float>(), 0.0f);
}

TEST(ScanDataset, MissingRoot) {
  EXPECT_THROW(scan_dataset("/nonexistent/pv3d_root"), DataError);
}
