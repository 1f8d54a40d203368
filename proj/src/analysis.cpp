#include "pv3d/analysis.hpp"

#include <algorithm>
#include <fstream>
#include <random>

#include "pv3d/errors.hpp"
#include "pv3d/inference.hpp"

namespace pv3d {

StyleMixGrid style_mix_grid(Generator& generator, std::vector<int> mix_layers, int samples,
                            uint64_t seed) {
  if (samples < 1) throw ParameterError("style mix needs at least one sample");
  const int layers = generator->config().layer_count;
  for (int k : mix_layers)
    if (k < 0 || k > layers) throw ParameterError("mix layer count outside [0, layer_count]");
  torch::NoGradGuard no_grad;
  auto gen = at::detail::createCPUGenerator(seed);
  const CameraPose front = frontal_pose();
  const std::vector<CameraPose> cams(samples, front);
  auto cond = pose_tensor(cams).to(generator->dtype());
  auto w1 = generator->broadcast_w_plus(generator->map_appearance(generator->sample_appearance(samples, gen), cond));
  auto w2 = generator->broadcast_w_plus(generator->map_appearance(generator->sample_appearance(samples, gen), cond));
  auto z_m = generator->sample_motion(samples, gen);
  const auto t = timesteps(samples, 0.0, generator->dtype());
  const auto settings = inference_settings(generator);
  auto render = [&](const torch::Tensor& w) { return generator->render_codes(w, z_m, t, cams, settings).frame; };

  StyleMixGrid grid;
  grid.mix_layers = mix_layers;
  grid.primary = render(w1);
  grid.secondary = render(w2);
  std::vector<torch::Tensor> rows;
  for (int k : mix_layers) rows.push_back(render(style_mix(w1, w2, k)));
  grid.mixed = torch::stack(rows);
  return grid;
}

torch::Tensor tile_style_mix(const StyleMixGrid& grid) {
  std::vector<torch::Tensor> rows;
  for (int64_t s = 0; s < grid.primary.size(0); ++s) {
    std::vector<torch::Tensor> cols{grid.primary[s], grid.secondary[s]};
    for (int64_t k = 0; k < grid.mixed.size(0); ++k) cols.push_back(grid.mixed[k][s]);
    rows.push_back(torch::cat(cols, 2));
  }
  return torch::cat(rows, 1);
}

nlohmann::json DiscAlignmentReport::to_json() const {
  return {{"n_pairs", records.size()},
          {"fraction_changed", fraction_changed},
          {"mean_similarity", mean_similarity},
          {"mean_logit_difference", mean_logit_difference}};
}

namespace {

struct PosePair {
  CameraPose first, second;
  double t_i, t_j;
};

std::vector<PosePair> sample_pose_pairs(int n, const std::vector<ClipRecord>* dataset,
                                        std::mt19937_64& rng) {
  std::vector<PosePair> pairs;
  pairs.reserve(n);
  std::vector<std::vector<CameraPose>> sequences;
  if (dataset) {
    for (const auto& r : *dataset) {
      auto poses = read_pose_file(r.pose_path);
      if (poses.size() >= 2) sequences.push_back(std::move(poses));
    }
    if (sequences.empty()) throw DataError("no clip with at least two poses for alignment analysis");
  }
  std::uniform_real_distribution<double> yaw(-30.0, 30.0), unit(0.0, 1.0);
  for (int k = 0; k < n; ++k) {
    if (!sequences.empty()) {
      const auto& seq = sequences[std::uniform_int_distribution<size_t>(0, sequences.size() - 1)(rng)];
      const int span = std::min<int>(kDefaultFrameSpan, static_cast<int>(seq.size()));
      auto tp = sample_timestep_pair(static_cast<int>(seq.size()), span, 1.0, 2.0, rng);
      pairs.push_back({seq[tp.index_i], seq[tp.index_j], tp.t_i, tp.t_j});
    } else {
      double a = unit(rng), b = unit(rng);
      if (a > b) std::swap(a, b);
      pairs.push_back({yaw_pose(yaw(rng), frontal_pose()), yaw_pose(yaw(rng), frontal_pose()), a, b});
    }
  }
  return pairs;
}

}  // namespace

DiscAlignmentReport discriminator_alignment(ModelBundle& models, const DiscAlignmentConfig& config,
                                            const std::vector<ClipRecord>* dataset) {
  if (config.n_pairs < 1 || config.chunk < 1) throw ParameterError("alignment needs positive pair and chunk counts");
  torch::NoGradGuard no_grad;
  auto& g = models.generator;
  auto& vd = models.video_disc;
  g->eval();
  vd->eval();
  std::mt19937_64 rng(config.seed);
  auto gen = at::detail::createCPUGenerator(config.seed);
  const auto pairs = sample_pose_pairs(config.n_pairs, dataset, rng);
  const auto dtype = g->dtype();
  RenderSettings settings = inference_settings(g);

  DiscAlignmentReport report;
  for (size_t start = 0; start < pairs.size(); start += config.chunk) {
    const size_t end = std::min(pairs.size(), start + config.chunk);
    const int64_t b = static_cast<int64_t>(end - start);
    std::vector<CameraPose> first, second;
    std::vector<double> ti, tj;
    for (size_t k = start; k < end; ++k) {
      first.push_back(pairs[k].first);
      second.push_back(pairs[k].second);
      ti.push_back(pairs[k].t_i);
      tj.push_back(pairs[k].t_j);
    }
    auto t_i = torch::tensor(ti, torch::kFloat64).to(dtype);
    auto t_j = torch::tensor(tj, torch::kFloat64).to(dtype);
    auto fake = generate_fake_pair(g, g->sample_appearance(b, gen), g->sample_motion(b, gen), t_i, t_j,
                                   first, second, settings);
    auto c_i = pose_tensor(fake.render_i).to(dtype);
    auto c_j = pose_tensor(fake.render_j).to(dtype);
    auto dt = t_j - t_i;
    auto original = vd->forward(fake.frame_i.frame, fake.frame_j.frame, dt, c_i, c_j);
    auto flipped = vd->forward(fake.frame_i.frame, fake.frame_j.frame, dt, c_j, c_i);
    auto sim = torch::nn::functional::cosine_similarity(
        vd->pose_embedding(c_i, c_j), vd->pose_embedding(c_j, c_i),
        torch::nn::functional::CosineSimilarityFuncOptions().dim(1));
    auto o = original.to(torch::kFloat64).contiguous();
    auto f = flipped.to(torch::kFloat64).contiguous();
    auto s = sim.to(torch::kFloat64).contiguous();
    for (int64_t k = 0; k < b; ++k)
      report.records.push_back({s[k].item<double>(), o[k].item<double>(), f[k].item<double>()});
  }
  int changed = 0;
  for (const auto& r : report.records) {
    changed += r.logit_difference() > config.change_tolerance;
    report.mean_similarity += r.embedding_similarity;
    report.mean_logit_difference += r.logit_difference();
  }
  const double n = static_cast<double>(report.records.size());
  report.fraction_changed = changed / n;
  report.mean_similarity /= n;
  report.mean_logit_difference /= n;
  return report;
}

void write_histogram_csv(const std::filesystem::path& path, const std::vector<double>& values,
                         double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) throw ParameterError("histogram needs bins >= 1 and hi > lo");
  std::vector<int> counts(bins, 0);
  for (double v : values) {
    int b = static_cast<int>((v - lo) / (hi - lo) * bins);
    counts[std::clamp(b, 0, bins - 1)]++;
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "lo,hi,count\n";
  for (int b = 0; b < bins; ++b)
    out << lo + (hi - lo) * b / bins << ',' << lo + (hi - lo) * (b + 1) / bins << ',' << counts[b] << '\n';
}

}  // namespace pv3d
