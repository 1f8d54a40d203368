#include "pv3d/checkpoint.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "pv3d/errors.hpp"

namespace pv3d {

namespace fs = std::filesystem;

ModelBundle make_models(const GeneratorConfig& generator_config,
                        const DiscriminatorConfig& discriminator_config, uint64_t seed) {
  generator_config.validate();
  torch::manual_seed(seed);
  ModelBundle m;
  m.generator_config = generator_config;
  m.discriminator_config = discriminator_config;
  m.generator = Generator(generator_config);
  m.image_disc = ImageDiscriminator(discriminator_config);
  m.video_disc = VideoDiscriminator(discriminator_config);
  return m;
}

fs::path checkpoint_sidecar(const fs::path& path) {
  return fs::path(path.string() + ".json");
}

namespace {

void write_sidecar(const fs::path& path, const ModelBundle& models,
                   const std::optional<TrainConfig>& train_config, int iteration) {
  nlohmann::json j = {{"generator", models.generator_config.to_json()},
                      {"discriminator", models.discriminator_config.to_json()},
                      {"iteration", iteration}};
  if (train_config) j["train"] = train_config->to_json();
  const auto sidecar = checkpoint_sidecar(path);
  const auto tmp = fs::path(sidecar.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, sidecar);
}

void save_archive(const fs::path& path, ModelBundle& models, torch::optim::Adam* opt_g,
                  torch::optim::Adam* opt_d) {
  torch::serialize::OutputArchive archive;
  torch::serialize::OutputArchive g, di, dv;
  models.generator->save(g);
  models.image_disc->save(di);
  models.video_disc->save(dv);
  archive.write("generator", g);
  archive.write("image_discriminator", di);
  archive.write("video_discriminator", dv);
  if (opt_g && opt_d) {
    torch::serialize::OutputArchive og, od;
    opt_g->save(og);
    opt_d->save(od);
    archive.write("optimizer_generator", og);
    archive.write("optimizer_discriminator", od);
  }
  const auto tmp = fs::path(path.string() + ".tmp");
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

}  // namespace

void save_checkpoint(const fs::path& path, ModelBundle& models,
                     const std::optional<TrainConfig>& train_config, int iteration) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_archive(path, models, nullptr, nullptr);
  write_sidecar(path, models, train_config, iteration);
}

void save_training_checkpoint(const fs::path& path, Trainer& trainer) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  ModelBundle models;
  models.generator_config = trainer.generator()->config();
  models.discriminator_config = trainer.image_discriminator()->config;
  models.generator = trainer.generator();
  models.image_disc = trainer.image_discriminator();
  models.video_disc = trainer.video_discriminator();
  save_archive(path, models, &trainer.generator_optimizer(), &trainer.discriminator_optimizer());
  write_sidecar(path, models, trainer.config(), trainer.iteration());
}

Checkpoint load_checkpoint(const fs::path& path) {
  const auto sidecar = checkpoint_sidecar(path);
  if (!fs::exists(path)) throw DataError("checkpoint " + path.string() + " not found");
  if (!fs::exists(sidecar)) throw DataError("checkpoint sidecar " + sidecar.string() + " not found");
  nlohmann::json j;
  try {
    std::ifstream in(sidecar);
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint sidecar " + sidecar.string() + ": " + e.what());
  }
  Checkpoint ck;
  ck.models = make_models(GeneratorConfig::from_json(j.at("generator")),
                          DiscriminatorConfig::from_json(j.at("discriminator")), 0);
  ck.iteration = j.value("iteration", 0);
  if (j.contains("train")) ck.train_config = TrainConfig::from_json(j["train"]);
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    torch::serialize::InputArchive g, di, dv;
    archive.read("generator", g);
    archive.read("image_discriminator", di);
    archive.read("video_discriminator", dv);
    ck.models.generator->load(g);
    ck.models.image_disc->load(di);
    ck.models.video_disc->load(dv);
  } catch (const c10::Error& e) {
    throw DataError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return ck;
}

void restore_trainer_state(const fs::path& path, Trainer& trainer) {
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  torch::serialize::InputArchive og, od;
  if (archive.try_read("optimizer_generator", og) && archive.try_read("optimizer_discriminator", od)) {
    trainer.generator_optimizer().load(og);
    trainer.discriminator_optimizer().load(od);
  }
  std::ifstream in(checkpoint_sidecar(path));
  nlohmann::json j;
  in >> j;
  trainer.set_iteration(j.value("iteration", 0));
}

std::string file_sha1(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

}  // namespace pv3d
