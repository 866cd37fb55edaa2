#include <cmath>
#include <filesystem>
#include <iomanip>
#include <set>
#include <sstream>

#include "laff/dataio.hpp"
#include "laff/errors.hpp"

namespace laff {

namespace fs = std::filesystem;

SynthSpec SynthSpec::desk_default() {
  SynthSpec spec;
  spec.video_features = {
      {"appearance", 32, 0.1, false, FeatureLevel::video, 4, 0.05, std::nullopt},
      {"motion", 48, 0.1, false, FeatureLevel::video, 4, 0.05, std::nullopt},
      {"static_noise", 24, 0.1, true, FeatureLevel::video, 4, 0.05, std::nullopt},
  };
  spec.text_features = {
      {"sentence", 32, 0.1, false, FeatureLevel::video, 4, 0.05, std::nullopt},
      {"keywords", 16, 0.1, false, FeatureLevel::video, 4, 0.05, std::nullopt},
  };
  return spec;
}

void SynthSpec::validate() const {
  if (latent_dim < 1) throw ConfigError("synth: latent_dim must be >= 1");
  if (videos < 1) throw ConfigError("synth: video count must be >= 1");
  if (captions_per_video < 1) throw ConfigError("synth: captions_per_video must be >= 1");
  if (video_features.empty() || text_features.empty()) {
    throw ConfigError("synth: at least one video and one text feature are required");
  }
  if (!(train_fraction >= 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction <= 1.0)) {
    throw ConfigError("synth: split fractions must be non-negative and sum to <= 1");
  }
  for (const auto* list : {&video_features, &text_features}) {
    std::set<std::string> names;
    for (const SynthFeature& f : *list) {
      if (f.name.empty()) throw ConfigError("synth: feature with empty name");
      if (!names.insert(f.name).second) throw ConfigError("synth: duplicate feature '" + f.name + "'");
      if (f.dim < 1) throw ConfigError("synth: feature '" + f.name + "' has dim 0");
      if (!(f.sigma >= 0.0)) throw ConfigError("synth: feature '" + f.name + "' has negative sigma");
      if (f.level == FeatureLevel::frame) {
        if (f.frames < 1) throw ConfigError("synth: frame feature '" + f.name + "' needs frames >= 1");
        if (!(f.frame_jitter >= 0.0)) throw ConfigError("synth: negative frame jitter");
      }
    }
  }
  for (const SynthFeature& f : text_features) {
    if (f.level != FeatureLevel::video) {
      throw ConfigError("synth: text feature '" + f.name + "' cannot be frame-level");
    }
  }
}

namespace {

// Independent stream per (seed, purpose, index) so adding a feature never
// perturbs the values of the others.
Rng stream(std::uint64_t seed, std::uint32_t purpose, std::uint32_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    purpose, index};
  return Rng(seq);
}

enum Purpose : std::uint32_t { kLatent = 1, kMixing = 2, kVideoNoise = 3, kTextNoise = 4 };

// dim × g with N(0, 1/g) entries, so each coordinate of M z has unit variance.
Matrix mixing_matrix(std::size_t dim, std::size_t latent, std::uint64_t seed) {
  Rng rng = stream(seed, kMixing, 0);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(latent)));
  Matrix m(dim, latent);
  for (double& v : m.values()) v = normal(rng);
  return m;
}

std::uint64_t mixing_seed_for(const SynthFeature& f, std::uint64_t global, std::uint32_t modality,
                              std::uint32_t index) {
  if (f.mixing_seed) return *f.mixing_seed;
  Rng r = stream(global, kMixing + 100 * modality, index);
  return r();
}

std::vector<double> emit(const Matrix* mixing, std::span<const double> latent, double sigma,
                         std::size_t dim, Rng& noise_rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(dim, 0.0);
  for (std::size_t r = 0; r < dim; ++r) {
    if (mixing != nullptr) {
      out[r] = dot(mixing->row(r), latent) + sigma * normal(noise_rng);
    } else {
      out[r] = normal(noise_rng);
    }
  }
  return out;
}

std::string padded(const std::string& prefix, std::size_t i, std::size_t n) {
  std::size_t width = 1;
  for (std::size_t m = n > 0 ? n - 1 : 0; m >= 10; m /= 10) ++width;
  std::ostringstream os;
  os << prefix << std::setw(static_cast<int>(width)) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

SynthDataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  SynthDataset out;
  DatasetManifest& m = out.manifest;

  for (std::size_t v = 0; v < spec.videos; ++v) m.videos.push_back(padded("v", v, spec.videos));
  for (std::size_t v = 0; v < spec.videos; ++v) {
    for (std::size_t c = 0; c < spec.captions_per_video; ++c) {
      m.captions.push_back({m.videos[v] + "#" + std::to_string(c), m.videos[v], ""});
    }
  }
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * spec.videos));
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val_fraction * spec.videos));
  auto& train = m.splits["train"];
  auto& val = m.splits["val"];
  auto& test = m.splits["test"];
  for (std::size_t v = 0; v < spec.videos; ++v) {
    (v < n_train ? train : v < n_train + n_val ? val : test).push_back(m.videos[v]);
  }

  Matrix latents(spec.videos, spec.latent_dim);
  {
    Rng rng = stream(spec.seed, kLatent, 0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& z : latents.values()) z = normal(rng);
  }

  for (std::uint32_t fi = 0; fi < spec.video_features.size(); ++fi) {
    const SynthFeature& f = spec.video_features[fi];
    Matrix mixing;
    if (!f.noise_only) mixing = mixing_matrix(f.dim, spec.latent_dim, mixing_seed_for(f, spec.seed, 0, fi));
    Rng noise = stream(spec.seed, kVideoNoise, fi);
    std::normal_distribution<double> normal(0.0, 1.0);
    FeatureSpace space(f.name, f.level, f.dim);
    for (std::size_t v = 0; v < spec.videos; ++v) {
      std::vector<double> x =
          emit(f.noise_only ? nullptr : &mixing, latents.row(v), f.sigma, f.dim, noise);
      if (f.level == FeatureLevel::video) {
        space.add(m.videos[v], x);
      } else {
        Matrix frames(f.frames, f.dim);
        for (std::size_t t = 0; t < f.frames; ++t) {
          auto row = frames.row(t);
          for (std::size_t c = 0; c < f.dim; ++c) row[c] = x[c] + f.frame_jitter * normal(noise);
        }
        space.add_frames(m.videos[v], std::move(frames));
      }
    }
    m.video_features.push_back({f.name, f.dim, f.level, "features/video_" + f.name + ".lftr"});
    out.video_store.emplace(f.name, std::move(space));
  }

  for (std::uint32_t fi = 0; fi < spec.text_features.size(); ++fi) {
    const SynthFeature& f = spec.text_features[fi];
    Matrix mixing;
    if (!f.noise_only) mixing = mixing_matrix(f.dim, spec.latent_dim, mixing_seed_for(f, spec.seed, 1, fi));
    Rng noise = stream(spec.seed, kTextNoise, fi);
    FeatureSpace space(f.name, FeatureLevel::video, f.dim);
    for (std::size_t c = 0; c < m.captions.size(); ++c) {
      const std::size_t v = c / spec.captions_per_video;
      space.add(m.captions[c].id,
                emit(f.noise_only ? nullptr : &mixing, latents.row(v), f.sigma, f.dim, noise));
    }
    m.text_features.push_back({f.name, f.dim, FeatureLevel::video, "features/text_" + f.name + ".lftr"});
    out.text_store.emplace(f.name, std::move(space));
  }
  m.validate();
  return out;
}

std::string write_dataset(const SynthDataset& data, const std::string& dir, bool binary) {
  DatasetManifest m = data.manifest;
  fs::create_directories(fs::path(dir) / "features");
  const std::string ext = binary ? ".lftr" : ".txt";
  auto write = [&](const FeatureSpace& space, FeatureFile& decl, const char* prefix) {
    decl.path = std::string("features/") + prefix + space.name() + ext;
    const std::string path = (fs::path(dir) / decl.path).string();
    if (binary) {
      write_features_binary(space, path);
    } else {
      write_features_text(space, path);
    }
  };
  for (auto& decl : m.video_features) write(data.video_store.at(decl.name), decl, "video_");
  for (auto& decl : m.text_features) write(data.text_store.at(decl.name), decl, "text_");
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  save_manifest(m, manifest_path);
  return manifest_path;
}

}  // namespace laff
