#pragma once

// Inference service: loads the trained pipeline once, then answers generate /
// retrieve / interpolate requests. Handlers take and return JSON so they can
// be exercised without a socket; mount() wires them to an HTTP server.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "cogs/metrics.hpp"
#include "cogs/transformer.hpp"
#include "cogs/vae.hpp"
#include "cogs/vq.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace cogs::service {

// Where a trained run lives. Relative paths resolve against `root`.
struct RunConfig {
  std::filesystem::path root = "run";
  std::filesystem::path manifest = "corpus";
  std::filesystem::path sketch_vq = "sketch_vq.ckpt";
  std::filesystem::path image_vq = "image_vq.ckpt";
  std::filesystem::path transformer = "transformer.ckpt";
  std::filesystem::path vae_dir = "vae";  // class_<index>.ckpt, shared.ckpt
  uint64_t style_seed = 17;
  double temperature = 1.0;
  int top_k = 32;
  // "random" draws a seed when a request omits one; "fixed" uses base_seed.
  std::string seed_policy = "random";
  uint64_t base_seed = 1;
  int interpolation_samples = 5;
  // Quantile of real-image quality scores used as the interpolation filter;
  // unset disables filtering.
  std::optional<double> quality_quantile;
  int style_pool = 24;  // N for diverse style suggestions
  int style_count = 6;  // k
  std::string host = "127.0.0.1";
  int port = 8080;

  std::filesystem::path resolve(const std::filesystem::path& p) const { return p.is_absolute() ? p : root / p; }
  // class_index -1 names the shared model.
  std::filesystem::path vae_path(int class_index) const;
  // The class's own model, else the shared one.
  std::optional<std::filesystem::path> vae_for(int class_index) const;
  void validate() const;
};

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = ".");
nlohmann::json to_json(const RunConfig& c);
// Reads `path`, or the file named by COGS_CONFIG when it is set.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path);

struct Reply {
  int status = 200;
  nlohmann::json body;
};

struct Generation {
  std::string id;
  std::string session_id;
  int class_label = 0;
  vq::TokenGrid tokens;
  std::vector<uint8_t> png;
  uint64_t seed = 0;
  double temperature = 1.0;
  int top_k = 0;
  std::string style_id;  // empty when the style came inline
  std::string sketch_digest;
  std::string style_digest;
  std::optional<vae::LatentPoint> latent;
};

struct SessionState {
  std::string session_id;
  std::vector<std::string> history;
  int active_class = 0;
};

class Service {
 public:
  explicit Service(const RunConfig& cfg);

  Reply health() const;
  Reply classes() const;
  Reply styles(const std::string& class_name, const std::string& target) const;
  Reply generate(const nlohmann::json& request);
  Reply retrieve(const nlohmann::json& request) const;
  Reply interpolate(const nlohmann::json& request) const;
  Reply generation(const std::string& id) const;

  std::string config_hash() const { return config_hash_; }
  size_t index_size(int class_label) const;
  size_t generation_count() const;

 private:
  struct ClassState {
    std::unique_ptr<vae::RefineVAE> vae;
    std::unique_ptr<vae::EmbeddingIndex> index;
    metrics::GaussianStats stats;
    std::optional<double> quality_threshold;
  };
  // Image bytes and latent for an index id (generation or real image).
  struct Resolved {
    int class_label = 0;
    std::vector<uint8_t> png;
    std::vector<double> mean;
  };

  int parse_class(const nlohmann::json& v) const;
  std::optional<Resolved> resolve(const std::string& id) const;
  uint64_t draw_seed();

  RunConfig cfg_;
  data::Manifest manifest_;
  std::unique_ptr<vq::VQModel> sketch_vq_, image_vq_;
  std::unique_ptr<style::StyleEncoder> style_;
  std::unique_ptr<tf::CogsTransformer> transformer_;
  tf::Frozen frozen_;
  std::map<int, ClassState> per_class_;
  std::string config_hash_;
  nlohmann::json model_hashes_;

  mutable std::mutex mu_;  // guards everything below and the indices
  std::map<std::string, Generation> generations_;
  std::map<std::string, SessionState> sessions_;
  uint64_t next_id_ = 1;
  Rng seed_rng_;
};

// Registers every endpoint on `server`.
void mount(httplib::Server& server, Service& service);
// Blocks serving on cfg.host:cfg.port.
void serve(const RunConfig& cfg);

}  // namespace cogs::service
