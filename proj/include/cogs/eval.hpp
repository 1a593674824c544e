#pragma once

// Evaluation suites over a trained run. Each returns a JSON report.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cogs/metrics.hpp"
#include "cogs/service.hpp"
#include "cogs/transformer.hpp"
#include "cogs/vae.hpp"
#include "json.hpp"

namespace cogs::eval {

// Trained models of a run, loaded read-only.
struct Run {
  data::Manifest manifest;
  std::unique_ptr<vq::VQModel> sketch_vq;
  std::unique_ptr<vq::VQModel> image_vq;
  std::unique_ptr<style::StyleEncoder> style;
  std::unique_ptr<tf::CogsTransformer> transformer;
  std::map<int, vae::RefineVAE> vaes;

  tf::Frozen frozen() const { return {sketch_vq.get(), image_vq.get(), style.get()}; }
};

Run load_run(const service::RunConfig& cfg);

struct SuiteOptions {
  int samples_per_input = 5;  // diversity
  int k = 1;                  // precision@k
  int per_sketch = 3;         // generations per sketch for the precision index
  uint64_t seed = 1;
  int max_inputs = 0;  // 0: every held-out input
};

// Held-out triples: each validation sketch with its nearest same-class style.
std::vector<data::Triple> heldout_triples(const Run& run);

// Real validation images vs one generation per held-out triple, per class.
nlohmann::json fid_suite(const Run& run, const SuiteOptions& opts);
nlohmann::json diversity_suite(const Run& run, const SuiteOptions& opts);
// style_distance between each generation and its style input.
nlohmann::json style_suite(const Run& run, const SuiteOptions& opts);
// Chamfer against the input sketch versus a random other same-class sketch.
nlohmann::json structure_suite(const Run& run, const SuiteOptions& opts);
// Tertiles of per-class FID.
nlohmann::json partition_suite(const Run& run, const SuiteOptions& opts);
// Precision@k over generated held-out images; relevant = same sketch.
nlohmann::json precision_suite(const Run& run, const SuiteOptions& opts);

const std::vector<std::string>& suite_names();
nlohmann::json run_suite(const std::string& name, const Run& run, const SuiteOptions& opts);

}  // namespace cogs::eval
