#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "upc/discrete_ot.hpp"
#include "upc/experiments.hpp"
#include "upc/geometry.hpp"
#include "upc/uot_trainer.hpp"

namespace upc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitIo = 4;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "UPC_OUTPUT_ROOT";

// Everything a run can be configured with. One master seed; each section
// receives it and derives its own streams by component name.
struct Config {
  std::uint64_t seed = 1;
  trainer::TrainerConfig trainer;
  std::string solver_method = "unbalanced";  // sinkhorn | unbalanced | exact | lp
  ot::SolverConfig solver;
  exp::RetrievalConfig retrieval;
  exp::ImbalanceSpec imbalance;

  void validate() const;
};

Config default_config();

// {"seed": .., "trainer": {..}, "solver": {..}, "retrieval": {..}, "imbalance": {..}}.
// Section seeds are not encoded; infinite penalties are written as "inf".
nlohmann::json to_json(const Config& cfg);
// Starts from `base`; rejects unknown sections and keys by name.
Config config_from_json(const nlohmann::json& j, const Config& base);

// "section.key=value" (or "seed=value") applied to a JSON document. The value
// is read as JSON when it parses, as a string otherwise; comma lists fill
// array-valued keys.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// One line per key, "section.key = default".
std::string describe_config_keys(const Config& defaults);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

struct OutputFile {
  std::string path;  // relative to the run directory
  std::string sha256;
};

struct RunManifest {
  std::string command;
  nlohmann::json args = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string version = kVersion;
  std::string started;
  std::string finished;
  std::string status;  // ok | not_converged | diverged | failed
  std::string message;
  std::vector<OutputFile> outputs;
};
nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
// Write-temp-then-rename.
void write_manifest(const RunManifest& m, const std::filesystem::path& path);
RunManifest read_manifest(const std::filesystem::path& path);

// Dataset directory: clouds/*.xyz plus index.csv with header
// "path_incomplete,path_complete,class" (paths relative to the directory).
// Returns the written files relative to `dir`.
std::vector<std::string> write_dataset(const geo::LabeledDataset& dataset,
                                       const std::filesystem::path& dir);
geo::LabeledDataset load_dataset(const std::filesystem::path& dir);

// Relative paths are taken under $UPC_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_path(const std::filesystem::path& p);

int run_cli(int argc, char** argv);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace upc::cli
