#pragma once

#include "qagg/aggregate.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace qagg::cli {

inline constexpr const char* kToolVersion = "0.3.0";

enum ExitCode : int {
    kOk = 0,
    kValidationFailure = 1,
    kInputError = 2,
    kNonConvergence = 3,
};

struct ManifestEntry {
    std::string path;  // relative to the output directory
    std::uint64_t bytes = 0;
    std::string sha256;
};

struct RunManifest {
    std::string command;
    std::string config_path;
    std::string output_dir;
    std::string tool_version = kToolVersion;
    std::optional<std::uint64_t> seed;
    std::string started_utc;
    std::string finished_utc;
    std::vector<ManifestEntry> files;

    [[nodiscard]] nlohmann::json to_json() const;
};

/// Writes `text` to dir/name and records its checksum in the manifest.
void emit_file(RunManifest& manifest, const std::filesystem::path& dir, const std::string& name,
               const std::string& text);

/// Stamps the finish time and writes manifest.json (not listed in itself).
void write_manifest(RunManifest& manifest, const std::filesystem::path& dir);

std::string utc_timestamp();

struct AggregateArgs {
    std::string design;
    std::string response;
    std::string penalty = "identity";  // path or "identity"
    std::string lambdas;               // comma list or geom:min:max:M
    double sigma = 0.0;
    std::string output;
    SolverOptions solver;
};

/// Writes aggregate.json, members.csv, coefficients.csv, fitted.csv and
/// manifest.json under args.output.
int cmd_aggregate(const AggregateArgs& args, std::ostream& out, std::ostream& err);

struct BenchArgs {
    std::string config;
    std::string output;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::optional<std::string> sweep;  // "M" or "q"
};

/// Writes reports.json, reports.csv and manifest.json under args.output.
int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err);

struct ValidateArgs {
    std::string matrices;
    std::optional<double> tol;
};

int cmd_validate(const ValidateArgs& args, std::ostream& out, std::ostream& err);

}  // namespace qagg::cli
