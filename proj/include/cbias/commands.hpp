#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "cbias/run_config.hpp"

// Command implementations behind the `cbias` executable.
namespace cbias::cli {

// Missing, unreadable or inconsistent input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int config = 2;
inline constexpr int data = 3;
inline constexpr int divergence = 4;
}  // namespace exit_code

// Environment variable capping evaluation worker threads.
inline constexpr const char* kThreadsEnv = "CBIAS_THREADS";
std::size_t worker_threads();

// File names inside a dataset directory.
namespace files {
inline constexpr const char* train = "train.jsonl";
inline constexpr const char* val = "val.jsonl";
inline constexpr const char* test = "test.jsonl";
inline constexpr const char* stats = "stats.json";
inline constexpr const char* zero_shot = "zero_shot.json";
inline constexpr const char* checkpoint = "model.ckpt.json";
inline constexpr const char* train_log = "train_log.jsonl";
inline constexpr const char* report = "report.json";
inline constexpr const char* predictions = "predictions.jsonl";
inline constexpr const char* ablation = "ablation.txt";
// Resolved-config snapshot written by `command`.
std::string snapshot(const std::string& command);
}  // namespace files

void generate(const RunConfig& config, const std::filesystem::path& out_dir, bool force,
              std::ostream& log);
void train(const RunConfig& config, const std::filesystem::path& data_dir,
           const std::filesystem::path& out_dir, bool force, std::ostream& log);
void evaluate(const RunConfig& config, const std::filesystem::path& data_dir,
              const std::filesystem::path& run_dir, const std::string& split,
              const std::filesystem::path& out_dir, std::ostream& log);
void ablate(const RunConfig& config, const std::filesystem::path& data_dir,
            const std::string& split, const std::filesystem::path& out_dir, std::ostream& log);
void report(const std::filesystem::path& report_path, std::size_t k, std::ostream& out);

// Parses argv, runs one command and maps failures to exit codes, printing
// a one-line diagnostic to `err`.
int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cbias::cli
