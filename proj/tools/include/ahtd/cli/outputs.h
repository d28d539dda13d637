// Copyright 2026 The AHTD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Output files of the command-line tool. Column layouts are documented in
// docs/outputs.md.

#ifndef AHTD_CLI_OUTPUTS_H_
#define AHTD_CLI_OUTPUTS_H_

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "ahtd/cli/pipeline.h"
#include "ahtd/cli/run_config.h"
#include "ahtd/detector.h"
#include "ahtd/json_io.h"
#include "ahtd/zoo.h"

namespace ahtd::cli {

namespace fs = std::filesystem;

// A scratch directory next to `target` that replaces it on Commit(). Without
// a commit the scratch directory is removed, so a failed run leaves the
// previous output (or nothing) in place.
class StagedDirectory {
 public:
  explicit StagedDirectory(fs::path target);
  ~StagedDirectory();
  StagedDirectory(const StagedDirectory&) = delete;
  StagedDirectory& operator=(const StagedDirectory&) = delete;

  const fs::path& path() const { return staging_; }
  void Commit();

 private:
  fs::path target_;
  fs::path staging_;
  bool committed_ = false;
};

void WriteTextFile(const fs::path& path, const std::string& text);
void WriteJsonFile(const fs::path& path, const Json& json);

// Shortest round-tripping decimal form.
std::string FormatNumber(double v);

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, std::initializer_list<std::string> header);

  template <typename... Fields>
  void Row(const Fields&... fields) {
    std::string line;
    (Append(line, fields), ...);
    line.back() = '\n';
    out_ << line;
  }

 private:
  static void Append(std::string& line, const std::string& s) { line += s + ','; }
  static void Append(std::string& line, const char* s) { line += std::string(s) + ','; }
  static void Append(std::string& line, std::string_view s) {
    line += std::string(s) + ',';
  }
  static void Append(std::string& line, int v) { line += std::to_string(v) + ','; }
  static void Append(std::string& line, double v) { line += FormatNumber(v) + ','; }
  static void Append(std::string& line, bool v) { line += v ? "1," : "0,"; }

  std::ofstream out_;
};

// Per-model analysis documents, CSV exports and a zoo-level aggregate.
void WriteAnalysisOutputs(const fs::path& dir, const zoo::ZooManifest& manifest,
                          const RunConfig& config,
                          const std::vector<ModelAnalysis>& analyses, unsigned parts);

// One document per verdict plus a CSV and metrics over the labeled models.
void WriteVerdicts(const fs::path& dir, const zoo::ZooManifest& manifest,
                   const std::vector<int>& indices,
                   const std::vector<detector::DetectionVerdict>& verdicts);

// Table and figure analogs for a fully analyzed and screened zoo.
void WriteReport(const fs::path& dir, const zoo::ZooManifest& manifest,
                 const RunConfig& config, const std::vector<ModelAnalysis>& analyses,
                 const std::vector<CrossValidation>& cvs);

}  // namespace ahtd::cli

#endif  // AHTD_CLI_OUTPUTS_H_
