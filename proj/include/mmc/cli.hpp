#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mmc/data.hpp"
#include "mmc/noise.hpp"
#include "mmc/trainer.hpp"

namespace mmc::cli {

// Flat `key = value` settings. Every key has a default; unknown keys and
// unparsable values are ConfigErrors naming the key.
class RunConfig {
 public:
  RunConfig();

  // '#' starts a comment; blank lines are ignored.
  void load_file(const std::filesystem::path& path);
  // "key=value" or "key = value".
  void set_assignment(const std::string& text);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  long integer(const std::string& key) const;

  // All keys in schema order, one `key = value` per line.
  std::string resolved_text() const;
  void write(const std::filesystem::path& path) const;

  DatasetConfig dataset() const;
  NoiseSpec noise() const;
  TrainConfig train() const;

  static const std::vector<std::string>& keys();

 private:
  std::map<std::string, std::string> values_;
};

// Exit codes.
inline constexpr int kOk = 0, kUsage = 1, kConfig = 2, kData = 3, kNumerical = 4, kGradcheck = 5;

int run(int argc, char** argv);

}  // namespace mmc::cli
