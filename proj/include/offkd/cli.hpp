#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "offkd/encoder.hpp"
#include "offkd/error.hpp"
#include "offkd/training.hpp"

namespace offkd::cli {

inline constexpr const char* kToolVersion = "0.3.0";

// Bad flag or config value; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "usage"; }
};

// Everything a config file can set.
struct RunConfig {
  EncoderConfig model;
  TrainConfig training;
  MaskingPolicy masking;
  std::size_t vocab_size = 2000;
};

// Flat `key = value` lines grouped under [model], [training], [masking] and
// [vocab]; `#` and `;` start comments. Unknown keys and bad values throw
// UsageError naming `origin:line section.key`.
void apply_config_text(RunConfig& config, std::string_view text, const std::string& origin);
// `section.key=value`, as given to --set.
void apply_setting(RunConfig& config, std::string_view assignment, const std::string& origin);
// Every key with its resolved value, in the config-file syntax.
std::string format_config(const RunConfig& config);

// Runs one invocation (argv without the program name). Returns 0 on success,
// 1 on a runtime failure (after one `error: ...` line on `err`) and 2 on a
// usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace offkd::cli
