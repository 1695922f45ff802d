#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace collab {

enum class ErrorKind {
  contract,          // precondition violated by the caller
  out_of_vocab,
  backend,           // agent or reward backend failed
  support,           // KL support violation
  capability,        // operation not supported by this model
  table_miss,        // lookup outside a tabular model's domain
  guard,             // enumerability guard tripped
  degenerate,        // degenerate normalization
  network,
  version_mismatch,
  malformed,
  conformance,       // server answered but broke the wire contract
  config,
  usage,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

}  // namespace collab
