#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace collab {

/// "%.17g"; non-finite values become null.
std::string format_double(double v);
std::string quote_json(std::string_view s);

/// Minimal writer for the canonical structured-text (JSON) documents. Keys are
/// emitted in call order, floats always at 17 significant digits.
class CanonicalWriter {
 public:
  explicit CanonicalWriter(bool pretty = true) : pretty_(pretty) {}

  CanonicalWriter& begin_object();
  CanonicalWriter& end_object();
  CanonicalWriter& begin_array();
  CanonicalWriter& end_array();
  CanonicalWriter& key(std::string_view k);

  CanonicalWriter& value(double v);
  CanonicalWriter& value(std::int64_t v);
  CanonicalWriter& value(int v) { return value(static_cast<std::int64_t>(v)); }
  CanonicalWriter& value(std::uint64_t v);
  CanonicalWriter& value(bool v);
  CanonicalWriter& value(std::string_view v);
  CanonicalWriter& value(const char* v) { return value(std::string_view(v)); }
  CanonicalWriter& null();
  CanonicalWriter& value(const std::optional<double>& v) { return v ? value(*v) : null(); }
  /// Integer arrays are written on one line.
  CanonicalWriter& ints(const std::vector<std::int32_t>& v);
  CanonicalWriter& raw(std::string_view json);

  std::string str() const { return out_ + (pretty_ ? "\n" : ""); }

 private:
  void before_value();
  void newline();

  struct Frame {
    bool array;
    bool empty;
  };
  bool pretty_;
  std::string out_;
  std::vector<Frame> stack_;
  bool after_key_ = false;
};

}  // namespace collab
