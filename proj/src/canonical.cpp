#include "collab/canonical.hpp"

#include <cmath>
#include <cstdio>

namespace collab {

std::string format_double(double v) {
  if (!std::isfinite(v)) return "null";
  if (v == 0.0) v = 0.0;  // drop negative zero
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quote_json(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  return out + "\"";
}

void CanonicalWriter::newline() {
  if (!pretty_) return;
  out_ += '\n';
  out_.append(stack_.size() * 2, ' ');
}

void CanonicalWriter::before_value() {
  if (after_key_) {
    after_key_ = false;
    return;
  }
  if (stack_.empty()) return;
  Frame& f = stack_.back();
  if (!f.empty) out_ += ',';
  f.empty = false;
  newline();
}

CanonicalWriter& CanonicalWriter::begin_object() {
  before_value();
  out_ += '{';
  stack_.push_back({false, true});
  return *this;
}

CanonicalWriter& CanonicalWriter::end_object() {
  const bool empty = stack_.back().empty;
  stack_.pop_back();
  if (!empty) newline();
  out_ += '}';
  return *this;
}

CanonicalWriter& CanonicalWriter::begin_array() {
  before_value();
  out_ += '[';
  stack_.push_back({true, true});
  return *this;
}

CanonicalWriter& CanonicalWriter::end_array() {
  const bool empty = stack_.back().empty;
  stack_.pop_back();
  if (!empty) newline();
  out_ += ']';
  return *this;
}

CanonicalWriter& CanonicalWriter::key(std::string_view k) {
  before_value();
  out_ += quote_json(k);
  out_ += pretty_ ? ": " : ":";
  after_key_ = true;
  return *this;
}

CanonicalWriter& CanonicalWriter::value(double v) {
  before_value();
  out_ += format_double(v);
  return *this;
}

CanonicalWriter& CanonicalWriter::value(std::int64_t v) {
  before_value();
  out_ += std::to_string(v);
  return *this;
}

CanonicalWriter& CanonicalWriter::value(std::uint64_t v) {
  before_value();
  out_ += std::to_string(v);
  return *this;
}

CanonicalWriter& CanonicalWriter::value(bool v) {
  before_value();
  out_ += v ? "true" : "false";
  return *this;
}

CanonicalWriter& CanonicalWriter::value(std::string_view v) {
  before_value();
  out_ += quote_json(v);
  return *this;
}

CanonicalWriter& CanonicalWriter::null() {
  before_value();
  out_ += "null";
  return *this;
}

CanonicalWriter& CanonicalWriter::ints(const std::vector<std::int32_t>& v) {
  before_value();
  out_ += '[';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out_ += pretty_ ? ", " : ",";
    out_ += std::to_string(v[i]);
  }
  out_ += ']';
  return *this;
}

CanonicalWriter& CanonicalWriter::raw(std::string_view json) {
  before_value();
  out_ += json;
  return *this;
}

}  // namespace collab
