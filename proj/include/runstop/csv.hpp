#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "runstop/common.hpp"

namespace runstop::csv {

// Minimal RFC 4180 reader: quoted fields, doubled quotes, CRLF tolerant.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  // Returns false at end of input. `line_no` is the 1-based physical line
  // where the record started.
  bool next(std::vector<std::string>& fields) {
    fields.clear();
    std::string field;
    bool in_quotes = false;
    bool any = false;
    record_line_ = line_ + 1;
    int ch;
    while ((ch = in_.get()) != EOF) {
      any = true;
      char c = static_cast<char>(ch);
      if (in_quotes) {
        if (c == '"') {
          if (in_.peek() == '"') {
            field.push_back('"');
            in_.get();
          } else {
            in_quotes = false;
          }
        } else {
          if (c == '\n') ++line_;
          field.push_back(c);
        }
        continue;
      }
      if (c == '"') {
        in_quotes = true;
      } else if (c == ',') {
        fields.push_back(std::move(field));
        field.clear();
      } else if (c == '\r') {
        // swallowed; handled by '\n'
      } else if (c == '\n') {
        ++line_;
        fields.push_back(std::move(field));
        return true;
      } else {
        field.push_back(c);
      }
    }
    if (!any) return false;
    fields.push_back(std::move(field));
    return true;
  }

  std::size_t line() const { return record_line_; }

 private:
  std::istream& in_;
  std::size_t line_ = 0;
  std::size_t record_line_ = 0;
};

inline std::string escape(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

// Fixed formatting so repeated runs produce byte-identical files.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string fmt(long long v) { return std::to_string(v); }
inline std::string fmt(int v) { return std::to_string(v); }
inline std::string fmt(std::size_t v) { return std::to_string(v); }

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  Writer& row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << escape(fields[i]);
    }
    out_ << '\n';
    return *this;
  }

 private:
  std::ostream& out_;
};

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty() || s == "NA") return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

// A parsed table addressed by column name.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }

  std::size_t require(std::string_view name) const {
    auto c = column(name);
    if (!c) throw SchemaError("missing column '" + std::string(name) + "'");
    return *c;
  }
};

inline Table read_table(std::istream& in) {
  Table t;
  Reader r(in);
  if (!r.next(t.header)) return t;
  if (!t.header.empty() && t.header[0].rfind("\xEF\xBB\xBF", 0) == 0)
    t.header[0].erase(0, 3);
  std::vector<std::string> f;
  while (r.next(f)) {
    if (f.size() == 1 && f[0].empty()) continue;
    t.rows.push_back(f);
    t.lines.push_back(r.line());
  }
  return t;
}

inline Table read_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_table(in);
}

}  // namespace runstop::csv
