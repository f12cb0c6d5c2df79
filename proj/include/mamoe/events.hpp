// Copyright (c) 2026 The mamoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Routing-event log schema shared by the trainer (producer) and the
// analytics module (consumer). Append-only CSV; index and weight lists are
// '|'-joined inside their cells.

#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mamoe/errors.hpp"

namespace mamoe::events {

struct RoutingEvent {
  std::int64_t step = 0;
  int layer = 0;
  int token_index = 0;
  int modality = 0;
  std::vector<int> selected_indices;
  std::vector<double> weights;
};

inline constexpr const char* kCsvHeader =
    "step,layer,token_index,modality,selected_indices,weights";

inline std::string to_csv(const RoutingEvent& ev) {
  std::ostringstream os;
  os << ev.step << ',' << ev.layer << ',' << ev.token_index << ',' << ev.modality << ',';
  for (std::size_t i = 0; i < ev.selected_indices.size(); ++i)
    os << (i ? "|" : "") << ev.selected_indices[i];
  os << ',';
  char buf[32];
  for (std::size_t i = 0; i < ev.weights.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", ev.weights[i]);
    os << (i ? "|" : "") << buf;
  }
  return os.str();
}

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

inline long long parse_int(const std::string& s, std::size_t line_no, const char* what) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ParseError("events line " + std::to_string(line_no) + ": bad " + what + " '" +
                     s + "'");
  return v;
}

inline double parse_double(const std::string& s, std::size_t line_no, const char* what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("events line " + std::to_string(line_no) + ": bad " + what + " '" +
                     s + "'");
  }
}

}  // namespace detail

inline RoutingEvent parse_event(const std::string& line, std::size_t line_no) {
  const auto cells = detail::split(line, ',');
  if (cells.size() != 6)
    throw ParseError("events line " + std::to_string(line_no) + ": expected 6 columns, got " +
                     std::to_string(cells.size()));
  RoutingEvent ev;
  ev.step = detail::parse_int(cells[0], line_no, "step");
  ev.layer = static_cast<int>(detail::parse_int(cells[1], line_no, "layer"));
  ev.token_index = static_cast<int>(detail::parse_int(cells[2], line_no, "token_index"));
  ev.modality = static_cast<int>(detail::parse_int(cells[3], line_no, "modality"));
  if (ev.modality != 0 && ev.modality != 1)
    throw ParseError("events line " + std::to_string(line_no) + ": modality must be 0 or 1");
  for (const auto& cell : detail::split(cells[4], '|'))
    ev.selected_indices.push_back(static_cast<int>(detail::parse_int(cell, line_no, "index")));
  for (const auto& cell : detail::split(cells[5], '|'))
    ev.weights.push_back(detail::parse_double(cell, line_no, "weight"));
  if (ev.selected_indices.size() != ev.weights.size())
    throw ParseError("events line " + std::to_string(line_no) +
                     ": index/weight count mismatch");
  return ev;
}

/// Consumer interface for routing events produced during training.
class EventSink {
 public:
  virtual ~EventSink() = default;
  virtual void on_event(const RoutingEvent& ev) = 0;
};

class CsvEventWriter : public EventSink {
 public:
  explicit CsvEventWriter(const std::string& path) : out_(path) {
    if (!out_) throw IoError("cannot open events file for writing: " + path);
    out_ << kCsvHeader << '\n';
  }

  void on_event(const RoutingEvent& ev) override { out_ << to_csv(ev) << '\n'; }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

}  // namespace mamoe::events
