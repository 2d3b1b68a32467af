#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "dedpc/errors.hpp"
#include "dedpc/types.hpp"

namespace dedpc::detail {

using nlohmann::json;

inline json to_json(const Mat& m) {
  json data = json::array();
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline Mat mat_from_json(const json& j) {
  const auto r = j.at("rows").get<Index>();
  const auto c = j.at("cols").get<Index>();
  const auto& data = j.at("data");
  if (r < 0 || c < 0 || static_cast<Index>(data.size()) != r * c)
    throw FormatError("matrix record has inconsistent size");
  Mat m(r, c);
  Index k = 0;
  for (Index jj = 0; jj < c; ++jj)
    for (Index i = 0; i < r; ++i) m(i, jj) = data[static_cast<std::size_t>(k++)].get<double>();
  return m;
}

inline json vec_to_json(const Vec& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Vec vec_from_json(const json& j) {
  Vec v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
  return v;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("corrupt file " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const json& doc, int indent = -1) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << doc.dump(indent) << '\n';
  if (!out) throw InvalidInput("write failed for " + path.string());
}

}  // namespace dedpc::detail
