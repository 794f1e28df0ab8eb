#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "cdsm/graphstore.hpp"

namespace cdsm::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "cdsm_";
    if (info) name += std::string(info->test_suite_name()) + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / (name + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& f) const { return path_ / f; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Graph over documents "d0".."d{n-1}" with the given text per node.
inline TextGraph make_graph(const std::vector<std::string>& texts, const std::vector<std::pair<int, int>>& edges) {
  Vocabulary vocab;
  std::vector<Document> docs;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    Document d;
    d.id = "d" + std::to_string(i);
    std::size_t start = 0;
    const auto& t = texts[i];
    while (start < t.size()) {
      auto end = t.find(' ', start);
      if (end == std::string::npos) end = t.size();
      if (end > start) d.tokens.push_back(vocab.intern(t.substr(start, end - start)));
      start = end + 1;
    }
    docs.push_back(std::move(d));
  }
  std::vector<Edge> es;
  for (auto [a, b] : edges) es.push_back({static_cast<NodeId>(a), static_cast<NodeId>(b)});
  return TextGraph(std::move(docs), es, std::move(vocab));
}

}  // namespace cdsm::testing
