#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grdd/errors.hpp"

namespace grdd {

// Receiver for line-delimited training metrics records.
class MetricsSink {
 public:
  virtual ~MetricsSink() = default;
  virtual void record(const nlohmann::json& rec) = 0;
};

// Appends one compact JSON object per line.
class JsonlMetrics final : public MetricsSink {
 public:
  explicit JsonlMetrics(const std::filesystem::path& path) : os_(path, std::ios::app) {
    if (!os_) throw DataError("cannot open metrics file '" + path.string() + "'");
  }
  void record(const nlohmann::json& rec) override {
    os_ << rec.dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

class MemoryMetrics final : public MetricsSink {
 public:
  void record(const nlohmann::json& rec) override { records.push_back(rec); }
  std::vector<nlohmann::json> records;
};

}  // namespace grdd
