#pragma once

#include <fstream>
#include <string>
#include <vector>

namespace rex {

// Minimal CSV emitter: header row up front, one row per call, full double
// precision, UTF-8 throughout.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);

  void row(const std::vector<std::string>& cells);

  static std::string num(double v);  // shortest round-trip formatting

 private:
  std::ofstream out_;
  std::size_t columns_ = 0;
};

std::string timestamp_utc();  // YYYYmmdd-HHMMSS

}  // namespace rex
