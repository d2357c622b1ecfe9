#pragma once

#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace cgs::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kData = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct RdRow {
  std::string model;
  double lambda = 0.0;
  std::size_t bytes = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

// One row per model, sorted by bytes ascending. Needs at least two rows.
std::string rd_csv(std::vector<RdRow> rows);

}  // namespace cgs::cli
