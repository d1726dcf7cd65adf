#pragma once

#include <span>
#include <vector>

namespace rttdp {

// K×K row-major probability confusion (rows: ground truth, columns: predicted)
// and the derangement currently derived from it.
struct ConfusionState {
  std::size_t classes = 0;
  double momentum = 0.9;
  std::vector<double> c;
  std::vector<int> mapping;

  // C starts uniform at 1/K; the mapping starts as the cyclic shift k → k+1.
  explicit ConfusionState(std::size_t k = 0, double beta = 0.9);
  double at(std::size_t row, std::size_t col) const { return c[row * classes + col]; }
};

enum class MappingSolver { Greedy, Exact };

// Per-class scatter-mean of `posteriors` [N×K] blended into the rows of the
// classes present in `labels`; absent rows are untouched.
void update_confusion(ConfusionState& state, std::span<const double> posteriors,
                      std::span<const int> labels);

// Returns the updated matrix without touching `state`.
std::vector<double> blended_confusion(const ConfusionState& state, std::span<const double> posteriors,
                                      std::span<const int> labels);

// Greedy row-normalized selection from the released BLE pseudo-code.
std::vector<int> greedy_mapping(std::span<const double> c, std::size_t k);
// Maximum-weight derangement via the Hungarian method.
std::vector<int> exact_mapping(std::span<const double> c, std::size_t k);
std::vector<int> solve_mapping(std::span<const double> c, std::size_t k, MappingSolver solver);

double mapping_objective(std::span<const double> c, std::size_t k, std::span<const int> mapping);
bool is_derangement(std::span<const int> mapping);

}  // namespace rttdp
