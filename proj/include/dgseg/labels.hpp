#pragma once

#include <Eigen/Dense>
#include <cstdint>

namespace dgseg {

// Integer label maps, rows = image rows. 255 marks pixels excluded from
// losses and metrics everywhere in the project.
using LabelMap = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kIgnoreIndex = 255;

}  // namespace dgseg
