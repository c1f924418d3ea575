#pragma once

// Procedurally rendered 28x28 digit glyphs with per-sample affine and stroke
// variation, written as standard IDX files. Stands in for MNIST when the real
// files are not available; the rest of the pipeline is format-agnostic.

#include <cstdint>
#include <string>

#include "cldl/data.hpp"

namespace cldl {

LabeledDataset make_synthetic_digits(std::size_t n, std::uint64_t seed);

// Plain (uncompressed) IDX pair.
void write_idx(const LabeledDataset& ds, const std::string& images_path,
               const std::string& labels_path);

// Writes train-images-idx3-ubyte / train-labels-idx1-ubyte /
// t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte under dir.
void write_synthetic_dataset(const std::string& dir, std::size_t n_train, std::size_t n_test,
                             std::uint64_t seed);

}  // namespace cldl
