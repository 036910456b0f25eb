#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "fimode/datagen.hpp"

// Datasets are JSON lines, one record per line:
//   {"id", "dim", "field": [[[coeff, [a, b, c]], ...] per component],
//    "context": [{"times", "states"}], "clean": [...], "holdout": [...],
//    "config": generator config}
// "states" is row-major (one inner array per time point). Doubles are
// written in shortest round-trip form, so read(write(x)) == x bit for bit.

namespace fimode {

void write_records(std::ostream& out, const std::vector<DatasetRecord>& records);
void write_dataset(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);

/// Throws ParseError carrying the 1-based line of the first bad record.
std::vector<DatasetRecord> read_records(std::istream& in);
std::vector<DatasetRecord> read_dataset(const std::filesystem::path& path);

} // namespace fimode
