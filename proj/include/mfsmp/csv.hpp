#pragma once

#include <string>
#include <vector>

namespace mfsmp {

/// Comma-separated, '.' decimal, header row, LF line endings. Doubles are
/// written with %.17g so a re-read reproduces the stored bits.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

void write_csv(const std::string& path, const CsvTable& table);
CsvTable read_csv(const std::string& path);

std::string csv_cell(double x);

}  // namespace mfsmp
