// Versioned binary checkpoint: little-endian, shape-tagged f64 arrays, with a
// human-readable manifest written alongside.
#pragma once

#include <string>

#include "deltamil/model.hpp"

namespace deltamil {

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace deltamil
