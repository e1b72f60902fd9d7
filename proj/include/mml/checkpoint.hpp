#pragma once

#include "mml/classifier.hpp"

#include <string>

namespace mml {

// Binary model checkpoint: magic "MMLM", format version, architecture
// descriptor, little-endian float32 parameter arrays in layer order, and a
// trailing 64-bit FNV-1a checksum over everything before it.
void save_checkpoint(const ClassifierModel& model, const std::string& path);
ClassifierModel load_checkpoint(const std::string& path);

uint64_t fnv1a64(const void* data, size_t len, uint64_t basis = 0xcbf29ce484222325ULL);

} // namespace mml
