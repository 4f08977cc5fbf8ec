#ifndef MSHIFT_CHECKPOINT_HPP
#define MSHIFT_CHECKPOINT_HPP

#include <string>

#include "mshift/backbone.hpp"

namespace mshift::checkpoint {

// Binary checkpoint, little-endian throughout:
//   8 bytes  magic "MSHIFT01"
//   u32      number of config entries
//   entries  u32 key length, key bytes, i64 value
//   u32      number of tensors
//   tensors  u32 name length, name bytes, u32 ndim, i64 dims..., f64 data
// Tensors appear in parameter declaration order and are matched by name
// and shape on load.
void save(const std::string& path, const backbone::VptViT& model);
backbone::VptViT load(const std::string& path);

}  // namespace mshift::checkpoint

#endif
