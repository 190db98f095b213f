#pragma once

#include <string>

#include "json.hpp"
#include "sparsevd/sparsity.hpp"
#include "sparsevd/tensor.hpp"

namespace sparsevd {

// Insertion-ordered JSON so serialized bytes are reproducible.
using ojson = nlohmann::ordered_json;

ojson tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const ojson& j);

ojson csr_to_json(const CsrMatrix& m);
CsrMatrix csr_from_json(const ojson& j);

// Containers are JSON trees stored as MessagePack (bit-exact doubles).
void save_container(const std::string& path, const ojson& root);
ojson load_container(const std::string& path);

}  // namespace sparsevd
