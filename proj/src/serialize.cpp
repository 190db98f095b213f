#include "sparsevd/serialize.hpp"

#include <fstream>
#include <stdexcept>
#include <vector>

namespace sparsevd {

ojson tensor_to_json(const Tensor& t) {
    ojson j;
    j["shape"] = t.shape;
    j["data"] = t.v;
    return j;
}

Tensor tensor_from_json(const ojson& j) {
    if (!j.contains("shape") || !j.contains("data"))
        throw std::runtime_error("tensor record needs shape and data");
    Shape shape = j["shape"].get<Shape>();
    std::vector<double> data = j["data"].get<std::vector<double>>();
    return Tensor(shape, data);
}

ojson csr_to_json(const CsrMatrix& m) {
    ojson j;
    j["rows"] = m.rows;
    j["cols"] = m.cols;
    j["rowOffsets"] = m.rowOffsets;
    j["colIndices"] = m.colIndices;
    j["values"] = m.values;
    return j;
}

CsrMatrix csr_from_json(const ojson& j) {
    CsrMatrix m;
    m.rows = j.at("rows").get<int>();
    m.cols = j.at("cols").get<int>();
    m.rowOffsets = j.at("rowOffsets").get<std::vector<int64_t>>();
    m.colIndices = j.at("colIndices").get<std::vector<int>>();
    m.values = j.at("values").get<std::vector<double>>();
    if (m.rows < 0 || m.cols < 0 || m.rowOffsets.size() != size_t(m.rows) + 1)
        throw std::runtime_error("csr record is malformed");
    if (m.colIndices.size() != m.values.size() ||
        m.rowOffsets.back() != int64_t(m.values.size()))
        throw std::runtime_error("csr record is malformed");
    return m;
}

void save_container(const std::string& path, const ojson& root) {
    std::vector<std::uint8_t> bytes = ojson::to_msgpack(root);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

ojson load_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (bytes.empty()) throw std::runtime_error("empty container file: " + path);
    try {
        return ojson::from_msgpack(bytes);
    } catch (const std::exception& e) {
        throw std::runtime_error("bad container " + path + ": " + e.what());
    }
}

}  // namespace sparsevd
