#include "orup/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace orup {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is, const std::string& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("truncated checkpoint " + path);
    return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const NamedTensors& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + path);
    os.write("ORUP", 4);
    put<std::uint32_t>(os, kCheckpointVersion);
    for (const auto& [name, t] : records) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
        for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
        const auto data = t.data();
        os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    }
    if (!os) throw Error("failed writing checkpoint " + path);
}

NamedTensors read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open checkpoint " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "ORUP", 4) != 0) throw FormatError(path + " is not an ORUP checkpoint");
    const auto version = take<std::uint32_t>(is, path);
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    NamedTensors out;
    while (is.peek() != std::char_traits<char>::eof()) {
        const auto name_len = take<std::uint32_t>(is, path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw FormatError("truncated checkpoint " + path);
        const auto ndim = take<std::uint32_t>(is, path);
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(take<std::uint64_t>(is, path));
        std::vector<double> data(numel_of(shape));
        if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
            throw FormatError("truncated checkpoint " + path);
        }
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace orup
