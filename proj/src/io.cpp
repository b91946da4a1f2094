#include "spurgen/io.hpp"

#include "spurgen/error.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "container encoding assumes a little-endian host");

namespace spurgen::io {

namespace fs = std::filesystem;

namespace {

fs::path temp_sibling(const fs::path& path) {
    static std::uint64_t counter = 0;
    return path.parent_path() / ("." + path.filename().string() + ".tmp" + std::to_string(++counter));
}

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const fs::path& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated container: " + path.string());
    return v;
}

}  // namespace

void write_container(const fs::path& path, const Magic& magic, std::uint32_t version, const nlohmann::json& header,
                     std::span<const double> payload) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = temp_sibling(path);
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot write " + tmp.string());
        const std::string text = header.dump();
        os.write(magic.data(), magic.size());
        put<std::uint32_t>(os, version);
        put<std::uint64_t>(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size_bytes()));
        if (!os) throw DataError("failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

Container read_container(const fs::path& path, const Magic& magic) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    Magic found{};
    is.read(found.data(), found.size());
    if (!is || found != magic) throw DataError("bad magic in " + path.string());
    Container c;
    c.version = get<std::uint32_t>(is, path);
    const auto header_len = get<std::uint64_t>(is, path);
    std::string text(header_len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!is) throw DataError("truncated header in " + path.string());
    try {
        c.header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed header in " + path.string() + ": " + e.what());
    }
    const std::string rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0) throw DataError("payload is not a whole number of doubles: " + path.string());
    c.payload.resize(rest.size() / sizeof(double));
    std::memcpy(c.payload.data(), rest.data(), rest.size());
    return c;
}

void atomic_write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = temp_sibling(path);
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot write " + tmp.string());
        os << text;
        if (!os) throw DataError("failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
        throw std::runtime_error("sha256 failed");
    }
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

std::string sha256_hex(const std::string& text) {
    return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

std::string sha256_doubles(std::span<const double> values) {
    return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(values.data()), values.size_bytes()));
}

}  // namespace spurgen::io
