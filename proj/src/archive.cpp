#include "medpipe/archive.hpp"

#include <cstring>
#include <string>
#include <vector>

#include <zlib.h>

#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"

namespace medpipe {

namespace {

namespace stdfs = std::filesystem;

bool safe_relative_entry(const std::string& name) {
    if (name.empty() || name.front() == '/') return false;
    std::size_t start = 0;
    while (start <= name.size()) {
        auto slash = name.find('/', start);
        std::string seg = name.substr(start, slash == std::string::npos ? std::string::npos
                                                                        : slash - start);
        if (seg == "..") return false;
        if (slash == std::string::npos) break;
        start = slash + 1;
    }
    return true;
}

void write_entry(const stdfs::path& dest, const std::string& name, const std::uint8_t* data,
                 std::size_t size) {
    if (!safe_relative_entry(name)) fail("BadArchive", "unsafe entry path: " + name);
    fs::write_bytes(dest / name, data, size);
}

std::size_t octal_field(const std::uint8_t* p, std::size_t len) {
    std::size_t value = 0;
    for (std::size_t i = 0; i < len && p[i]; ++i) {
        if (p[i] == ' ') continue;
        if (p[i] < '0' || p[i] > '7') fail("BadArchive", "bad octal field in tar header");
        value = value * 8 + std::size_t(p[i] - '0');
    }
    return value;
}

std::uint16_t le16(const std::uint8_t* p) { return std::uint16_t(p[0] | (p[1] << 8)); }
std::uint32_t le32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

std::vector<std::uint8_t> inflate_raw(const std::uint8_t* data, std::size_t comp_size,
                                      std::size_t uncomp_size) {
    z_stream strm{};
    if (inflateInit2(&strm, -MAX_WBITS) != Z_OK) fail("IoError", "inflateInit failed");
    std::vector<std::uint8_t> out(uncomp_size);
    strm.next_in = const_cast<Bytef*>(data);
    strm.avail_in = static_cast<uInt>(comp_size);
    strm.next_out = out.data();
    strm.avail_out = static_cast<uInt>(out.size());
    int rc = inflate(&strm, Z_FINISH);
    inflateEnd(&strm);
    if (rc != Z_STREAM_END || strm.avail_out != 0) {
        fail("BadArchive", "corrupt deflate stream in zip entry");
    }
    return out;
}

} // namespace

void extract_tar(std::span<const std::uint8_t> bytes, const stdfs::path& dest) {
    std::size_t pos = 0;
    std::string pending_longname;
    while (pos + 512 <= bytes.size()) {
        const std::uint8_t* header = bytes.data() + pos;
        bool all_zero = true;
        for (int i = 0; i < 512 && all_zero; ++i) all_zero = header[i] == 0;
        if (all_zero) break; // end-of-archive marker

        std::string name(reinterpret_cast<const char*>(header),
                         strnlen(reinterpret_cast<const char*>(header), 100));
        if (std::memcmp(header + 257, "ustar", 5) == 0) {
            std::string prefix(reinterpret_cast<const char*>(header + 345),
                               strnlen(reinterpret_cast<const char*>(header + 345), 155));
            if (!prefix.empty()) name = prefix + "/" + name;
        }
        std::size_t size = octal_field(header + 124, 12);
        char type = char(header[156]);
        pos += 512;
        if (pos + size > bytes.size()) fail("Truncated", "tar entry exceeds archive size");
        const std::uint8_t* data = bytes.data() + pos;
        pos += (size + 511) / 512 * 512;

        if (type == 'L') { // GNU long name for the next entry
            pending_longname.assign(reinterpret_cast<const char*>(data), size);
            while (!pending_longname.empty() && pending_longname.back() == '\0') {
                pending_longname.pop_back();
            }
            continue;
        }
        if (!pending_longname.empty()) {
            name = pending_longname;
            pending_longname.clear();
        }
        if (type == '5') {
            if (!safe_relative_entry(name)) fail("BadArchive", "unsafe entry path: " + name);
            stdfs::create_directories(dest / name);
        } else if (type == '0' || type == '\0') {
            write_entry(dest, name, data, size);
        }
        // other entry types (links, fifos) are irrelevant here and skipped
    }
}

void extract_zip(std::span<const std::uint8_t> bytes, const stdfs::path& dest) {
    // Locate the end-of-central-directory record from the back.
    if (bytes.size() < 22) fail("BadArchive", "zip too small");
    std::size_t eocd = std::string::npos;
    std::size_t scan_limit = bytes.size() >= 22 + 65535 ? bytes.size() - 22 - 65535 : 0;
    for (std::size_t i = bytes.size() - 22 + 1; i-- > scan_limit;) {
        if (bytes[i] == 0x50 && bytes[i + 1] == 0x4B && bytes[i + 2] == 0x05 &&
            bytes[i + 3] == 0x06) {
            eocd = i;
            break;
        }
    }
    if (eocd == std::string::npos) fail("BadArchive", "zip end-of-central-directory not found");

    std::size_t entry_count = le16(bytes.data() + eocd + 10);
    std::size_t cd_offset = le32(bytes.data() + eocd + 16);
    std::size_t pos = cd_offset;

    for (std::size_t n = 0; n < entry_count; ++n) {
        if (pos + 46 > bytes.size() || le32(bytes.data() + pos) != 0x02014B50) {
            fail("BadArchive", "corrupt zip central directory");
        }
        const std::uint8_t* cd = bytes.data() + pos;
        std::uint16_t method = le16(cd + 10);
        std::uint32_t comp_size = le32(cd + 20);
        std::uint32_t uncomp_size = le32(cd + 24);
        std::uint16_t name_len = le16(cd + 28);
        std::uint16_t extra_len = le16(cd + 30);
        std::uint16_t comment_len = le16(cd + 32);
        std::uint32_t local_offset = le32(cd + 42);
        if (pos + 46 + name_len > bytes.size()) fail("BadArchive", "zip name exceeds file");
        std::string name(reinterpret_cast<const char*>(cd + 46), name_len);
        pos += 46 + name_len + extra_len + comment_len;

        if (local_offset + 30 > bytes.size() ||
            le32(bytes.data() + local_offset) != 0x04034B50) {
            fail("BadArchive", "corrupt zip local header for " + name);
        }
        const std::uint8_t* lh = bytes.data() + local_offset;
        std::uint16_t lh_name = le16(lh + 26);
        std::uint16_t lh_extra = le16(lh + 28);
        std::size_t data_offset = local_offset + 30 + lh_name + lh_extra;
        if (data_offset + comp_size > bytes.size()) {
            fail("Truncated", "zip entry data exceeds file: " + name);
        }

        if (name.ends_with('/')) {
            if (!safe_relative_entry(name.substr(0, name.size() - 1))) {
                fail("BadArchive", "unsafe entry path: " + name);
            }
            stdfs::create_directories(dest / name);
            continue;
        }
        if (method == 0) {
            write_entry(dest, name, bytes.data() + data_offset, comp_size);
        } else if (method == 8) {
            auto data = inflate_raw(bytes.data() + data_offset, comp_size, uncomp_size);
            write_entry(dest, name, data.data(), data.size());
        } else {
            fail("BadArchive", "unsupported zip compression method " + std::to_string(method) +
                                   " for " + name);
        }
    }
}

void extract_archive(const stdfs::path& archive, const stdfs::path& dest) {
    auto bytes = fs::read_bytes(archive);
    stdfs::create_directories(dest);
    if (bytes.size() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B) {
        auto raw = fs::gunzip(bytes);
        extract_tar(raw, dest);
        return;
    }
    if (bytes.size() >= 4 && bytes[0] == 'P' && bytes[1] == 'K') {
        extract_zip(bytes, dest);
        return;
    }
    if (bytes.size() >= 262 && std::memcmp(bytes.data() + 257, "ustar", 5) == 0) {
        extract_tar(bytes, dest);
        return;
    }
    fail("BadArchive", "unrecognized archive format: " + archive.string());
}

} // namespace medpipe
