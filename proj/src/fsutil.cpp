#include "medpipe/fsutil.hpp"

#include <algorithm>
#include <fstream>

#include <zlib.h>

#include "medpipe/error.hpp"

namespace medpipe::fs {

namespace stdfs = std::filesystem;

std::vector<std::uint8_t> read_bytes(const stdfs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + file.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

std::string read_text(const stdfs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + file.string());
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

void write_bytes(const stdfs::path& file, const void* data, std::size_t size) {
    if (file.has_parent_path()) stdfs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) fail("IoError", "cannot write " + file.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) fail("IoError", "short write to " + file.string());
}

void write_text(const stdfs::path& file, std::string_view text) {
    write_bytes(file, text.data(), text.size());
}

std::vector<std::string> list_files(const stdfs::path& dir) {
    std::vector<std::string> out;
    if (!stdfs::exists(dir)) return out;
    for (auto it = stdfs::recursive_directory_iterator(dir);
         it != stdfs::recursive_directory_iterator(); ++it) {
        if (it->is_regular_file()) {
            out.push_back(stdfs::relative(it->path(), dir).generic_string());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

// Single-segment match: '*' within segment, '?' one char.
bool segment_match(std::string_view pat, std::string_view s) {
    std::size_t p = 0, i = 0, star = std::string_view::npos, mark = 0;
    while (i < s.size()) {
        if (p < pat.size() && (pat[p] == '?' || pat[p] == s[i])) {
            ++p;
            ++i;
        } else if (p < pat.size() && pat[p] == '*') {
            star = p++;
            mark = i;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            i = ++mark;
        } else {
            return false;
        }
    }
    while (p < pat.size() && pat[p] == '*') ++p;
    return p == pat.size();
}

std::vector<std::string_view> split_segments(std::string_view path) {
    std::vector<std::string_view> segs;
    std::size_t start = 0;
    while (start <= path.size()) {
        std::size_t slash = path.find('/', start);
        if (slash == std::string_view::npos) {
            segs.push_back(path.substr(start));
            break;
        }
        segs.push_back(path.substr(start, slash - start));
        start = slash + 1;
    }
    return segs;
}

bool segments_match(const std::vector<std::string_view>& pat, std::size_t pi,
                    const std::vector<std::string_view>& segs, std::size_t si) {
    if (pi == pat.size()) return si == segs.size();
    if (pat[pi] == "**") {
        for (std::size_t skip = si; skip <= segs.size(); ++skip) {
            if (segments_match(pat, pi + 1, segs, skip)) return true;
        }
        return false;
    }
    if (si == segs.size()) return false;
    return segment_match(pat[pi], segs[si]) && segments_match(pat, pi + 1, segs, si + 1);
}

} // namespace

bool glob_match(std::string_view pattern, std::string_view relative_path) {
    return segments_match(split_segments(pattern), 0, split_segments(relative_path), 0);
}

bool path_under(const stdfs::path& p, const stdfs::path& root) {
    auto np = p.lexically_normal();
    auto nr = root.lexically_normal();
    auto pi = np.begin();
    for (auto ri = nr.begin(); ri != nr.end(); ++ri) {
        if (ri->empty()) continue; // trailing slash component
        if (pi == np.end() || *pi != *ri) return false;
        ++pi;
    }
    return true;
}

std::string stem_of(const stdfs::path& file) {
    std::string name = file.filename().string();
    if (name.size() > 3 && name.ends_with(".gz")) {
        name = name.substr(0, name.size() - 3);
    }
    auto dot = name.rfind('.');
    if (dot != std::string::npos && dot > 0) name = name.substr(0, dot);
    return name;
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> data) {
    z_stream strm{};
    if (inflateInit2(&strm, 16 + MAX_WBITS) != Z_OK) fail("IoError", "inflateInit failed");
    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    strm.next_in = const_cast<Bytef*>(data.data());
    strm.avail_in = static_cast<uInt>(data.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        strm.next_out = buf;
        strm.avail_out = sizeof(buf);
        rc = inflate(&strm, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&strm);
            fail("Truncated", "corrupt gzip stream");
        }
        out.insert(out.end(), buf, buf + (sizeof(buf) - strm.avail_out));
        if (rc == Z_OK && strm.avail_in == 0 && strm.avail_out != 0) {
            inflateEnd(&strm);
            fail("Truncated", "gzip stream ends prematurely");
        }
    }
    inflateEnd(&strm);
    return out;
}

std::vector<std::uint8_t> gzip_deterministic(std::span<const std::uint8_t> data) {
    z_stream strm{};
    if (deflateInit2(&strm, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8,
                     Z_DEFAULT_STRATEGY) != Z_OK) {
        fail("IoError", "deflateInit failed");
    }
    gz_header header{};
    header.time = 0;
    header.os = 3;
    deflateSetHeader(&strm, &header);

    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    strm.next_in = const_cast<Bytef*>(data.data());
    strm.avail_in = static_cast<uInt>(data.size());
    int rc = Z_OK;
    do {
        strm.next_out = buf;
        strm.avail_out = sizeof(buf);
        rc = deflate(&strm, Z_FINISH);
        out.insert(out.end(), buf, buf + (sizeof(buf) - strm.avail_out));
    } while (rc != Z_STREAM_END);
    deflateEnd(&strm);
    return out;
}

bool files_equal(const stdfs::path& a, const stdfs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa || !fb) fail("IoError", "cannot open files for comparison");
    constexpr std::size_t kChunk = 1 << 16;
    std::vector<char> ba(kChunk), bb(kChunk);
    for (;;) {
        fa.read(ba.data(), kChunk);
        fb.read(bb.data(), kChunk);
        auto na = fa.gcount(), nb = fb.gcount();
        if (na != nb) return false;
        if (na == 0) return true;
        if (!std::equal(ba.begin(), ba.begin() + na, bb.begin())) return false;
    }
}

} // namespace medpipe::fs
