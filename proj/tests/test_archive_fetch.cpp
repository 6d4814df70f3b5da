#include <doctest.h>

#include <cstdlib>
#include <cstring>

#include <httplib.h>

#include "medpipe/archive.hpp"
#include "medpipe/digest.hpp"
#include "medpipe/fsutil.hpp"
#include "medpipe/test_engine.hpp"
#include "test_support.hpp"

using namespace medpipe;

namespace {

// Minimal stored-method zip built by hand (local headers + central directory
// + end-of-central-directory record).
std::vector<std::uint8_t> make_stored_zip(
    const std::vector<std::pair<std::string, std::string>>& entries) {
    std::vector<std::uint8_t> out;
    auto u16 = [&](std::uint16_t v) {
        out.push_back(std::uint8_t(v & 0xFF));
        out.push_back(std::uint8_t(v >> 8));
    };
    auto u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xFF));
    };
    auto text = [&](const std::string& s) { out.insert(out.end(), s.begin(), s.end()); };

    std::vector<std::uint32_t> offsets;
    for (const auto& [name, content] : entries) {
        offsets.push_back(std::uint32_t(out.size()));
        u32(0x04034B50);
        u16(20);  // version needed
        u16(0);   // flags
        u16(0);   // method: stored
        u16(0);   // mod time
        u16(0);   // mod date
        u32(0);   // crc32 (unchecked by the extractor)
        u32(std::uint32_t(content.size()));
        u32(std::uint32_t(content.size()));
        u16(std::uint16_t(name.size()));
        u16(0); // extra len
        text(name);
        text(content);
    }
    std::uint32_t cd_offset = std::uint32_t(out.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& [name, content] = entries[i];
        u32(0x02014B50);
        u16(20);
        u16(20);
        u16(0);
        u16(0);
        u16(0);
        u16(0);
        u32(0);
        u32(std::uint32_t(content.size()));
        u32(std::uint32_t(content.size()));
        u16(std::uint16_t(name.size()));
        u16(0);
        u16(0);
        u16(0);
        u16(0);
        u32(0);
        u32(offsets[i]);
        text(name);
    }
    std::uint32_t cd_size = std::uint32_t(out.size()) - cd_offset;
    u32(0x06054B50);
    u16(0);
    u16(0);
    u16(std::uint16_t(entries.size()));
    u16(std::uint16_t(entries.size()));
    u32(cd_size);
    u32(cd_offset);
    u16(0);
    return out;
}

std::filesystem::path make_tar_gz(const TempDir& tmp, const std::string& name) {
    auto src = tmp / "payload";
    fs::write_text(src / "x.txt", "one");
    fs::write_text(src / "nested/y.txt", "two");
    auto archive = tmp / name;
    std::string cmd = "tar czf " + archive.string() + " -C " + src.string() + " .";
    REQUIRE(std::system(cmd.c_str()) == 0);
    return archive;
}

} // namespace

TEST_CASE("tar.gz extraction reproduces the tree") {
    TempDir tmp;
    auto archive = make_tar_gz(tmp, "a.tar.gz");
    auto dest = tmp / "out";
    extract_archive(archive, dest);
    CHECK(fs::read_text(dest / "x.txt") == "one");
    CHECK(fs::read_text(dest / "nested/y.txt") == "two");
}

TEST_CASE("hand-built stored zip extraction") {
    TempDir tmp;
    auto zip = make_stored_zip({{"a.txt", "alpha"}, {"dir/", ""}, {"dir/b.txt", "beta"}});
    fs::write_bytes(tmp / "a.zip", zip.data(), zip.size());
    auto dest = tmp / "out";
    extract_archive(tmp / "a.zip", dest);
    CHECK(fs::read_text(dest / "a.txt") == "alpha");
    CHECK(fs::read_text(dest / "dir/b.txt") == "beta");
}

TEST_CASE("zip entries escaping the destination are rejected") {
    TempDir tmp;
    auto zip = make_stored_zip({{"../evil.txt", "nope"}});
    fs::write_bytes(tmp / "evil.zip", zip.data(), zip.size());
    CHECK(error_code_of([&] { extract_archive(tmp / "evil.zip", tmp / "out"); }) == "BadArchive");
    CHECK_FALSE(std::filesystem::exists(tmp / "evil.txt"));
}

TEST_CASE("garbage bytes are BadArchive") {
    TempDir tmp;
    fs::write_text(tmp / "junk.bin", "this is not an archive at all, not even close");
    CHECK(error_code_of([&] { extract_archive(tmp / "junk.bin", tmp / "out"); }) == "BadArchive");
}

TEST_CASE("truncated tar payload is Truncated") {
    TempDir tmp;
    // header claims a 1000-byte payload; only 100 bytes follow
    std::vector<std::uint8_t> raw(512 + 100, 0);
    std::string name = "x.txt";
    std::copy(name.begin(), name.end(), raw.begin());
    std::string size_octal = "00000001750"; // 1000 in octal
    std::copy(size_octal.begin(), size_octal.end(), raw.begin() + 124);
    raw[156] = '0'; // regular file
    std::memcpy(raw.data() + 257, "ustar", 5);
    fs::write_bytes(tmp / "cut.tar", raw.data(), raw.size());
    CHECK(error_code_of([&] { extract_archive(tmp / "cut.tar", tmp / "out"); }) == "Truncated");
}

TEST_CASE("fetch: local directories are used in place") {
    TempDir tmp;
    auto dir = tmp / "data";
    fs::write_text(dir / "f.txt", "x");
    DataSource source{dir.string(), ""};
    FetchResult result = fetch_test_data(source, tmp / "cache");
    CHECK(result.dir == dir);
    CHECK_FALSE(result.from_cache);
    CHECK(fs::list_files(tmp / "cache").empty()); // nothing copied
}

TEST_CASE("fetch: local archive extracts into the cache; refetch hits cache") {
    TempDir tmp;
    auto archive = make_tar_gz(tmp, "d.tar.gz");
    DataSource source{archive.string(), ""};
    FetchResult first = fetch_test_data(source, tmp / "cache");
    CHECK_FALSE(first.from_cache);
    CHECK(fs::read_text(first.dir / "x.txt") == "one");

    FetchResult second = fetch_test_data(source, tmp / "cache");
    CHECK(second.from_cache);
    CHECK(second.dir == first.dir);
}

TEST_CASE("fetch: pinned digest mismatch caches nothing") {
    TempDir tmp;
    auto archive = make_tar_gz(tmp, "d.tar.gz");
    DataSource tampered{archive.string(), std::string(64, '0')};
    CHECK(error_code_of([&] { fetch_test_data(tampered, tmp / "cache"); }) == "DigestMismatch");
    // no extracted data directory was left behind
    for (const auto& rel : fs::list_files(tmp / "cache")) {
        CHECK(rel.find("data/") == std::string::npos);
    }

    DataSource pinned{archive.string(), digest::sha256_file(archive)};
    FetchResult ok = fetch_test_data(pinned, tmp / "cache");
    CHECK(fs::read_text(ok.dir / "x.txt") == "one");
}

TEST_CASE("fetch: missing local source is FetchFailed") {
    TempDir tmp;
    DataSource source{(tmp / "nope.tar.gz").string(), ""};
    CHECK(error_code_of([&] { fetch_test_data(source, tmp / "cache"); }) == "FetchFailed");
}

TEST_CASE("fetch: http download, then zero-network cache hit") {
    TempDir tmp;
    auto archive = make_tar_gz(tmp, "served.tar.gz");
    auto body = fs::read_text(archive);

    std::atomic<int> hits{0};
    httplib::Server server;
    server.Get("/data.tar.gz", [&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.set_content(body, "application/gzip");
    });
    int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    DataSource source{"http://127.0.0.1:" + std::to_string(port) + "/data.tar.gz", ""};
    FetchResult first = fetch_test_data(source, tmp / "cache");
    CHECK(fs::read_text(first.dir / "nested/y.txt") == "two");
    CHECK(hits == 1);

    FetchResult second = fetch_test_data(source, tmp / "cache");
    CHECK(second.from_cache);
    CHECK(hits == 1); // no second request

    server.stop();
    thread.join();

    // even with the server down, the cache still serves the data
    FetchResult third = fetch_test_data(source, tmp / "cache");
    CHECK(third.from_cache);
}

TEST_CASE("fetch: http error status is FetchFailed") {
    TempDir tmp;
    httplib::Server server;
    server.Get("/missing", [&](const httplib::Request&, httplib::Response& res) {
        res.status = 404;
    });
    int port = server.bind_to_any_port("127.0.0.1");
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    DataSource source{"http://127.0.0.1:" + std::to_string(port) + "/missing", ""};
    CHECK(error_code_of([&] { fetch_test_data(source, tmp / "cache"); }) == "FetchFailed");
    server.stop();
    thread.join();
}
