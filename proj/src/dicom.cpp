#include "medpipe/dicom.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <optional>

#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"

namespace medpipe::dicom {

namespace {

constexpr std::uint32_t kUndefinedLength = 0xFFFFFFFFu;
constexpr int kMaxSequenceDepth = 64;

constexpr Tag kItem{0xFFFE, 0xE000};
constexpr Tag kItemDelimiter{0xFFFE, 0xE00D};
constexpr Tag kSequenceDelimiter{0xFFFE, 0xE0DD};

bool is_string_vr(std::string_view vr) {
    return vr == "UI" || vr == "CS" || vr == "IS" || vr == "LO" || vr == "SH" ||
           vr == "DA" || vr == "TM" || vr == "PN";
}

bool is_long_form_vr(std::string_view vr) {
    return vr == "OB" || vr == "OD" || vr == "OF" || vr == "OL" || vr == "OW" ||
           vr == "SQ" || vr == "UC" || vr == "UN" || vr == "UR" || vr == "UT";
}

bool is_known_vr(std::string_view vr) {
    static constexpr std::string_view known[] = {
        "AE", "AS", "AT", "CS", "DA", "DS", "DT", "FL", "FD", "IS", "LO",
        "LT", "OB", "OD", "OF", "OL", "OW", "PN", "SH", "SL", "SQ", "SS",
        "ST", "TM", "UC", "UI", "UL", "UN", "UR", "US", "UT"};
    return std::find(std::begin(known), std::end(known), vr) != std::end(known);
}

// VR of the tags we must decode when the syntax is implicit (no VR bytes).
const char* implicit_string_vr(Tag tag) {
    if (tag == kSopInstanceUid || tag == kStudyInstanceUid || tag == kSeriesInstanceUid) {
        return "UI";
    }
    if (tag == kModality) return "CS";
    if (tag == kInstanceNumber) return "IS";
    return nullptr;
}

struct Reader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;

    std::size_t remaining() const { return bytes.size() - pos; }

    void need(std::size_t n, const char* what) {
        if (remaining() < n) {
            fail("Truncated", std::string(what) + " exceeds file size at offset " +
                                  std::to_string(pos));
        }
    }

    std::uint16_t u16() {
        need(2, "element header");
        std::uint16_t v = std::uint16_t(bytes[pos]) | (std::uint16_t(bytes[pos + 1]) << 8);
        pos += 2;
        return v;
    }

    std::uint32_t u32() {
        need(4, "element header");
        std::uint32_t v = std::uint32_t(bytes[pos]) | (std::uint32_t(bytes[pos + 1]) << 8) |
                          (std::uint32_t(bytes[pos + 2]) << 16) |
                          (std::uint32_t(bytes[pos + 3]) << 24);
        pos += 4;
        return v;
    }

    Tag peek_tag() {
        need(4, "element tag");
        return Tag{std::uint16_t(bytes[pos] | (bytes[pos + 1] << 8)),
                   std::uint16_t(bytes[pos + 2] | (bytes[pos + 3] << 8))};
    }

    Tag tag() {
        Tag t = peek_tag();
        pos += 4;
        return t;
    }

    std::string value_string(std::uint32_t length) {
        need(length, "element value");
        std::string v(reinterpret_cast<const char*>(bytes.data() + pos), length);
        pos += length;
        while (!v.empty() && (v.back() == '\0' || v.back() == ' ')) v.pop_back();
        return v;
    }

    void skip(std::uint32_t length) {
        need(length, "element value");
        pos += length;
    }
};

struct ElementHeader {
    Tag tag;
    std::string vr;        // empty in implicit syntax (unless dictionary-known)
    std::uint32_t length;
};

ElementHeader read_header(Reader& r, bool explicit_vr) {
    ElementHeader h;
    h.tag = r.tag();
    if (h.tag.group == 0xFFFE) {
        // Item / delimiter tags carry no VR in either syntax.
        h.length = r.u32();
        return h;
    }
    if (explicit_vr) {
        r.need(2, "VR field");
        char vr[3] = {char(r.bytes[r.pos]), char(r.bytes[r.pos + 1]), '\0'};
        r.pos += 2;
        h.vr = vr;
        if (!is_known_vr(h.vr)) {
            fail("NotDicom", "implausible data element (bad VR) at offset " +
                                 std::to_string(r.pos - 2));
        }
        if (is_long_form_vr(h.vr)) {
            r.need(2, "VR padding");
            r.pos += 2;
            h.length = r.u32();
        } else {
            h.length = r.u16();
        }
    } else {
        h.length = r.u32();
        if (const char* vr = implicit_string_vr(h.tag)) h.vr = vr;
    }
    return h;
}

void skip_undefined_sequence(Reader& r, bool explicit_vr, int depth);

// Walks one dataset region: either until `end_at_item_delimiter` is hit
// (inside an undefined-length item) or until the reader is exhausted.
void skip_dataset_until_delimiter(Reader& r, bool explicit_vr, int depth) {
    if (depth > kMaxSequenceDepth) fail("Truncated", "sequence nesting too deep");
    for (;;) {
        ElementHeader h = read_header(r, explicit_vr);
        if (h.tag == kItemDelimiter) return;
        if (h.length == kUndefinedLength) {
            if (h.tag.group == 0xFFFE) fail("Truncated", "undefined-length item delimiter");
            if (explicit_vr && h.vr != "SQ" && h.vr != "UN") {
                fail("Truncated", "undefined length on non-sequence element");
            }
            skip_undefined_sequence(r, explicit_vr, depth + 1);
        } else {
            r.skip(h.length);
        }
    }
}

void skip_undefined_sequence(Reader& r, bool explicit_vr, int depth) {
    if (depth > kMaxSequenceDepth) fail("Truncated", "sequence nesting too deep");
    for (;;) {
        Tag t = r.tag();
        std::uint32_t length = r.u32();
        if (t == kSequenceDelimiter) return;
        if (t != kItem) fail("Truncated", "malformed sequence item");
        if (length == kUndefinedLength) {
            skip_dataset_until_delimiter(r, explicit_vr, depth + 1);
        } else {
            r.skip(length);
        }
    }
}

bool plausible_dataset_start(std::span<const std::uint8_t> bytes, std::size_t offset) {
    if (bytes.size() < offset + 8) return false;
    std::uint16_t group = std::uint16_t(bytes[offset] | (bytes[offset + 1] << 8));
    return group == 0x0002 || group == 0x0008;
}

bool looks_explicit(std::span<const std::uint8_t> bytes, std::size_t offset) {
    if (bytes.size() < offset + 6) return false;
    char vr[3] = {char(bytes[offset + 4]), char(bytes[offset + 5]), '\0'};
    return is_known_vr(vr);
}

// Parses the explicit-LE file meta group, returning the transfer syntax UID
// (empty when absent) and leaving the reader at the first dataset element.
std::string parse_meta_group(Reader& r) {
    std::string ts;
    while (r.remaining() >= 8 && r.peek_tag().group == 0x0002) {
        ElementHeader h = read_header(r, /*explicit_vr=*/true);
        if (h.length == kUndefinedLength) fail("Truncated", "undefined length in file meta");
        if (h.tag == Tag{0x0002, 0x0010}) {
            ts = r.value_string(h.length);
        } else {
            r.skip(h.length);
        }
    }
    return ts;
}

bool dataset_is_explicit(const std::string& ts_uid, Reader& r) {
    if (ts_uid == "1.2.840.10008.1.2") return false;
    if (ts_uid == "1.2.840.10008.1.2.1") return true;
    if (ts_uid == "1.2.840.10008.1.2.2") {
        fail("UnsupportedTransferSyntax", "big-endian transfer syntax " + ts_uid);
    }
    if (ts_uid == "1.2.840.10008.1.2.1.99") {
        fail("UnsupportedTransferSyntax", "deflated transfer syntax " + ts_uid);
    }
    if (ts_uid.starts_with("1.2.840.10008.1.2.4") || ts_uid == "1.2.840.10008.1.2.5") {
        return true; // encapsulated pixel data; the dataset itself is explicit LE
    }
    if (ts_uid.empty()) {
        // Meta group without a transfer syntax: sniff the first dataset element.
        return looks_explicit(r.bytes, r.pos);
    }
    fail("UnsupportedTransferSyntax", "unrecognized transfer syntax " + ts_uid);
}

} // namespace

TagMap parse_dicom(std::span<const std::uint8_t> bytes) {
    Reader r{bytes};
    bool explicit_vr = true;
    bool has_magic = bytes.size() >= 132 && std::memcmp(bytes.data() + 128, "DICM", 4) == 0;

    if (has_magic) {
        r.pos = 132;
        std::string ts = parse_meta_group(r);
        explicit_vr = dataset_is_explicit(ts, r);
    } else {
        if (!plausible_dataset_start(bytes, 0)) {
            fail("NotDicom", "no DICM magic and no plausible data element");
        }
        explicit_vr = looks_explicit(bytes, 0);
    }

    TagMap out;
    out.syntax = explicit_vr ? TransferSyntax::ExplicitLittleEndian
                             : TransferSyntax::ImplicitLittleEndian;

    const Tag needed[] = {kSopInstanceUid, kModality, kStudyInstanceUid,
                          kSeriesInstanceUid, kInstanceNumber};
    auto have_all_needed = [&] {
        return std::all_of(std::begin(needed), std::end(needed),
                           [&](Tag t) { return out.values.count(t) != 0; });
    };

    while (r.remaining() >= 8) {
        ElementHeader h = read_header(r, explicit_vr);
        if (h.tag == kPixelData) break;
        if (h.length == kUndefinedLength) {
            if (h.tag.group == 0xFFFE) fail("Truncated", "orphan sequence delimiter");
            if (explicit_vr && h.vr != "SQ" && h.vr != "UN") {
                fail("Truncated", "undefined length on non-sequence element");
            }
            skip_undefined_sequence(r, explicit_vr, 0);
            continue;
        }
        if (!h.vr.empty() && is_string_vr(h.vr)) {
            out.values[h.tag] = r.value_string(h.length);
            if (have_all_needed()) break;
        } else {
            r.skip(h.length);
        }
    }
    return out;
}

TagMap read_dicom_tags(const std::filesystem::path& file) {
    auto bytes = fs::read_bytes(file);
    return parse_dicom(bytes);
}

namespace {

std::optional<long long> parse_instance_number(const std::string* text) {
    if (!text) return std::nullopt;
    std::string t = *text;
    // IS values may carry leading/trailing spaces.
    while (!t.empty() && t.front() == ' ') t.erase(t.begin());
    while (!t.empty() && t.back() == ' ') t.pop_back();
    if (t.empty()) return std::nullopt;
    char* end = nullptr;
    long long v = std::strtoll(t.c_str(), &end, 10);
    if (end != t.c_str() + t.size()) return std::nullopt;
    return v;
}

} // namespace

GroupResult group_series(const std::vector<std::filesystem::path>& files) {
    struct Member {
        std::filesystem::path path;
        long long order;
        std::string filename;
    };
    struct Bucket {
        SeriesGroup group;
        std::vector<Member> members;
    };

    GroupResult result;
    std::vector<Bucket> buckets;

    for (const auto& file : files) {
        TagMap tags;
        try {
            tags = read_dicom_tags(file);
        } catch (const Error& e) {
            result.skipped.push_back({file, e.what()});
            continue;
        }
        const std::string* series = tags.find(kSeriesInstanceUid);
        if (!series || series->empty()) {
            result.skipped.push_back({file, "missing SeriesInstanceUID"});
            continue;
        }
        Bucket* bucket = nullptr;
        for (auto& b : buckets) {
            if (b.group.series_uid == *series) {
                bucket = &b;
                break;
            }
        }
        if (!bucket) {
            buckets.push_back({});
            bucket = &buckets.back();
            bucket->group.series_uid = *series;
        }
        if (bucket->group.study_uid.empty()) {
            if (const std::string* study = tags.find(kStudyInstanceUid)) {
                bucket->group.study_uid = *study;
            }
        }
        if (bucket->group.modality.empty()) {
            if (const std::string* modality = tags.find(kModality)) {
                bucket->group.modality = *modality;
            }
        }
        auto number = parse_instance_number(tags.find(kInstanceNumber));
        bucket->members.push_back(
            {file, number.value_or(std::numeric_limits<long long>::max()),
             file.filename().string()});
    }

    for (auto& bucket : buckets) {
        std::sort(bucket.members.begin(), bucket.members.end(),
                  [](const Member& a, const Member& b) {
                      if (a.order != b.order) return a.order < b.order;
                      if (a.filename != b.filename) return a.filename < b.filename;
                      return a.path.string() < b.path.string();
                  });
        for (auto& m : bucket.members) bucket.group.files.push_back(std::move(m.path));
        result.groups.push_back(std::move(bucket.group));
    }
    return result;
}

} // namespace medpipe::dicom
