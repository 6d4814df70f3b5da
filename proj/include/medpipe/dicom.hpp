#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace medpipe::dicom {

struct Tag {
    std::uint16_t group = 0;
    std::uint16_t element = 0;
    auto operator<=>(const Tag&) const = default;
};

inline constexpr Tag kSopInstanceUid{0x0008, 0x0018};
inline constexpr Tag kModality{0x0008, 0x0060};
inline constexpr Tag kStudyInstanceUid{0x0020, 0x000D};
inline constexpr Tag kSeriesInstanceUid{0x0020, 0x000E};
inline constexpr Tag kInstanceNumber{0x0020, 0x0013};
inline constexpr Tag kPixelData{0x7FE0, 0x0010};

enum class TransferSyntax { ExplicitLittleEndian, ImplicitLittleEndian };

/// Decoded string tags of one file. UI values are stripped of trailing NUL
/// padding, other string VRs of trailing spaces.
struct TagMap {
    std::map<Tag, std::string> values;
    TransferSyntax syntax = TransferSyntax::ExplicitLittleEndian;

    const std::string* find(Tag tag) const {
        auto it = values.find(tag);
        return it == values.end() ? nullptr : &it->second;
    }
};

/// Parses data elements up to the pixel-data tag or until the needed tag set
/// is complete. Throws NotDicom, Truncated, or UnsupportedTransferSyntax.
TagMap parse_dicom(std::span<const std::uint8_t> bytes);
TagMap read_dicom_tags(const std::filesystem::path& file);

struct SeriesGroup {
    std::string series_uid;
    std::string study_uid;
    std::string modality;
    std::vector<std::filesystem::path> files; // InstanceNumber order
};

struct SkippedFile {
    std::filesystem::path path;
    std::string error;
};

struct GroupResult {
    std::vector<SeriesGroup> groups; // first-seen order
    std::vector<SkippedFile> skipped;
};

/// Groups files by SeriesInstanceUID; within a group files sort by integer
/// InstanceNumber ascending, missing InstanceNumber last, ties by filename.
/// Unparseable files and files without a series UID land in `skipped`.
GroupResult group_series(const std::vector<std::filesystem::path>& files);

} // namespace medpipe::dicom
