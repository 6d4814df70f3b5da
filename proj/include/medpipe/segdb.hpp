#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace medpipe {

struct SegmentDef {
    std::string id;   // UPPER_SNAKE token
    std::string name; // human-readable
    std::array<int, 3> rgb{0, 0, 0};
    std::string category;
    std::string type;
    std::string modifier;
    bool is_finding = false;

    bool operator==(const SegmentDef&) const = default;
};

/// A finding inside a context structure, written `CONTEXT+FINDING`.
struct CompositeAnnotation {
    SegmentDef context;
    SegmentDef finding;
};

std::string serialize(const CompositeAnnotation& composite);

/// Immutable keyword lookup table of segment definitions.
class SegmentRegistry {
public:
    /// The compiled-in registry; identical in content to data/segdb.csv.
    static const SegmentRegistry& builtin();

    /// CSV columns: id,name,r,g,b,category,type,modifier,is_finding.
    /// A header row is detected by the literal first cell "id".
    static SegmentRegistry load_csv(const std::filesystem::path& file);
    static SegmentRegistry from_csv_text(std::string_view text);

    /// Exact, case-sensitive lookup. UnknownSegmentId errors carry nearest-id
    /// hints (case-folded edit distance <= 2).
    const SegmentDef& lookup(std::string_view id) const;
    const SegmentDef* find(std::string_view id) const;

    /// Parses `CONTEXT+FINDING`; the right token must be a finding.
    CompositeAnnotation parse_composite(std::string_view text) const;

    std::vector<std::string> hints(std::string_view id) const;
    const std::vector<SegmentDef>& entries() const { return entries_; }

private:
    void add(SegmentDef def);
    std::vector<SegmentDef> entries_;
};

} // namespace medpipe
