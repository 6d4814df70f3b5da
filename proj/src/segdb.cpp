#include "medpipe/segdb.hpp"

#include <algorithm>
#include <cctype>

#include "medpipe/csv.hpp"
#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"

namespace medpipe {

namespace {

bool valid_segment_id(std::string_view id) {
    if (id.empty()) return false;
    if (!(std::isupper(static_cast<unsigned char>(id[0])))) return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
    });
}

std::string fold(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return std::toupper(c); });
    return out;
}

// Bounded Levenshtein distance; bails out early once `limit` is exceeded.
int edit_distance(std::string_view a, std::string_view b, int limit) {
    if (int(std::max(a.size(), b.size()) - std::min(a.size(), b.size())) > limit) {
        return limit + 1;
    }
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = int(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = int(i);
        int row_min = cur[0];
        for (std::size_t j = 1; j <= b.size(); ++j) {
            int cost = a[i - 1] == b[j - 1] ? 0 : 1;
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost});
            row_min = std::min(row_min, cur[j]);
        }
        if (row_min > limit) return limit + 1;
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// The shipped registry. data/segdb.csv carries the same rows; a test keeps
// the two in sync.
constexpr std::string_view kBuiltinCsv = R"(id,name,r,g,b,category,type,modifier,is_finding
HEART,Heart,206,110,84,anatomical structure,organ,,0
LEFT_LUNG,Left lung,197,165,145,anatomical structure,organ,left,0
RIGHT_LUNG,Right lung,197,165,145,anatomical structure,organ,right,0
LEFT_UPPER_LUNG_LOBE,Left upper lung lobe,172,138,115,anatomical structure,organ part,left,0
LEFT_LOWER_LUNG_LOBE,Left lower lung lobe,144,238,144,anatomical structure,organ part,left,0
RIGHT_UPPER_LUNG_LOBE,Right upper lung lobe,224,186,162,anatomical structure,organ part,right,0
RIGHT_MIDDLE_LUNG_LOBE,Right middle lung lobe,202,164,140,anatomical structure,organ part,right,0
RIGHT_LOWER_LUNG_LOBE,Right lower lung lobe,180,146,122,anatomical structure,organ part,right,0
LIVER,Liver,221,130,101,anatomical structure,organ,,0
BODY,Body,177,122,101,anatomical structure,body,,0
TUMOR,Tumor,144,48,48,morphologically abnormal structure,neoplasm,,1
NODULE,Nodule,188,95,76,morphologically abnormal structure,nodule,,1
)";

} // namespace

std::string serialize(const CompositeAnnotation& composite) {
    return composite.context.id + "+" + composite.finding.id;
}

void SegmentRegistry::add(SegmentDef def) {
    if (!valid_segment_id(def.id)) {
        fail("InvalidSegmentId", "segment id must be UPPER_SNAKE: \"" + def.id + "\"");
    }
    if (find(def.id)) fail("DuplicateSegmentId", "duplicate segment id " + def.id);
    if (def.category.empty() || def.type.empty()) {
        fail("InvalidSegmentDef", "category and type are required for " + def.id);
    }
    for (int c : def.rgb) {
        if (c < 0 || c > 255) fail("InvalidSegmentDef", "rgb out of range for " + def.id);
    }
    entries_.push_back(std::move(def));
}

SegmentRegistry SegmentRegistry::from_csv_text(std::string_view text) {
    SegmentRegistry reg;
    auto rows = csv::parse(text);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.empty() || (row.size() == 1 && row[0].empty())) continue;
        if (i == 0 && !row.empty() && row[0] == "id") continue;
        if (row.size() != 9) {
            fail("InvalidSegmentDef",
                 "registry row " + std::to_string(i + 1) + " has " +
                     std::to_string(row.size()) + " columns, expected 9");
        }
        SegmentDef def;
        def.id = row[0];
        def.name = row[1];
        try {
            def.rgb = {std::stoi(row[2]), std::stoi(row[3]), std::stoi(row[4])};
        } catch (const std::exception&) {
            fail("InvalidSegmentDef", "bad rgb in registry row " + std::to_string(i + 1));
        }
        def.category = row[5];
        def.type = row[6];
        def.modifier = row[7];
        def.is_finding = row[8] == "1" || row[8] == "true";
        reg.add(std::move(def));
    }
    return reg;
}

SegmentRegistry SegmentRegistry::load_csv(const std::filesystem::path& file) {
    return from_csv_text(fs::read_text(file));
}

const SegmentRegistry& SegmentRegistry::builtin() {
    static const SegmentRegistry reg = from_csv_text(kBuiltinCsv);
    return reg;
}

const SegmentDef* SegmentRegistry::find(std::string_view id) const {
    for (const auto& def : entries_) {
        if (def.id == id) return &def;
    }
    return nullptr;
}

std::vector<std::string> SegmentRegistry::hints(std::string_view id) const {
    std::string folded = fold(id);
    std::vector<std::pair<int, std::string>> scored;
    for (const auto& def : entries_) {
        int d = edit_distance(folded, def.id, 2);
        if (d <= 2) scored.emplace_back(d, def.id);
    }
    std::sort(scored.begin(), scored.end());
    std::vector<std::string> out;
    for (auto& [d, name] : scored) out.push_back(std::move(name));
    return out;
}

const SegmentDef& SegmentRegistry::lookup(std::string_view id) const {
    if (const SegmentDef* def = find(id)) return *def;
    std::string message = "unknown segment id \"" + std::string(id) + "\"";
    auto near = hints(id);
    if (!near.empty()) {
        message += " (did you mean";
        for (std::size_t i = 0; i < near.size(); ++i) {
            message += (i ? ", " : " ") + near[i];
        }
        message += "?)";
    }
    fail("UnknownSegmentId", message);
}

CompositeAnnotation SegmentRegistry::parse_composite(std::string_view text) const {
    auto plus = text.find('+');
    if (plus == std::string_view::npos) {
        fail("SyntaxError", "not a composite annotation (expected CONTEXT+FINDING): \"" +
                                std::string(text) + "\"");
    }
    if (text.find('+', plus + 1) != std::string_view::npos) {
        fail("SyntaxError", "multiple '+' in composite annotation: \"" + std::string(text) + "\"");
    }
    std::string_view context_id = text.substr(0, plus);
    std::string_view finding_id = text.substr(plus + 1);
    CompositeAnnotation out{lookup(context_id), lookup(finding_id)};
    if (!out.finding.is_finding) {
        fail("NotAFinding", out.finding.id + " is not in the findings subset");
    }
    return out;
}

} // namespace medpipe
