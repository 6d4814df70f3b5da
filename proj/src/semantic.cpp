#include "medpipe/semantic.hpp"

#include <algorithm>
#include <array>
#include <cctype>

#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"

namespace medpipe {

namespace {

constexpr std::array<std::pair<FileType, std::string_view>, 10> kFileTypes{{
    {FileType::Dicom, "DICOM"},
    {FileType::Nifti, "NIFTI"},
    {FileType::Mha, "MHA"},
    {FileType::Json, "JSON"},
    {FileType::Csv, "CSV"},
    {FileType::Yaml, "YAML"},
    {FileType::Tiff, "TIFF"},
    {FileType::Png, "PNG"},
    {FileType::Txt, "TXT"},
    {FileType::Unknown, "UNKNOWN"},
}};

std::string to_upper(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return std::toupper(c); });
    return out;
}

std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return out;
}

bool valid_key(std::string_view key) {
    if (key.empty()) return false;
    if (!(key[0] >= 'a' && key[0] <= 'z')) return false;
    return std::all_of(key.begin(), key.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
    });
}

[[noreturn]] void syntax_error(std::string_view text, std::size_t pos, const std::string& reason) {
    fail("SyntaxError", "at position " + std::to_string(pos) + " in \"" + std::string(text) +
                            "\": " + reason);
}

struct Segment {
    std::string_view text;
    std::size_t pos; // offset of segment start in the input
};

std::vector<Segment> split_colon(std::string_view text) {
    std::vector<Segment> segments;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t colon = text.find(':', start);
        if (colon == std::string_view::npos) {
            segments.push_back({text.substr(start), start});
            break;
        }
        segments.push_back({text.substr(start, colon - start), start});
        start = colon + 1;
    }
    return segments;
}

// Splits `key=value` at the first '='; rejects empty keys, malformed keys,
// and '=' inside values.
std::pair<std::string, std::string> parse_pair(std::string_view text, const Segment& seg) {
    auto eq = seg.text.find('=');
    if (eq == std::string_view::npos) {
        syntax_error(text, seg.pos, "expected key=value, got \"" + std::string(seg.text) + "\"");
    }
    std::string key = to_lower(seg.text.substr(0, eq));
    std::string_view value = seg.text.substr(eq + 1);
    if (key.empty()) syntax_error(text, seg.pos, "empty attribute key");
    if (!valid_key(key)) syntax_error(text, seg.pos, "invalid attribute key \"" + key + "\"");
    if (value.find('=') != std::string_view::npos) {
        syntax_error(text, seg.pos + eq + 1, "'=' not allowed inside values");
    }
    return {std::move(key), std::string(value)};
}

void collect_placeholders(std::string_view text, std::string_view value, std::size_t pos,
                          std::vector<std::string>& out) {
    std::size_t i = 0;
    while (i < value.size()) {
        if (value[i] == '{') {
            auto close = value.find('}', i);
            if (close == std::string_view::npos) {
                syntax_error(text, pos + i, "unterminated placeholder");
            }
            std::string name(value.substr(i + 1, close - i - 1));
            if (name.empty()) syntax_error(text, pos + i, "empty placeholder name");
            if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
            i = close + 1;
        } else if (value[i] == '}') {
            syntax_error(text, pos + i, "unmatched '}'");
        } else {
            ++i;
        }
    }
}

std::string substitute_placeholders(const std::string& value, const Bindings& bindings) {
    std::string out;
    std::size_t i = 0;
    while (i < value.size()) {
        if (value[i] == '{') {
            auto close = value.find('}', i);
            if (close == std::string::npos) {
                fail("SyntaxError", "unterminated placeholder in \"" + value + "\"");
            }
            std::string name = value.substr(i + 1, close - i - 1);
            auto it = bindings.find(name);
            if (it == bindings.end()) {
                fail("UnboundPlaceholder", "no binding for placeholder {" + name + "}");
            }
            out += it->second;
            i = close + 1;
        } else {
            out += value[i++];
        }
    }
    return out;
}

} // namespace

std::string_view to_token(FileType type) {
    for (auto [ft, token] : kFileTypes) {
        if (ft == type) return token;
    }
    return "UNKNOWN";
}

FileType file_type_from_token(std::string_view token, bool* recognized) {
    std::string upper = to_upper(token);
    for (auto [ft, name] : kFileTypes) {
        if (upper == name) {
            if (recognized) *recognized = true;
            return ft;
        }
    }
    if (recognized) *recognized = false;
    return FileType::Unknown;
}

const std::string* SemanticType::find(std::string_view key) const {
    for (const auto& [k, v] : attributes) {
        if (k == key) return &v;
    }
    return nullptr;
}

SemanticType parse_descriptor(std::string_view text, std::vector<std::string>* warnings) {
    if (text.empty()) fail("SyntaxError", "empty descriptor");
    auto segments = split_colon(text);
    SemanticType out;
    bool recognized = false;
    if (segments[0].text.empty()) syntax_error(text, 0, "empty file type");
    out.file_type = file_type_from_token(segments[0].text, &recognized);
    if (!recognized && warnings) {
        warnings->push_back("unknown file type \"" + std::string(segments[0].text) +
                            "\" mapped to UNKNOWN");
    }
    for (std::size_t i = 1; i < segments.size(); ++i) {
        auto [key, value] = parse_pair(text, segments[i]);
        if (out.find(key)) syntax_error(text, segments[i].pos, "duplicate key \"" + key + "\"");
        out.attributes.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

std::string serialize(const SemanticType& type) {
    std::string out(to_token(type.file_type));
    for (const auto& [k, v] : type.attributes) {
        out += ':';
        out += k;
        out += '=';
        out += v;
    }
    return out;
}

SemanticQuery parse_query(std::string_view text, std::vector<std::string>* warnings) {
    if (text.empty()) fail("SyntaxError", "empty query");
    auto segments = split_colon(text);
    SemanticQuery out;
    if (segments[0].text.empty()) syntax_error(text, 0, "empty file type");
    if (to_upper(segments[0].text) == "ANY") {
        out.any_file_type = true;
    } else {
        bool recognized = false;
        out.file_type = file_type_from_token(segments[0].text, &recognized);
        if (!recognized && warnings) {
            warnings->push_back("unknown file type \"" + std::string(segments[0].text) +
                                "\" mapped to UNKNOWN");
        }
    }
    for (std::size_t i = 1; i < segments.size(); ++i) {
        auto [key, value] = parse_pair(text, segments[i]);
        QueryTerm term;
        term.key = std::move(key);
        if (value == "*") {
            term.op = QueryOp::Exists;
        } else {
            term.op = QueryOp::EqualsAny;
            std::size_t start = 0;
            auto value_pos = segments[i].pos + segments[i].text.find('=') + 1;
            for (;;) {
                auto bar = value.find('|', start);
                std::string alt = value.substr(start, bar == std::string::npos
                                                          ? std::string::npos
                                                          : bar - start);
                if (alt.empty()) syntax_error(text, value_pos + start, "empty alternative");
                collect_placeholders(text, alt, value_pos + start, out.placeholders);
                term.values.push_back(std::move(alt));
                if (bar == std::string::npos) break;
                start = bar + 1;
            }
        }
        out.terms.push_back(std::move(term));
    }
    return out;
}

std::string serialize(const SemanticQuery& query) {
    std::string out = query.any_file_type ? "any" : std::string(to_token(query.file_type));
    for (const auto& term : query.terms) {
        out += ':';
        out += term.key;
        out += '=';
        if (term.op == QueryOp::Exists) {
            out += '*';
        } else {
            for (std::size_t i = 0; i < term.values.size(); ++i) {
                if (i) out += '|';
                out += term.values[i];
            }
        }
    }
    return out;
}

bool query_matches(const SemanticQuery& query, const SemanticType& type,
                   const Bindings& bindings) {
    if (!query.any_file_type && query.file_type != type.file_type) return false;
    for (const auto& term : query.terms) {
        const std::string* actual = type.find(term.key);
        if (term.op == QueryOp::Exists) {
            if (!actual) return false;
            continue;
        }
        if (!actual) return false;
        bool hit = false;
        for (const auto& candidate : term.values) {
            if (substitute_placeholders(candidate, bindings) == *actual) {
                hit = true;
                break;
            }
        }
        if (!hit) return false;
    }
    return true;
}

const std::string* Instance::attribute(std::string_view key) const {
    auto it = attributes_.find(std::string(key));
    return it == attributes_.end() ? nullptr : &it->second;
}

void Instance::mark_skipped(const std::string& reason) {
    if (state_ == InstanceState::Active) {
        state_ = InstanceState::Skipped;
        failure_reason_ = reason;
    }
}

void Instance::mark_failed(const std::string& reason) {
    state_ = InstanceState::Failed;
    failure_reason_ = reason;
}

void Instance::publish(const std::string& key, nlohmann::json value) {
    published_[key] = std::move(value);
}

RunGraph::RunGraph(std::filesystem::path work_dir, std::filesystem::path input_dir)
    : work_dir_(std::move(work_dir)), input_dir_(std::move(input_dir)) {
    std::filesystem::create_directories(work_dir_);
}

Instance& RunGraph::create_instance(std::string id,
                                    std::map<std::string, std::string> attributes) {
    if (find_instance(id)) fail("DuplicateInstance", "instance id already exists: " + id);
    attributes.try_emplace("id", id);
    instances_.push_back(std::make_unique<Instance>(std::move(id), std::move(attributes)));
    return *instances_.back();
}

Instance* RunGraph::find_instance(std::string_view id) {
    for (auto& inst : instances_) {
        if (inst->id() == id) return inst.get();
    }
    return nullptr;
}

std::vector<Instance*> RunGraph::instances() {
    std::vector<Instance*> out;
    out.reserve(instances_.size());
    for (auto& inst : instances_) out.push_back(inst.get());
    return out;
}

std::vector<const Instance*> RunGraph::instances() const {
    std::vector<const Instance*> out;
    out.reserve(instances_.size());
    for (const auto& inst : instances_) out.push_back(inst.get());
    return out;
}

std::vector<Instance*> RunGraph::active_instances() {
    std::vector<Instance*> out;
    for (auto& inst : instances_) {
        if (inst->state() == InstanceState::Active) out.push_back(inst.get());
    }
    return out;
}

std::filesystem::path RunGraph::instance_dir(const Instance& instance) const {
    return work_dir_ / sanitize_path_component(instance.id());
}

DataHandle& RunGraph::register_output(Instance& instance, const SemanticType& type,
                                      const std::string& basename,
                                      const std::string& producer) {
    if (basename.empty() || basename.find('/') != std::string::npos ||
        basename.find('\\') != std::string::npos) {
        fail("InvalidBasename", "basename must be a bare filename: \"" + basename + "\"");
    }
    auto path = instance_dir(instance) / sanitize_path_component(producer) / basename;
    auto key = path.lexically_normal().generic_string();
    auto it = path_owner_.find(key);
    if (it != path_owner_.end()) {
        if (it->second.producer != producer) {
            fail("PathCollision",
                 "path " + key + " already registered by " + it->second.producer);
        }
        if (it->second.instance_id != instance.id()) {
            // sanitized instance ids can collide on disk; refuse loudly
            fail("PathCollision", "path " + key + " already registered for instance " +
                                      it->second.instance_id);
        }
        for (auto& handle : instance.handles_) {
            if (handle.path == path && handle.producer == producer) return handle;
        }
    }
    path_owner_[key] = {producer, instance.id()};
    std::filesystem::create_directories(path.parent_path());
    instance.handles_.push_back(DataHandle{path, type, producer, false});
    return instance.handles_.back();
}

DataHandle& RunGraph::add_existing(Instance& instance, std::filesystem::path path,
                                   SemanticType type, std::string producer) {
    if (!fs::path_under(path, work_dir_) && !fs::path_under(path, input_dir_)) {
        fail("PathOutsideRun",
             "handle path must be under the work or input directory: " + path.string());
    }
    auto key = path.lexically_normal().generic_string();
    auto it = path_owner_.find(key);
    if (it != path_owner_.end() && it->second.producer != producer) {
        fail("PathCollision", "path " + key + " already registered by " + it->second.producer);
    }
    path_owner_[key] = {producer, ""}; // input-side handles may be shared across instances
    bool exists = std::filesystem::exists(path);
    instance.handles_.push_back(DataHandle{std::move(path), std::move(type),
                                           std::move(producer), exists});
    return instance.handles_.back();
}

void RunGraph::confirm(DataHandle& handle) {
    if (!std::filesystem::exists(handle.path)) {
        fail("MissingOutput", "declared output does not exist: " + handle.path.string());
    }
    handle.confirmed = true;
}

std::vector<DataHandle> RunGraph::resolve_inputs(const Instance& instance,
                                                 const SemanticQuery& query,
                                                 const Bindings& bindings) const {
    std::vector<DataHandle> out;
    for (const auto& handle : instance.handles()) {
        if (handle.confirmed && query_matches(query, handle.semantic_type, bindings)) {
            out.push_back(handle);
        }
    }
    return out;
}

std::string sanitize_path_component(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                  c == '.' || c == '_' || c == '-';
        out += ok ? c : '_';
    }
    if (out.empty() || out == "." || out == "..") out = "_";
    return out;
}

} // namespace medpipe
