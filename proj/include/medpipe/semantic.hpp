#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace medpipe {

/// Closed file-type enumeration; unrecognized tokens map to Unknown.
enum class FileType { Dicom, Nifti, Mha, Json, Csv, Yaml, Tiff, Png, Txt, Unknown };

std::string_view to_token(FileType type);
FileType file_type_from_token(std::string_view token, bool* recognized = nullptr);

/// A file type plus ordered key=value attributes; the unit of semantic
/// annotation attached to every data handle.
struct SemanticType {
    FileType file_type = FileType::Unknown;
    std::vector<std::pair<std::string, std::string>> attributes;

    const std::string* find(std::string_view key) const;
    bool operator==(const SemanticType&) const = default;
};

/// Grammar: `FTYPE(':' key '=' value)*`. File type normalized to uppercase,
/// keys to lowercase; values taken verbatim (no ':' or '='). An unknown file
/// type is tolerated as Unknown, reported through `warnings`.
SemanticType parse_descriptor(std::string_view text,
                              std::vector<std::string>* warnings = nullptr);
std::string serialize(const SemanticType& type);

enum class QueryOp { EqualsAny, Exists };

struct QueryTerm {
    std::string key;
    QueryOp op = QueryOp::EqualsAny;
    std::vector<std::string> values; // literals; may embed {placeholder}

    bool operator==(const QueryTerm&) const = default;
};

/// Matching expression over SemanticType: same grammar as descriptors plus
/// `any` file type, `key=v1|v2` alternation, `key=*` existence, and `{name}`
/// placeholders inside values.
struct SemanticQuery {
    bool any_file_type = false;
    FileType file_type = FileType::Unknown;
    std::vector<QueryTerm> terms;
    std::vector<std::string> placeholders; // names seen at parse time

    bool operator==(const SemanticQuery&) const = default;
};

SemanticQuery parse_query(std::string_view text,
                          std::vector<std::string>* warnings = nullptr);
std::string serialize(const SemanticQuery& query);

using Bindings = std::map<std::string, std::string>;

/// True iff the file type matches (or the query is `any`) and every term is
/// satisfied; extra attributes on `type` never cause a mismatch. Throws
/// UnboundPlaceholder when a placeholder in the query has no binding.
bool query_matches(const SemanticQuery& query, const SemanticType& type,
                   const Bindings& bindings = {});

/// A file plus its semantic annotation. `confirmed` means the file has been
/// verified to exist on disk.
struct DataHandle {
    std::filesystem::path path;
    SemanticType semantic_type;
    std::string producer;
    bool confirmed = false;
};

enum class InstanceState { Active, Skipped, Failed };

/// One logical imaging case flowing through a workflow. Handles are
/// append-only during a run.
class Instance {
public:
    Instance(std::string id, std::map<std::string, std::string> attributes)
        : id_(std::move(id)), attributes_(std::move(attributes)) {}

    const std::string& id() const { return id_; }
    const std::map<std::string, std::string>& attributes() const { return attributes_; }
    void set_attribute(const std::string& key, const std::string& value) {
        attributes_[key] = value;
    }
    const std::string* attribute(std::string_view key) const;

    /// Append-only during a run; deque so handle references stay stable.
    const std::deque<DataHandle>& handles() const { return handles_; }

    InstanceState state() const { return state_; }
    const std::string& failure_reason() const { return failure_reason_; }
    void mark_skipped(const std::string& reason);
    void mark_failed(const std::string& reason);

    /// Values published by runner modules (values.json channel).
    const nlohmann::json& published() const { return published_; }
    void publish(const std::string& key, nlohmann::json value);

private:
    friend class RunGraph;
    std::string id_;
    std::map<std::string, std::string> attributes_;
    std::deque<DataHandle> handles_;
    InstanceState state_ = InstanceState::Active;
    std::string failure_reason_;
    nlohmann::json published_ = nlohmann::json::object();
};

/// The per-run file graph: owns instances, allocates engine-generated output
/// paths, and resolves semantic queries to handles.
class RunGraph {
public:
    RunGraph(std::filesystem::path work_dir, std::filesystem::path input_dir);

    Instance& create_instance(std::string id,
                              std::map<std::string, std::string> attributes = {});
    Instance* find_instance(std::string_view id);

    std::vector<Instance*> instances();             // creation order
    std::vector<const Instance*> instances() const;
    std::vector<Instance*> active_instances();

    /// Allocates `<work>/<instance>/<producer>/<basename>`, creates parent
    /// directories, returns an unconfirmed handle. Re-registration with the
    /// same producer is idempotent; the same path claimed by a different
    /// producer raises PathCollision.
    DataHandle& register_output(Instance& instance, const SemanticType& type,
                                const std::string& basename, const std::string& producer);

    /// Attaches an already-existing file (importer side); path must be under
    /// the input directory or the work directory.
    DataHandle& add_existing(Instance& instance, std::filesystem::path path,
                             SemanticType type, std::string producer);

    /// Marks the handle confirmed; the file must exist.
    void confirm(DataHandle& handle);

    /// All confirmed handles of `instance` matching `query`, registration order.
    std::vector<DataHandle> resolve_inputs(const Instance& instance,
                                           const SemanticQuery& query,
                                           const Bindings& bindings = {}) const;

    const std::filesystem::path& work_dir() const { return work_dir_; }
    const std::filesystem::path& input_dir() const { return input_dir_; }
    std::filesystem::path instance_dir(const Instance& instance) const;

private:
    struct PathOwner {
        std::string producer;
        std::string instance_id; // empty for shared input-side handles
    };

    std::filesystem::path work_dir_;
    std::filesystem::path input_dir_;
    std::vector<std::unique_ptr<Instance>> instances_;
    std::map<std::string, PathOwner> path_owner_; // normalized path -> owner
};

/// Path-safe form of an id or producer name: [A-Za-z0-9._-], others -> '_'.
std::string sanitize_path_component(std::string_view text);

} // namespace medpipe
