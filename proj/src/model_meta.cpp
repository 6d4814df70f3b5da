#include "medpipe/model_meta.hpp"

#include <algorithm>
#include <cctype>

#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"

namespace medpipe {

namespace {

using nlohmann::json;

const std::vector<std::string> kTasks{"segmentation", "prediction", "feature_extraction"};

const std::vector<std::string> kKnownTopLevel{
    "id",     "name",  "title",   "summary", "intended_use", "task",
    "inputs", "outputs", "model", "refs",    "license",      "examples"};

struct Collector {
    std::vector<ValidationIssue> issues;

    void error(std::string path, std::string message) {
        issues.push_back({std::move(path), Severity::Error, std::move(message)});
    }
    void warning(std::string path, std::string message) {
        issues.push_back({std::move(path), Severity::Warning, std::move(message)});
    }
};

bool url_shaped(const std::string& s) {
    return s.starts_with("http://") || s.starts_with("https://");
}

const json* require_key(Collector& c, const json& obj, const std::string& parent,
                        const std::string& key, json::value_t type, const char* type_name) {
    auto it = obj.find(key);
    std::string path = parent + "." + key;
    if (it == obj.end()) {
        c.error(path, "required key missing");
        return nullptr;
    }
    bool ok = it->type() == type ||
              (type == json::value_t::string && it->is_string());
    if (!ok) {
        c.error(path, std::string("expected ") + type_name);
        return nullptr;
    }
    return &*it;
}

void check_string_warn(Collector& c, const json& obj, const std::string& parent,
                       const std::string& key) {
    auto it = obj.find(key);
    std::string path = parent + "." + key;
    if (it == obj.end()) {
        c.warning(path, "recommended key missing");
    } else if (!it->is_string()) {
        c.error(path, "expected string");
    }
}

void check_url_warn(Collector& c, const json& obj, const std::string& parent,
                    const std::string& key) {
    auto it = obj.find(key);
    std::string path = parent + "." + key;
    if (it == obj.end()) {
        c.warning(path, "recommended key missing");
        return;
    }
    if (!it->is_string()) {
        c.error(path, "expected string");
        return;
    }
    if (!url_shaped(it->get<std::string>())) {
        c.warning(path, "does not look like a URL");
    }
}

} // namespace

nlohmann::json parse_meta_text(std::string_view text) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) fail("ParseError", "meta document is not valid JSON");
    return doc;
}

std::vector<ValidationIssue> validate_meta(const json& document, const SegmentRegistry& segdb) {
    Collector c;
    if (!document.is_object()) {
        c.error("$", "meta document must be a JSON object");
        return c.issues;
    }

    require_key(c, document, "$", "id", json::value_t::string, "string");
    require_key(c, document, "$", "name", json::value_t::string, "string");
    check_string_warn(c, document, "$", "title");
    if (!document.contains("summary") && !document.contains("intended_use")) {
        c.warning("$.summary", "neither summary nor intended_use present");
    }

    std::string task;
    if (const json* t = require_key(c, document, "$", "task", json::value_t::string, "string")) {
        task = t->get<std::string>();
        if (std::find(kTasks.begin(), kTasks.end(), task) == kTasks.end()) {
            c.error("$.task", "\"" + task +
                                  "\" not in {segmentation, prediction, feature_extraction}");
        }
    }

    if (const json* inputs =
            require_key(c, document, "$", "inputs", json::value_t::array, "array")) {
        if (inputs->empty()) c.error("$.inputs", "at least one input required");
        for (std::size_t i = 0; i < inputs->size(); ++i) {
            std::string path = "$.inputs[" + std::to_string(i) + "]";
            const json& input = (*inputs)[i];
            if (!input.is_object()) {
                c.error(path, "expected object");
                continue;
            }
            require_key(c, input, path, "format", json::value_t::string, "string");
            require_key(c, input, path, "modality", json::value_t::string, "string");
            if (input.contains("contrast") && !input["contrast"].is_boolean()) {
                c.error(path + ".contrast", "expected boolean");
            }
            if (input.contains("slicethickness") && !input["slicethickness"].is_string()) {
                c.error(path + ".slicethickness", "expected string");
            }
            check_string_warn(c, input, path, "description");
        }
    }

    bool any_output_classes = false;
    if (const json* outputs =
            require_key(c, document, "$", "outputs", json::value_t::array, "array")) {
        if (outputs->empty()) c.error("$.outputs", "at least one output required");
        for (std::size_t i = 0; i < outputs->size(); ++i) {
            std::string path = "$.outputs[" + std::to_string(i) + "]";
            const json& output = (*outputs)[i];
            if (!output.is_object()) {
                c.error(path, "expected object");
                continue;
            }
            require_key(c, output, path, "type", json::value_t::string, "string");
            check_string_warn(c, output, path, "description");
            if (output.contains("classes")) {
                if (!output["classes"].is_array()) {
                    c.error(path + ".classes", "expected array of segment ids");
                } else {
                    if (!output["classes"].empty()) any_output_classes = true;
                    for (std::size_t k = 0; k < output["classes"].size(); ++k) {
                        std::string cpath = path + ".classes[" + std::to_string(k) + "]";
                        const json& cls = output["classes"][k];
                        if (!cls.is_string()) {
                            c.error(cpath, "expected string segment id");
                            continue;
                        }
                        try {
                            segdb.lookup(cls.get<std::string>());
                        } catch (const Error& e) {
                            c.error(cpath, e.what());
                        }
                    }
                }
            }
        }
    }
    if (task == "segmentation" && !any_output_classes) {
        c.error("$.outputs", "segmentation models need >= 1 output with nonempty classes");
    }

    if (document.contains("model")) {
        if (!document["model"].is_object()) {
            c.error("$.model", "expected object");
        } else {
            check_string_warn(c, document["model"], "$.model", "architecture");
            check_string_warn(c, document["model"], "$.model", "training_data");
            check_string_warn(c, document["model"], "$.model", "evaluation");
        }
    } else {
        c.warning("$.model", "recommended key missing");
    }

    if (document.contains("refs")) {
        if (!document["refs"].is_object()) {
            c.error("$.refs", "expected object");
        } else {
            check_url_warn(c, document["refs"], "$.refs", "code_url");
            check_url_warn(c, document["refs"], "$.refs", "paper_url");
            check_string_warn(c, document["refs"], "$.refs", "citation");
        }
    } else {
        c.warning("$.refs", "recommended key missing");
    }

    if (const json* license =
            require_key(c, document, "$", "license", json::value_t::object, "object")) {
        check_string_warn(c, *license, "$.license", "code");
        check_string_warn(c, *license, "$.license", "weights");
    }

    if (document.contains("examples")) {
        if (!document["examples"].is_array()) {
            c.error("$.examples", "expected array");
        } else {
            for (std::size_t i = 0; i < document["examples"].size(); ++i) {
                if (!document["examples"][i].is_string()) {
                    c.error("$.examples[" + std::to_string(i) + "]", "expected string");
                }
            }
        }
    }

    for (auto it = document.begin(); it != document.end(); ++it) {
        if (std::find(kKnownTopLevel.begin(), kKnownTopLevel.end(), it.key()) ==
            kKnownTopLevel.end()) {
            c.warning("$." + it.key(), "unknown key (ignored)");
        }
    }

    std::stable_sort(c.issues.begin(), c.issues.end(),
                     [](const ValidationIssue& a, const ValidationIssue& b) {
                         return a.path < b.path;
                     });
    return c.issues;
}

bool meta_is_valid(const std::vector<ValidationIssue>& issues) {
    return std::none_of(issues.begin(), issues.end(), [](const ValidationIssue& i) {
        return i.severity == Severity::Error;
    });
}

namespace {

std::string upper(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char ch) { return std::toupper(ch); });
    return s;
}

bool matches_filter(const json& meta, const ModelFilter& filter) {
    if (filter.task && meta.value("task", "") != *filter.task) return false;
    if (filter.modality) {
        bool hit = false;
        for (const auto& input : meta.value("inputs", json::array())) {
            if (input.is_object() &&
                upper(input.value("modality", "")) == upper(*filter.modality)) {
                hit = true;
                break;
            }
        }
        if (!hit) return false;
    }
    if (filter.output_class) {
        bool hit = false;
        for (const auto& output : meta.value("outputs", json::array())) {
            if (!output.is_object()) continue;
            for (const auto& cls : output.value("classes", json::array())) {
                if (cls.is_string() && cls.get<std::string>() == *filter.output_class) {
                    hit = true;
                    break;
                }
            }
        }
        if (!hit) return false;
    }
    return true;
}

} // namespace

ModelQueryResult query_models(const std::filesystem::path& repo_dir, const ModelFilter& filter,
                              const SegmentRegistry& segdb) {
    ModelQueryResult result;
    if (filter.output_class && !segdb.find(*filter.output_class)) {
        result.warnings.push_back("filter class " + *filter.output_class +
                                  " is not a known segment id");
        return result;
    }

    std::vector<std::filesystem::path> model_dirs;
    if (std::filesystem::is_directory(repo_dir)) {
        for (const auto& entry : std::filesystem::directory_iterator(repo_dir)) {
            if (entry.is_directory()) model_dirs.push_back(entry.path());
        }
    }
    std::sort(model_dirs.begin(), model_dirs.end());

    for (const auto& dir : model_dirs) {
        auto meta_path = dir / "meta.json";
        if (!std::filesystem::exists(meta_path)) continue;
        json meta;
        try {
            meta = parse_meta_text(fs::read_text(meta_path));
        } catch (const Error& e) {
            result.warnings.push_back(dir.filename().string() + ": " + e.what());
            continue;
        }
        auto issues = validate_meta(meta, segdb);
        if (!meta_is_valid(issues)) {
            result.warnings.push_back(dir.filename().string() + ": meta.json has errors, skipped");
            continue;
        }
        if (matches_filter(meta, filter)) {
            result.models.push_back({dir.filename().string(), std::move(meta)});
        }
    }
    return result;
}

} // namespace medpipe
