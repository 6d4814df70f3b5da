#include "medpipe/modules.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

#include <yaml-cpp/yaml.h>

#include "medpipe/csv.hpp"
#include "medpipe/dicom.hpp"
#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"
#include "medpipe/subprocess.hpp"
#include "medpipe/volume.hpp"
#include "medpipe/yaml_json.hpp"

namespace medpipe {

namespace {

using nlohmann::json;
namespace stdfs = std::filesystem;

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return s;
}

// ---------------------------------------------------------------- importers

void run_dicom_importer(ModuleCall& call) {
    bool link_mode = call.param_bool("link");
    std::vector<stdfs::path> files;
    for (const auto& rel : fs::list_files(call.input_dir())) {
        files.push_back(call.input_dir() / rel);
    }
    auto grouped = dicom::group_series(files);
    for (const auto& skip : grouped.skipped) {
        call.note("skipped " + skip.path.string() + " (" + skip.error + ")");
    }
    for (const auto& series : grouped.groups) {
        std::map<std::string, std::string> attributes{
            {"SeriesInstanceUID", series.series_uid},
            {"StudyInstanceUID", series.study_uid},
            {"Modality", series.modality},
            {"file_count", std::to_string(series.files.size())},
        };
        Instance& instance = call.graph().create_instance(series.series_uid, attributes);
        SemanticType type;
        type.file_type = FileType::Dicom;
        if (!series.modality.empty()) {
            type.attributes.emplace_back("mod", lower(series.modality));
        }
        DataHandle& handle = call.graph().register_output(instance, type, "dicom",
                                                          call.module_name());
        stdfs::create_directories(handle.path);
        int index = 0;
        for (const auto& src : series.files) {
            char name[32];
            std::snprintf(name, sizeof(name), "%06d.dcm", ++index);
            auto dst = handle.path / name;
            std::error_code ec;
            if (link_mode) {
                stdfs::create_hard_link(src, dst, ec);
                if (ec) stdfs::copy_file(src, dst, stdfs::copy_options::overwrite_existing);
            } else {
                stdfs::copy_file(src, dst, stdfs::copy_options::overwrite_existing);
            }
        }
        call.confirm(handle);
    }
    if (grouped.groups.empty()) call.note("no DICOM series found in input directory");
}

void run_filesystem_importer(ModuleCall& call) {
    std::string pattern = call.param_string("pattern");
    std::string descriptor_text = call.param_string("descriptor");
    std::string id_source = call.param_string("id_source");
    SemanticType type = parse_descriptor(descriptor_text);

    int matches = 0;
    for (const auto& rel : fs::list_files(call.input_dir())) {
        if (!fs::glob_match(pattern, rel)) continue;
        ++matches;
        stdfs::path src = call.input_dir() / rel;
        std::string id = id_source == "filename" ? src.filename().string() : fs::stem_of(src);
        std::string unique = id;
        for (int n = 2; call.graph().find_instance(unique); ++n) {
            unique = id + "-" + std::to_string(n);
        }
        Instance& instance = call.graph().create_instance(
            unique, {{"filename", src.filename().string()}, {"relpath", rel}});
        call.graph().add_existing(instance, src, type, call.module_name());
    }
    if (matches == 0) call.note("pattern \"" + pattern + "\" matched no files");
}

// ------------------------------------------------------------------ filter

void run_instance_filter(ModuleCall& call) {
    Instance& instance = call.require_instance();
    std::string attribute = call.param_string("attribute");
    std::string require_file = call.param_string("require_file");
    if (attribute.empty() == require_file.empty()) {
        fail("SchemaError",
             "InstanceFilter needs exactly one of `attribute` or `require_file`");
    }
    if (!attribute.empty()) {
        auto allowed = call.param_string_list("values");
        const std::string* actual = instance.attribute(attribute);
        bool keep = actual && std::find(allowed.begin(), allowed.end(), *actual) != allowed.end();
        if (!keep) {
            instance.mark_skipped("attribute " + attribute + "=" +
                                  (actual ? *actual : std::string("<missing>")) +
                                  " not in allowed set");
        }
    } else {
        if (call.inputs(require_file).empty()) {
            instance.mark_skipped("no file matching " + require_file);
        }
    }
}

// --------------------------------------------------------- threshold runner

Module make_threshold_runner(SegmentRegistry segdb) {
    ModuleDescriptor desc;
    desc.name = "ThresholdRunner";
    desc.category = ModuleCategory::Runner;
    desc.scope = ModuleScope::PerInstance;
    desc.params = {
        {"threshold", "number", nullptr, "voxels >= threshold become foreground"},
        {"roi", "string", json("BODY"), "segment id assigned to the mask"},
    };
    desc.inputs = {"nifti:mod=ct"};
    desc.outputs = {{"nifti:mod=seg:roi={roi}", "seg.nii.gz"}};

    auto run = [segdb = std::move(segdb)](ModuleCall& call) {
        Instance& instance = call.require_instance();
        double threshold = call.param_number("threshold");
        std::string roi = call.param_string("roi");
        segdb.lookup(roi); // UnknownSegmentId with hints

        auto handles = call.inputs("nifti:mod=ct");
        if (handles.empty()) fail("MissingInput", "no input matching nifti:mod=ct");
        if (handles.size() > 1) {
            fail("AmbiguousInput", std::to_string(handles.size()) +
                                       " inputs match nifti:mod=ct, expected exactly one");
        }
        VolumeGrid image = read_nifti(handles[0].path);
        VolumeGrid mask = image;
        mask.datatype = VoxelType::U8;
        std::uint64_t foreground = 0;
        for (auto& v : mask.voxels) {
            bool set = v >= threshold;
            foreground += set;
            v = set ? 1.0 : 0.0;
        }
        DataHandle& out = call.output(instance, "nifti:mod=seg:roi=" + roi, "seg.nii.gz");
        write_nifti(mask, out.path);
        call.confirm(out);
        instance.publish("threshold", threshold);
        instance.publish("threshold_voxels", foreground);
    };
    return {std::move(desc), std::move(run)};
}

// ---------------------------------------------------------- report exporter

json lookup_field_source(const Instance& instance, const std::string& source) {
    if (const std::string* attr = instance.attribute(source)) return *attr;
    if (instance.published().contains(source)) return instance.published().at(source);
    return nullptr;
}

std::string field_to_csv(const json& value) {
    if (value.is_null()) return "";
    return scalar_to_string(value);
}

void run_report_exporter(ModuleCall& call) {
    auto fields = call.param_string_list("fields");
    std::string format = call.param_string("format");
    std::string basename = call.param_string("basename");
    if (format != "json" && format != "csv" && format != "both") {
        fail("SchemaError", "format must be json, csv, or both");
    }

    std::vector<std::pair<std::string, std::string>> columns; // label, source
    for (const auto& field : fields) {
        auto eq = field.find('=');
        if (eq == std::string::npos) {
            columns.emplace_back(field, field);
        } else {
            columns.emplace_back(field.substr(0, eq), field.substr(eq + 1));
        }
    }

    std::string csv_text;
    {
        std::vector<std::string> header;
        for (const auto& [label, source] : columns) header.push_back(label);
        csv_text += csv::format_row(header);
    }

    for (Instance* instance : call.graph().active_instances()) {
        nlohmann::ordered_json doc;
        std::vector<std::string> row;
        for (const auto& [label, source] : columns) {
            json value = lookup_field_source(*instance, source);
            if (value.is_null()) {
                call.note(instance->id() + ": no value for \"" + source + "\"");
            }
            doc[label] = value;
            row.push_back(field_to_csv(value));
        }
        csv_text += csv::format_row(row);
        if (format == "json" || format == "both") {
            DataHandle& handle = call.output(*instance, "json:mod=report", basename + ".json");
            fs::write_text(handle.path, doc.dump(2) + "\n");
            call.confirm(handle);
        }
    }
    if (format == "csv" || format == "both") {
        fs::write_text(call.output_dir() / (basename + ".csv"), csv_text);
    }
}

// ------------------------------------------------------------ data organizer

std::string resolve_target_pattern(const std::string& pattern, const Instance& instance,
                                   const stdfs::path& source) {
    std::string out;
    std::size_t i = 0;
    while (i < pattern.size()) {
        if (pattern[i] == '{') {
            auto close = pattern.find('}', i);
            if (close == std::string::npos) {
                fail("UnresolvablePlaceholder", "unterminated placeholder in \"" + pattern + "\"");
            }
            std::string name = pattern.substr(i + 1, close - i - 1);
            if (name == "basename") {
                out += source.filename().string();
            } else if (const std::string* attr = instance.attribute(name)) {
                out += *attr;
            } else {
                fail("UnresolvablePlaceholder", "instance " + instance.id() +
                                                    " has no attribute \"" + name + "\"");
            }
            i = close + 1;
        } else {
            out += pattern[i++];
        }
    }
    return out;
}

void run_data_organizer(ModuleCall& call) {
    Instance& instance = call.require_instance();
    bool overwrite = call.param_bool("overwrite");
    json rules = call.param("rules");

    for (const auto& rule : rules) {
        std::string source_query, target_pattern;
        if (rule.is_object()) {
            if (!rule.contains("source") || !rule.contains("target")) {
                fail("SchemaError", "organizer rule needs `source` and `target`");
            }
            source_query = rule.at("source").get<std::string>();
            target_pattern = rule.at("target").get<std::string>();
        } else if (rule.is_string()) {
            std::string text = rule.get<std::string>();
            auto arrow = text.find("=>");
            if (arrow == std::string::npos) {
                fail("SchemaError", "string rule must be \"<query> => <target>\"");
            }
            auto trim = [](std::string s) {
                while (!s.empty() && s.front() == ' ') s.erase(s.begin());
                while (!s.empty() && s.back() == ' ') s.pop_back();
                return s;
            };
            source_query = trim(text.substr(0, arrow));
            target_pattern = trim(text.substr(arrow + 2));
        } else {
            fail("SchemaError", "organizer rules must be maps or strings");
        }
        if (target_pattern.empty() || target_pattern.front() == '/') {
            fail("SchemaError", "organizer target must be a relative path");
        }

        for (const auto& handle : call.inputs(instance, source_query)) {
            std::string target = resolve_target_pattern(target_pattern, instance, handle.path);
            stdfs::path dst = call.output_dir() / target;
            if (stdfs::exists(dst) && !overwrite) {
                call.note("refusing to overwrite " + target + " (overwrite=false)");
                continue;
            }
            stdfs::create_directories(dst.parent_path());
            if (stdfs::is_directory(handle.path)) {
                // directory handles (e.g. sorted DICOM series) copy as a tree
                stdfs::copy(handle.path, dst,
                            stdfs::copy_options::recursive |
                                stdfs::copy_options::overwrite_existing);
            } else {
                stdfs::copy_file(handle.path, dst, stdfs::copy_options::overwrite_existing);
            }
        }
    }
}

// --------------------------------------------------- external command runner

struct ArgvToken {
    enum class Kind { Literal, Input, Output, Param } kind = Kind::Literal;
    std::string text;      // literal text or query/param name
    std::string basename;  // outputs only
};

// One argv element expands to literal text with embedded tokens, except the
// whole-element {input:...*} list form.
struct ArgvElement {
    std::vector<ArgvToken> parts;
    bool is_list = false;
    std::string list_query;
};

ArgvElement parse_argv_element(const std::string& text) {
    ArgvElement element;
    // Whole-element list expansion: {input:QUERY*}
    if (text.starts_with("{input:") && text.ends_with("*}") && text.find('}') == text.size() - 1) {
        element.is_list = true;
        element.list_query = text.substr(7, text.size() - 9);
        return element;
    }
    std::size_t i = 0;
    std::string literal;
    auto flush_literal = [&] {
        if (!literal.empty()) {
            element.parts.push_back({ArgvToken::Kind::Literal, literal, ""});
            literal.clear();
        }
    };
    while (i < text.size()) {
        bool token = false;
        for (std::string_view prefix : {"{input:", "{output:", "{param:"}) {
            if (text.compare(i, prefix.size(), prefix) != 0) continue;
            auto close = text.find('}', i);
            if (close == std::string::npos) {
                fail("SchemaError", "unterminated substitution token in \"" + text + "\"");
            }
            std::string body = text.substr(i + prefix.size(), close - i - prefix.size());
            flush_literal();
            if (prefix == "{input:") {
                if (body.ends_with("*")) {
                    fail("SchemaError",
                         "list-expansion input token must be the whole argv element");
                }
                element.parts.push_back({ArgvToken::Kind::Input, body, ""});
            } else if (prefix == "{output:") {
                auto last_colon = body.rfind(':');
                if (last_colon == std::string::npos || last_colon + 1 >= body.size()) {
                    fail("SchemaError",
                         "output token must be {output:<descriptor>:<basename>}");
                }
                element.parts.push_back({ArgvToken::Kind::Output, body.substr(0, last_colon),
                                         body.substr(last_colon + 1)});
            } else {
                element.parts.push_back({ArgvToken::Kind::Param, body, ""});
            }
            i = close + 1;
            token = true;
            break;
        }
        if (!token) literal += text[i++];
    }
    flush_literal();
    return element;
}

struct RunnerSpec {
    std::vector<std::string> argv;
    int expected_exit = 0;
    double timeout_seconds = 0; // <= 0: no timeout
};

Module make_external_command_module(ModuleDescriptor desc, RunnerSpec spec) {
    // Validate the template against the declared interface up front.
    int output_tokens = 0;
    for (const auto& raw : spec.argv) {
        ArgvElement element = parse_argv_element(raw);
        for (const auto& part : element.parts) {
            if (part.kind == ArgvToken::Kind::Output) {
                ++output_tokens;
                parse_descriptor(part.text);
                bool declared = std::any_of(
                    desc.outputs.begin(), desc.outputs.end(), [&](const OutputSpec& o) {
                        return o.descriptor == part.text && o.basename == part.basename;
                    });
                if (!declared) desc.outputs.push_back({part.text, part.basename});
            } else if (part.kind == ArgvToken::Kind::Input) {
                parse_query(part.text);
                if (std::find(desc.inputs.begin(), desc.inputs.end(), part.text) ==
                    desc.inputs.end()) {
                    desc.inputs.push_back(part.text);
                }
            } else if (part.kind == ArgvToken::Kind::Param) {
                if (!desc.param(part.text)) {
                    fail("SchemaError", desc.name + ": param token {param:" + part.text +
                                            "} names an undeclared parameter");
                }
            }
        }
        if (element.is_list) {
            parse_query(element.list_query);
            if (std::find(desc.inputs.begin(), desc.inputs.end(), element.list_query) ==
                desc.inputs.end()) {
                desc.inputs.push_back(element.list_query);
            }
        }
    }
    if (output_tokens == 0) {
        fail("SchemaError", desc.name + ": argv template declares no {output:...} token");
    }

    auto run = [spec, name = desc.name](ModuleCall& call) {
        Instance& instance = call.require_instance();
        std::vector<std::string> argv;
        std::vector<DataHandle*> outputs;

        auto resolve_single = [&](const std::string& query) -> std::string {
            auto handles = call.inputs(query);
            if (handles.empty()) fail("MissingInput", "no input matching " + query);
            if (handles.size() > 1) {
                fail("AmbiguousInput", std::to_string(handles.size()) + " inputs match " +
                                           query + ", expected exactly one");
            }
            return handles[0].path.string();
        };

        for (const auto& raw : spec.argv) {
            ArgvElement element = parse_argv_element(raw);
            if (element.is_list) {
                auto handles = call.inputs(element.list_query);
                if (handles.empty()) {
                    fail("MissingInput", "no input matching " + element.list_query);
                }
                for (const auto& handle : handles) argv.push_back(handle.path.string());
                continue;
            }
            std::string value;
            for (const auto& part : element.parts) {
                switch (part.kind) {
                    case ArgvToken::Kind::Literal: value += part.text; break;
                    case ArgvToken::Kind::Input: value += resolve_single(part.text); break;
                    case ArgvToken::Kind::Output: {
                        DataHandle& handle =
                            call.output(instance, part.text, part.basename);
                        value += handle.path.string();
                        if (std::find(outputs.begin(), outputs.end(), &handle) ==
                            outputs.end()) {
                            outputs.push_back(&handle);
                        }
                        break;
                    }
                    case ArgvToken::Kind::Param:
                        value += call.param_string(part.text);
                        break;
                }
            }
            argv.push_back(std::move(value));
        }

        stdfs::path instance_dir = call.graph().instance_dir(instance);
        stdfs::path module_dir = instance_dir / sanitize_path_component(name);
        stdfs::create_directories(module_dir);

        SubprocessResult result =
            run_subprocess(argv, instance_dir, module_dir / "stdout.log",
                           module_dir / "stderr.log", spec.timeout_seconds);
        if (result.timed_out) {
            fail("CommandFailed", name + " timed out after " +
                                      std::to_string(spec.timeout_seconds) + "s");
        }
        if (result.exit_code != spec.expected_exit) {
            fail("CommandFailed", name + " exited with " + std::to_string(result.exit_code) +
                                      " (expected " + std::to_string(spec.expected_exit) + ")");
        }
        for (DataHandle* handle : outputs) call.confirm(*handle);

        for (const auto& values_path :
             {module_dir / "values.json", instance_dir / "values.json"}) {
            if (!stdfs::exists(values_path)) continue;
            json values = json::parse(fs::read_text(values_path), nullptr, false);
            if (!values.is_object()) {
                call.note("ignoring malformed " + values_path.string());
                continue;
            }
            for (auto it = values.begin(); it != values.end(); ++it) {
                instance.publish(it.key(), it.value());
            }
            break;
        }
    };
    return {std::move(desc), std::move(run)};
}

} // namespace

ModuleRegistry builtin_registry(const SegmentRegistry& segdb) {
    ModuleRegistry registry;

    {
        ModuleDescriptor desc;
        desc.name = "DicomImporter";
        desc.category = ModuleCategory::Importer;
        desc.scope = ModuleScope::PerRun;
        desc.params = {{"link", "bool", json(false), "hard-link instead of copying files"}};
        desc.outputs = {{"dicom", "dicom"}};
        registry.add({std::move(desc), run_dicom_importer});
    }
    {
        ModuleDescriptor desc;
        desc.name = "FileSystemImporter";
        desc.category = ModuleCategory::Importer;
        desc.scope = ModuleScope::PerRun;
        desc.params = {
            {"pattern", "string", nullptr, "glob over the input directory, e.g. **/*.nii.gz"},
            {"descriptor", "string", nullptr, "semantic descriptor for matched files"},
            {"id_source", "string", json("stem"), "instance id source: stem | filename"},
        };
        registry.add({std::move(desc), run_filesystem_importer});
    }
    {
        ModuleDescriptor desc;
        desc.name = "InstanceFilter";
        desc.category = ModuleCategory::Filter;
        desc.scope = ModuleScope::PerInstance;
        desc.params = {
            {"attribute", "string", json(""), "instance attribute to test"},
            {"values", "list", json::array(), "allowed attribute values"},
            {"require_file", "string", json(""), "semantic query that must resolve nonempty"},
        };
        registry.add({std::move(desc), run_instance_filter});
    }
    registry.add(make_threshold_runner(segdb));
    {
        ModuleDescriptor desc;
        desc.name = "ReportExporter";
        desc.category = ModuleCategory::Exporter;
        desc.scope = ModuleScope::PerRun;
        desc.params = {
            {"fields", "list", nullptr, "report fields, each `Label=source` or `source`"},
            {"format", "string", json("json"), "json | csv | both"},
            {"basename", "string", json("report"), "output file stem"},
        };
        desc.outputs = {{"json:mod=report", "report.json"}};
        registry.add({std::move(desc), run_report_exporter});
    }
    {
        ModuleDescriptor desc;
        desc.name = "DataOrganizer";
        desc.category = ModuleCategory::Organizer;
        desc.scope = ModuleScope::PerInstance;
        desc.params = {
            {"rules", "list", nullptr,
             "copy rules: {source: <query>, target: <pattern>} with {attr}/{basename}"},
            {"overwrite", "bool", json(false), "overwrite existing files in the output tree"},
        };
        registry.add({std::move(desc), run_data_organizer});
    }
    return registry;
}

Module module_from_definition_text(const std::string& yaml_text) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        fail("SchemaError", "module definition parse error: " + std::string(e.what()));
    }
    if (!root.IsMap() || !root["name"]) {
        fail("SchemaError", "module definition requires a `name`");
    }

    ModuleDescriptor desc;
    desc.name = root["name"].as<std::string>();
    desc.category = root["category"] ? category_from_string(root["category"].as<std::string>())
                                     : ModuleCategory::Runner;
    desc.scope = root["scope"] ? scope_from_string(root["scope"].as<std::string>())
                               : ModuleScope::PerInstance;
    if (desc.scope != ModuleScope::PerInstance) {
        fail("SchemaError", desc.name + ": external command modules run per instance");
    }

    if (root["params"]) {
        for (const auto& node : root["params"]) {
            ParamSpec spec;
            if (!node["name"]) fail("SchemaError", desc.name + ": param without a name");
            spec.name = node["name"].as<std::string>();
            spec.type = node["type"] ? node["type"].as<std::string>() : "string";
            if (node["default"]) spec.default_value = yaml_to_json(node["default"]);
            spec.description = node["description"] ? node["description"].as<std::string>() : "";
            desc.params.push_back(std::move(spec));
        }
    }
    if (root["inputs"]) {
        for (const auto& node : root["inputs"]) {
            std::string query = node.as<std::string>();
            parse_query(query);
            desc.inputs.push_back(std::move(query));
        }
    }
    if (root["outputs"]) {
        for (const auto& node : root["outputs"]) {
            if (!node["descriptor"] || !node["basename"]) {
                fail("SchemaError", desc.name + ": outputs need descriptor and basename");
            }
            OutputSpec out{node["descriptor"].as<std::string>(),
                           node["basename"].as<std::string>()};
            parse_descriptor(out.descriptor);
            desc.outputs.push_back(std::move(out));
        }
    }

    if (!root["argv"] || !root["argv"].IsSequence()) {
        fail("SchemaError", desc.name + ": definition requires an `argv` list");
    }
    RunnerSpec spec;
    for (const auto& node : root["argv"]) spec.argv.push_back(node.as<std::string>());
    if (root["expected_exit"]) spec.expected_exit = root["expected_exit"].as<int>();
    if (root["timeout"]) spec.timeout_seconds = root["timeout"].as<double>();

    return make_external_command_module(std::move(desc), std::move(spec));
}

Module module_from_definition_file(const std::filesystem::path& file) {
    return module_from_definition_text(fs::read_text(file));
}

void load_module_definitions(ModuleRegistry& registry, const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) return;
    for (const auto& rel : fs::list_files(dir)) {
        if (rel.ends_with(".yml") || rel.ends_with(".yaml")) {
            registry.add(module_from_definition_file(dir / rel));
        }
    }
}

} // namespace medpipe
