#include "medpipe/workspace.hpp"

#include <algorithm>
#include <istream>
#include <regex>
#include <sstream>

#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"

namespace medpipe {

namespace stdfs = std::filesystem;

std::filesystem::path Workspace::workflow_path(const std::string& name) const {
    return workflows_dir() / (name + ".yml");
}

std::string Workspace::name() const {
    if (stdfs::exists(meta_path())) {
        try {
            auto meta = parse_meta_text(fs::read_text(meta_path()));
            if (meta.is_object() && meta.contains("id") && meta["id"].is_string()) {
                return meta["id"].get<std::string>();
            }
        } catch (const Error&) {
        }
    }
    return dir.filename().string();
}

ModuleRegistry workspace_registry(const Workspace& workspace, const SegmentRegistry& segdb) {
    ModuleRegistry registry = builtin_registry(segdb);
    load_module_definitions(registry, workspace.modules_dir());
    return registry;
}

Workflow load_workspace_workflow(const Workspace& workspace, const std::string& name,
                                 const ModuleRegistry& registry, std::istream* custom_in) {
    std::string text;
    if (name == "-") {
        if (!custom_in) fail("SchemaError", "no stream provided for workflow '-'");
        std::ostringstream buffer;
        buffer << custom_in->rdbuf();
        text = buffer.str();
    } else {
        auto path = workspace.workflow_path(name);
        if (!stdfs::exists(path)) {
            fail("UnknownWorkflow", "workspace has no workflow named \"" + name + "\" (" +
                                        path.string() + ")");
        }
        text = fs::read_text(path);
    }
    Workflow workflow = load_workflow(text, registry);
    if (workflow.name.empty()) workflow.name = name == "-" ? "custom" : name;
    return workflow;
}

namespace {

std::string recipe_text(const std::string& name) {
    return "FROM mhubai/base:latest\n"
           "\n"
           "# Install system dependencies and tools required by the model.\n"
           "# RUN apt-get update && apt-get install -y --no-install-recommends <packages>\n"
           "\n"
           "ARG MHUB_MODELS_REPO\n"
           "RUN buildutils/import_mhub_model.sh " + name + " ${MHUB_MODELS_REPO}\n"
           "\n"
           "# Clone the model source code and download the trained weights.\n"
           "# RUN git clone --depth 1 <source repository> /app/src\n"
           "# RUN /app/src/download_weights.sh\n"
           "\n"
           "ENTRYPOINT [\"mhub.run\"]\n"
           "CMD [\"--workflow\", \"default\"]\n";
}

std::string default_workflow_text() {
    return "general:\n"
           "  name: default\n"
           "  description: Threshold segmentation demo (NIfTI in, organized masks out)\n"
           "execute:\n"
           "  - module: FileSystemImporter\n"
           "    pattern: \"**/*.nii.gz\"\n"
           "    descriptor: nifti:mod=ct\n"
           "  - module: ThresholdRunner\n"
           "    threshold: 300\n"
           "    roi: BODY\n"
           "  - module: DataOrganizer\n"
           "    rules:\n"
           "      - source: nifti:mod=seg\n"
           "        target: \"{id}/seg.nii.gz\"\n";
}

std::string meta_skeleton(const std::string& name) {
    nlohmann::ordered_json meta;
    meta["id"] = name;
    meta["name"] = name;
    meta["title"] = name + " demo pipeline";
    meta["summary"] = "Describe the intended use of this model.";
    meta["task"] = "segmentation";
    meta["inputs"] = nlohmann::json::array({{{"format", "nifti"},
                                             {"modality", "CT"},
                                             {"contrast", false},
                                             {"slicethickness", "5mm"},
                                             {"description", "Chest CT volume"}}});
    meta["outputs"] = nlohmann::json::array(
        {{{"type", "segmentation"},
          {"classes", nlohmann::json::array({"BODY"})},
          {"description", "Binary threshold mask"}}});
    meta["model"] = {{"architecture", "intensity threshold"},
                     {"training_data", "none (analytic baseline)"},
                     {"evaluation", "reproducibility self-test"}};
    meta["refs"] = {{"code_url", "<fill in>"},
                    {"paper_url", "<fill in>"},
                    {"citation", "<fill in>"}};
    meta["license"] = {{"code", "MIT"}, {"weights", "none"}};
    return meta.dump(2) + "\n";
}

std::string test_spec_text() {
    return "workflow: default\n"
           "sample: data/sample\n"
           "reference: data/reference\n"
           "content:\n"
           "  \"**/*.nii.gz\": segmentation\n"
           "  \"**/*.nii\": segmentation\n"
           "  \"**/*.json\": keyvalue\n"
           "  \"**/*.csv\": keyvalue\n";
}

std::string module_stub_text() {
    return "# Declarative external-command module. Adapt argv to wrap a model CLI;\n"
           "# {input:<query>} and {output:<descriptor>:<basename>} resolve to absolute\n"
           "# paths at runtime, {param:<name>} to the configured parameter value.\n"
           "name: CopyRunner\n"
           "category: runner\n"
           "scope: instance\n"
           "params:\n"
           "  - name: note\n"
           "    type: string\n"
           "    default: unused example parameter\n"
           "    description: shows how configurable parameters are declared\n"
           "inputs:\n"
           "  - nifti:mod=ct\n"
           "argv:\n"
           "  - cp\n"
           "  - \"{input:nifti:mod=ct}\"\n"
           "  - \"{output:nifti:mod=copy:copy.nii.gz}\"\n"
           "expected_exit: 0\n";
}

} // namespace

void scaffold_model(const std::string& name, const stdfs::path& dir, bool force) {
    if (stdfs::exists(dir) && !stdfs::is_directory(dir)) {
        fail("NonEmptyDir", dir.string() + " exists and is not a directory");
    }
    if (stdfs::is_directory(dir) && !stdfs::is_empty(dir) && !force) {
        fail("NonEmptyDir", dir.string() + " is not empty (use --force to overwrite)");
    }
    stdfs::create_directories(dir / "workflows");
    stdfs::create_directories(dir / "modules");
    stdfs::create_directories(dir / "data" / "sample");
    stdfs::create_directories(dir / "data" / "reference");

    fs::write_text(dir / "Dockerfile", recipe_text(name));
    fs::write_text(dir / "workflows" / "default.yml", default_workflow_text());
    fs::write_text(dir / "meta.json", meta_skeleton(name));
    fs::write_text(dir / "test.yml", test_spec_text());
    fs::write_text(dir / "modules" / "copy_runner.yml", module_stub_text());
    fs::write_text(dir / "README.md",
                   "# " + name + "\n\nRun the containerized pipeline:\n\n    " +
                       container_run_command(name) +
                       "\n\nOr on the host:\n\n    medpipe run " + dir.filename().string() +
                       " --input <dir> --output <dir>\n");
}

namespace {

struct RecipeRule {
    const char* id;
    const char* description;
    std::regex pattern;
};

const std::vector<RecipeRule>& recipe_rules() {
    static const std::vector<RecipeRule> rules = [] {
        std::vector<RecipeRule> r;
        r.push_back({"base_image", "FROM mhubai/base:latest",
                     std::regex(R"(^FROM mhubai/base:latest\s*$)", std::regex::multiline)});
        r.push_back({"models_repo_arg", "ARG MHUB_MODELS_REPO",
                     std::regex(R"(^ARG MHUB_MODELS_REPO\s*$)", std::regex::multiline)});
        r.push_back({"import_model",
                     "RUN buildutils/import_mhub_model.sh <name> ${MHUB_MODELS_REPO}",
                     std::regex(R"(^RUN buildutils/import_mhub_model\.sh \S+ \$\{MHUB_MODELS_REPO\}\s*$)",
                                std::regex::multiline)});
        r.push_back({"entrypoint", "ENTRYPOINT [\"mhub.run\"]",
                     std::regex(R"(^ENTRYPOINT \["mhub\.run"\]\s*$)", std::regex::multiline)});
        r.push_back({"default_cmd", "CMD [\"--workflow\", \"default\"]",
                     std::regex(R"(^CMD \["--workflow", "default"\]\s*$)", std::regex::multiline)});
        return r;
    }();
    return rules;
}

} // namespace

std::vector<ValidationIssue> validate_workspace(const Workspace& workspace,
                                                const SegmentRegistry& segdb) {
    std::vector<ValidationIssue> issues;

    if (!stdfs::exists(workspace.recipe_path())) {
        issues.push_back({"$.recipe", Severity::Error, "build recipe (Dockerfile) missing"});
    } else {
        std::string recipe = fs::read_text(workspace.recipe_path());
        for (const auto& rule : recipe_rules()) {
            if (!std::regex_search(recipe, rule.pattern)) {
                issues.push_back({std::string("$.recipe.") + rule.id, Severity::Error,
                                  std::string("mandatory recipe line missing: ") +
                                      rule.description});
            }
        }
    }

    if (!stdfs::exists(workspace.meta_path())) {
        issues.push_back({"$.meta", Severity::Error, "meta.json missing"});
    } else {
        try {
            auto meta = parse_meta_text(fs::read_text(workspace.meta_path()));
            for (auto issue : validate_meta(meta, segdb)) {
                issue.path = "$.meta" + issue.path.substr(1);
                issues.push_back(std::move(issue));
            }
        } catch (const Error& e) {
            issues.push_back({"$.meta", Severity::Error, e.what()});
        }
    }

    ModuleRegistry registry = builtin_registry(segdb);
    try {
        load_module_definitions(registry, workspace.modules_dir());
    } catch (const Error& e) {
        issues.push_back({"$.modules", Severity::Error, e.what()});
    }

    if (!stdfs::exists(workspace.workflow_path("default"))) {
        issues.push_back({"$.workflows.default", Severity::Error,
                          "mandatory `default` workflow missing"});
    }
    if (stdfs::is_directory(workspace.workflows_dir())) {
        for (const auto& rel : fs::list_files(workspace.workflows_dir())) {
            if (!rel.ends_with(".yml") && !rel.ends_with(".yaml")) continue;
            std::string wf_name = fs::stem_of(rel);
            try {
                load_workflow(fs::read_text(workspace.workflows_dir() / rel), registry);
            } catch (const Error& e) {
                issues.push_back({"$.workflows." + wf_name, Severity::Error, e.what()});
            }
        }
    }

    if (!stdfs::exists(workspace.test_spec_path())) {
        issues.push_back(
            {"$.test", Severity::Warning, "test.yml missing; reproducibility test unavailable"});
    }

    std::stable_sort(issues.begin(), issues.end(),
                     [](const ValidationIssue& a, const ValidationIssue& b) {
                         return a.path < b.path;
                     });
    return issues;
}

std::string container_run_command(const std::string& model_name) {
    return std::string("docker run -v $INPUT:") + kContainerInputDir + ":ro -v $OUTPUT:" +
           kContainerOutputDir + " mhubai/" + model_name;
}

} // namespace medpipe
