#include <doctest.h>

#include <sstream>

#include "medpipe/digest.hpp"
#include "medpipe/fsutil.hpp"
#include "medpipe/test_engine.hpp"
#include "medpipe/volume.hpp"
#include "medpipe/workspace.hpp"
#include "test_support.hpp"

using namespace medpipe;

namespace {

int error_count(const std::vector<ValidationIssue>& issues) {
    int n = 0;
    for (const auto& issue : issues) n += issue.severity == Severity::Error;
    return n;
}

bool has_error_at(const std::vector<ValidationIssue>& issues, const std::string& path) {
    for (const auto& issue : issues) {
        if (issue.severity == Severity::Error && issue.path == path) return true;
    }
    return false;
}

// four-case synthetic cohort: ramp volumes so the 300 threshold bisects them
void write_cohort(const std::filesystem::path& dir, int cases = 4) {
    for (int c = 0; c < cases; ++c) {
        VolumeGrid g = VolumeGrid::make({6, 6, 6}, VoxelType::I16);
        for (std::size_t i = 0; i < g.voxels.size(); ++i) {
            g.voxels[i] = double((i * 7 + std::size_t(c) * 13) % 600);
        }
        write_nifti(g, dir / ("case" + std::to_string(c) + ".nii.gz"));
    }
}

} // namespace

TEST_CASE("scaffold then validate: zero errors, warnings allowed") {
    TempDir tmp;
    scaffold_model("demo", tmp / "demo", false);
    Workspace workspace{tmp / "demo"};
    auto issues = validate_workspace(workspace, SegmentRegistry::builtin());
    CHECK(error_count(issues) == 0);
    CHECK(workspace.name() == "demo");
}

TEST_CASE("scaffolded recipe carries all five mandatory template lines") {
    TempDir tmp;
    scaffold_model("mymodel", tmp / "ws", false);
    std::string recipe = fs::read_text(tmp.path() / "ws" / "Dockerfile");
    CHECK(recipe.find("FROM mhubai/base:latest") != std::string::npos);
    CHECK(recipe.find("ARG MHUB_MODELS_REPO") != std::string::npos);
    CHECK(recipe.find("RUN buildutils/import_mhub_model.sh mymodel ${MHUB_MODELS_REPO}") !=
          std::string::npos);
    CHECK(recipe.find("ENTRYPOINT [\"mhub.run\"]") != std::string::npos);
    CHECK(recipe.find("CMD [\"--workflow\", \"default\"]") != std::string::npos);
}

TEST_CASE("scaffold refuses a non-empty directory without force") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    CHECK(error_code_of([&] { scaffold_model("demo", tmp / "ws", false); }) == "NonEmptyDir");
    scaffold_model("demo", tmp / "ws", true); // force succeeds
}

TEST_CASE("removing a mandatory recipe line produces a named error") {
    struct Case {
        const char* line_fragment;
        const char* issue_path;
    };
    const Case cases[] = {
        {"FROM mhubai/base:latest", "$.recipe.base_image"},
        {"ARG MHUB_MODELS_REPO", "$.recipe.models_repo_arg"},
        {"RUN buildutils/import_mhub_model.sh", "$.recipe.import_model"},
        {"ENTRYPOINT [\"mhub.run\"]", "$.recipe.entrypoint"},
        {"CMD [\"--workflow\", \"default\"]", "$.recipe.default_cmd"},
    };
    for (const auto& c : cases) {
        TempDir tmp;
        scaffold_model("demo", tmp / "ws", false);
        Workspace workspace{tmp / "ws"};
        std::string recipe = fs::read_text(workspace.recipe_path());
        std::string output;
        std::istringstream in(recipe);
        std::string line;
        while (std::getline(in, line)) {
            if (line.find(c.line_fragment) == std::string::npos) output += line + "\n";
        }
        fs::write_text(workspace.recipe_path(), output);
        auto issues = validate_workspace(workspace, SegmentRegistry::builtin());
        CAPTURE(c.issue_path);
        CHECK(has_error_at(issues, c.issue_path));
    }
}

TEST_CASE("removing the default workflow produces a named error") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    Workspace workspace{tmp / "ws"};
    std::filesystem::remove(workspace.workflow_path("default"));
    auto issues = validate_workspace(workspace, SegmentRegistry::builtin());
    CHECK(has_error_at(issues, "$.workflows.default"));
}

TEST_CASE("broken meta.json and broken workflows surface as issues") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    Workspace workspace{tmp / "ws"};
    fs::write_text(workspace.meta_path(), "{not json");
    fs::write_text(workspace.workflow_path("broken"), "execute: []");
    auto issues = validate_workspace(workspace, SegmentRegistry::builtin());
    CHECK(has_error_at(issues, "$.meta"));
    CHECK(has_error_at(issues, "$.workflows.broken"));
}

TEST_CASE("container run command differs only in the model token") {
    std::string a = container_run_command("model_one");
    std::string b = container_run_command("model_two");
    std::istringstream sa(a), sb(b);
    std::vector<std::string> ta, tb;
    std::string token;
    while (sa >> token) ta.push_back(token);
    while (sb >> token) tb.push_back(token);
    REQUIRE(ta.size() == tb.size());
    int differing = 0;
    std::size_t differing_index = 0;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i] != tb[i]) {
            ++differing;
            differing_index = i;
        }
    }
    CHECK(differing == 1);
    CHECK(ta[differing_index].find("model_one") != std::string::npos);
    CHECK(a.find(kContainerInputDir) != std::string::npos);
    CHECK(a.find(kContainerOutputDir) != std::string::npos);
}

TEST_CASE("workspace registry includes the scaffolded module stub") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    ModuleRegistry registry = workspace_registry({tmp / "ws"}, SegmentRegistry::builtin());
    CHECK(registry.find("CopyRunner") != nullptr);
    CHECK(registry.find("ThresholdRunner") != nullptr);
}

TEST_CASE("workflow '-' is read from the provided stream") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    Workspace workspace{tmp / "ws"};
    ModuleRegistry registry = workspace_registry(workspace, SegmentRegistry::builtin());
    std::istringstream custom(
        "execute:\n"
        "  - {module: FileSystemImporter, pattern: \"*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n");
    Workflow w = load_workspace_workflow(workspace, "-", registry, &custom);
    CHECK(w.steps.size() == 1);
    CHECK(w.name == "custom");

    CHECK(error_code_of([&] {
              load_workspace_workflow(workspace, "nonexistent", registry, nullptr);
          }) == "UnknownWorkflow");
}

TEST_CASE("reproducibility self-test on the scaffolded demo passes") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    Workspace workspace{tmp / "ws"};
    write_cohort(workspace.dir / "data" / "sample");

    // produce the reference by running the default workflow once
    ModuleRegistry registry = workspace_registry(workspace, SegmentRegistry::builtin());
    Workflow workflow = load_workspace_workflow(workspace, "default", registry, nullptr);
    ExecuteOptions exec;
    exec.input_dir = workspace.dir / "data" / "sample";
    exec.output_dir = workspace.dir / "data" / "reference";
    RunLog log = execute_workflow(workflow, exec, registry);
    REQUIRE(exit_code_for(log) == 0);

    TestOptions options;
    options.output_dir = tmp / "test-out";
    TestReport report = run_reproducibility_test(workspace, options);
    CHECK(report.verdict == Verdict::Pass);
    CHECK(report.files_checked == 4);
    for (const auto& entry : report.compared) {
        REQUIRE(entry.segmentation.has_value());
        for (const auto& row : entry.segmentation->segments) CHECK(row.dice == 1.0);
    }
    CHECK(std::filesystem::exists(tmp.path() / "test-out" / "report.yml"));

    // report round-trips through its YAML file
    TestReport back =
        report_from_yaml(fs::read_text(tmp.path() / "test-out" / "report.yml"));
    CHECK(back == report);
}

TEST_CASE("an extra reference file is reported as a deviation") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    Workspace workspace{tmp / "ws"};
    write_cohort(workspace.dir / "data" / "sample");
    ModuleRegistry registry = workspace_registry(workspace, SegmentRegistry::builtin());
    Workflow workflow = load_workspace_workflow(workspace, "default", registry, nullptr);
    ExecuteOptions exec;
    exec.input_dir = workspace.dir / "data" / "sample";
    exec.output_dir = workspace.dir / "data" / "reference";
    REQUIRE(exit_code_for(execute_workflow(workflow, exec, registry)) == 0);
    fs::write_text(workspace.dir / "data" / "reference" / "extra.txt", "only here");

    TestOptions options;
    options.output_dir = tmp / "test-out";
    TestReport report = run_reproducibility_test(workspace, options);
    CHECK(report.verdict == Verdict::Deviation);
    CHECK(report.missing == std::vector<std::string>{"extra.txt"});
    CHECK(exit_code_for(report) == 5);
}

TEST_CASE("a failing test run yields verdict=error with the log excerpt") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    Workspace workspace{tmp / "ws"};
    // empty sample: the importer creates zero instances -> run exit 4 -> error
    TestOptions options;
    options.output_dir = tmp / "test-out";
    TestReport report = run_reproducibility_test(workspace, options);
    CHECK(report.verdict == Verdict::Error);
    CHECK_FALSE(report.error_message.empty());
    CHECK(exit_code_for(report) == 3);
    // the report file still round-trips
    TestReport back = report_from_yaml(fs::read_text(tmp.path() / "test-out" / "report.yml"));
    CHECK(back == report);
}

TEST_CASE("run_reproducibility_test requires test.yml") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    std::filesystem::remove(tmp.path() / "ws" / "test.yml");
    TestOptions options;
    options.output_dir = tmp / "out";
    CHECK(error_code_of([&] { run_reproducibility_test({tmp / "ws"}, options); }) ==
          "SchemaError");
}

TEST_CASE("a threshold override shifts the mask and is flagged with the expected dice") {
    TempDir tmp;
    scaffold_model("demo", tmp / "ws", false);
    Workspace workspace{tmp / "ws"};

    // one case with a known value histogram
    VolumeGrid g = VolumeGrid::make({8, 8, 8}, VoxelType::I16);
    for (std::size_t i = 0; i < g.voxels.size(); ++i) g.voxels[i] = double(i % 512);
    write_nifti(g, workspace.dir / "data" / "sample" / "case0.nii.gz");

    ModuleRegistry registry = workspace_registry(workspace, SegmentRegistry::builtin());
    Workflow workflow = load_workspace_workflow(workspace, "default", registry, nullptr);
    ExecuteOptions exec;
    exec.input_dir = workspace.dir / "data" / "sample";
    exec.output_dir = workspace.dir / "data" / "reference";
    REQUIRE(exit_code_for(execute_workflow(workflow, exec, registry)) == 0);

    TestOptions options;
    options.output_dir = tmp / "test-out";
    options.overrides = {"ThresholdRunner.threshold=350"};
    TestReport report = run_reproducibility_test(workspace, options);
    CHECK(report.verdict == Verdict::Deviation);
    REQUIRE(report.compared.size() == 1);
    REQUIRE(report.compared[0].segmentation.has_value());
    REQUIRE(report.compared[0].segmentation->segments.size() == 1);

    // voxel-count oracle: reference mask >=300, generated mask >=350
    long long ref_count = 0, gen_count = 0, overlap = 0;
    for (std::size_t i = 0; i < g.voxels.size(); ++i) {
        bool ref = g.voxels[i] >= 300;
        bool gen = g.voxels[i] >= 350;
        ref_count += ref;
        gen_count += gen;
        overlap += ref && gen;
    }
    double expected = 2.0 * double(overlap) / double(gen_count + ref_count);
    CHECK(report.compared[0].segmentation->segments[0].dice == expected);
    CHECK(report.compared[0].segmentation->flagged.size() == 1);
}
