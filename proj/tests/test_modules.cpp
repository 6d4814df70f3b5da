#include <doctest.h>

#include <algorithm>

#include "dicom_fixture.hpp"
#include "medpipe/csv.hpp"
#include "medpipe/dicom.hpp"
#include "medpipe/digest.hpp"
#include "medpipe/fsutil.hpp"
#include "medpipe/modules.hpp"
#include "medpipe/volume.hpp"
#include "test_support.hpp"

using namespace medpipe;
using nlohmann::json;

namespace {

void write_ct_volume(const std::filesystem::path& path, std::array<int, 3> dims,
                     const std::vector<double>& voxels) {
    VolumeGrid g = VolumeGrid::make(dims, VoxelType::I16);
    g.voxels = voxels;
    write_nifti(g, path);
}

RunLog run(const std::string& workflow_text, const std::filesystem::path& input,
           const std::filesystem::path& output, const std::filesystem::path& work,
           ModuleRegistry* custom = nullptr) {
    ModuleRegistry local = builtin_registry(SegmentRegistry::builtin());
    ModuleRegistry& registry = custom ? *custom : local;
    Workflow w = load_workflow(workflow_text, registry);
    ExecuteOptions options{input, output};
    options.work_dir = work;
    return execute_workflow(w, options, registry);
}

} // namespace

TEST_CASE("FileSystemImporter: one instance per matched file") {
    TempDir input, output, work;
    write_ct_volume(input / "a.nii.gz", {2, 2, 2}, std::vector<double>(8, 0));
    write_ct_volume(input / "b.nii.gz", {2, 2, 2}, std::vector<double>(8, 1));
    write_ct_volume(input.path() / "deep" / "c.nii.gz", {2, 2, 2}, std::vector<double>(8, 2));
    fs::write_text(input / "notes.txt", "ignored");

    RunLog log = run("execute:\n"
                     "  - module: FileSystemImporter\n"
                     "    pattern: \"**/*.nii.gz\"\n"
                     "    descriptor: nifti:mod=ct\n",
                     input.path(), output.path(), work.path());
    CHECK(log.instances_created == 3);

    // nested glob matches everything a recursive walk finds
    int walk_count = 0;
    for (const auto& rel : fs::list_files(input.path())) {
        walk_count += rel.ends_with(".nii.gz");
    }
    CHECK(walk_count == 3);
}

TEST_CASE("FileSystemImporter: colliding stems get disambiguated ids") {
    TempDir input, output, work;
    write_ct_volume(input.path() / "d1" / "case.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));
    write_ct_volume(input.path() / "d2" / "case.nii.gz", {2, 2, 1}, std::vector<double>(4, 1));
    RunLog log = run("execute:\n"
                     "  - module: FileSystemImporter\n"
                     "    pattern: \"**/*.nii.gz\"\n"
                     "    descriptor: nifti:mod=ct\n",
                     input.path(), output.path(), work.path());
    CHECK(log.instances_created == 2);
}

TEST_CASE("FileSystemImporter: zero matches is a warning, not an error") {
    TempDir input, output, work;
    RunLog log = run("execute:\n"
                     "  - module: FileSystemImporter\n"
                     "    pattern: \"*.nii.gz\"\n"
                     "    descriptor: nifti:mod=ct\n",
                     input.path(), output.path(), work.path());
    CHECK(log.instances_created == 0);
    CHECK_FALSE(log.fatal);
    REQUIRE_FALSE(log.steps.empty());
    CHECK_FALSE(log.steps[0].notes.empty());
    CHECK(exit_code_for(log) == 4);
}

TEST_CASE("DicomImporter: groups series into instances with sorted copies") {
    TempDir input, output, work;
    // series A: 4 files (shuffled InstanceNumbers), series B: 2 files
    for (int n : {3, 1, 4, 2}) {
        auto bytes = DicomBuilder::slice("1.2.3.A", "9", "CT", n);
        fs::write_bytes(input / ("a" + std::to_string(n) + ".dcm"), bytes.data(), bytes.size());
    }
    for (int n : {2, 1}) {
        auto bytes = DicomBuilder::slice("1.2.3.B", "9", "MR", n);
        fs::write_bytes(input / ("b" + std::to_string(n) + ".dcm"), bytes.data(), bytes.size());
    }
    fs::write_text(input / "junk.bin", "not dicom");

    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    Workflow w = load_workflow("execute: [DicomImporter]", registry);
    ExecuteOptions options{input.path(), output.path()};
    options.work_dir = work.path();
    RunLog log = execute_workflow(w, options, registry);

    CHECK(log.instances_created == 2);
    CHECK_FALSE(log.steps[0].notes.empty()); // junk.bin skip note

    auto series_a = work.path() / "1.2.3.A" / "DicomImporter" / "dicom";
    REQUIRE(std::filesystem::is_directory(series_a));
    auto files = fs::list_files(series_a);
    REQUIRE(files.size() == 4);
    CHECK(files[0] == "000001.dcm");
    // copies are ordered by InstanceNumber: 000001.dcm is the n=1 fixture
    auto tags = dicom::read_dicom_tags(series_a / "000001.dcm");
    CHECK(*tags.find(dicom::kInstanceNumber) == "1");

    auto series_b = work.path() / "1.2.3.B" / "DicomImporter" / "dicom";
    CHECK(fs::list_files(series_b).size() == 2);
}

TEST_CASE("DicomImporter: instance attributes carry series metadata") {
    TempDir input, output, work;
    for (int n : {1, 2, 3, 4}) {
        auto bytes = DicomBuilder::slice("1.2.A", "9.9", "CT", n);
        fs::write_bytes(input / ("a" + std::to_string(n) + ".dcm"), bytes.data(), bytes.size());
    }
    for (int n : {1, 2}) {
        auto bytes = DicomBuilder::slice("1.2.B", "9.9", "MR", n);
        fs::write_bytes(input / ("b" + std::to_string(n) + ".dcm"), bytes.data(), bytes.size());
    }

    // 6 files, 2 series: file_count 4 and 2, surfaced through the exporter
    RunLog log = run("execute:\n"
                     "  - DicomImporter\n"
                     "  - module: ReportExporter\n"
                     "    format: csv\n"
                     "    fields: [SeriesInstanceUID, StudyInstanceUID, Modality, file_count]\n",
                     input.path(), output.path(), work.path());
    CHECK(exit_code_for(log) == 0);
    auto rows = csv::parse(fs::read_text(output / "report.csv"));
    REQUIRE(rows.size() == 3);
    CHECK(rows[1] == std::vector<std::string>{"1.2.A", "9.9", "CT", "4"});
    CHECK(rows[2] == std::vector<std::string>{"1.2.B", "9.9", "MR", "2"});
}

TEST_CASE("DataOrganizer: per-series subfolders from DICOM instances") {
    TempDir input, output, work;
    for (int n : {1, 2}) {
        auto bytes = DicomBuilder::slice("7.7.A", "9", "CT", n);
        fs::write_bytes(input / ("a" + std::to_string(n) + ".dcm"), bytes.data(), bytes.size());
        auto more = DicomBuilder::slice("7.7.B", "9", "CT", n);
        fs::write_bytes(input / ("b" + std::to_string(n) + ".dcm"), more.data(), more.size());
    }
    RunLog log = run("execute:\n"
                     "  - DicomImporter\n"
                     "  - module: DataOrganizer\n"
                     "    rules:\n"
                     "      - {source: dicom, target: \"{SeriesInstanceUID}/sorted\"}\n",
                     input.path(), output.path(), work.path());
    CHECK(exit_code_for(log) == 0);
    // the directory handle is copied as a tree into per-series subfolders
    CHECK(std::filesystem::exists(output.path() / "7.7.A" / "sorted" / "000001.dcm"));
    CHECK(std::filesystem::exists(output.path() / "7.7.B" / "sorted" / "000002.dcm"));
}

TEST_CASE("confirmed outputs exist and are nonempty at run end") {
    TempDir input, output, work;
    write_ct_volume(input / "c.nii.gz", {2, 2, 2}, std::vector<double>(8, 500));
    RunLog log = run(
        "execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - {module: ThresholdRunner, threshold: 300}\n"
        "  - module: ReportExporter\n"
        "    format: both\n"
        "    fields: [\"case=id\"]\n",
        input.path(), output.path(), work.path());
    CHECK(exit_code_for(log) == 0);
    int produced = 0;
    for (const auto& step : log.steps) {
        for (const auto& record : step.records) {
            for (const auto& path : record.produced) {
                ++produced;
                CHECK(std::filesystem::exists(path));
                if (std::filesystem::is_regular_file(path)) {
                    CHECK(std::filesystem::file_size(path) > 0);
                }
            }
        }
    }
    CHECK(produced >= 2); // mask + json report
}

TEST_CASE("InstanceFilter: attribute mode keeps matching instances") {
    TempDir input, output, work;
    write_ct_volume(input / "x.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));

    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    // toy importer creating CT, CT, MR instances
    ModuleDescriptor desc;
    desc.name = "ThreeInstances";
    desc.category = ModuleCategory::Importer;
    desc.scope = ModuleScope::PerRun;
    registry.add({desc, [](ModuleCall& call) {
                      call.graph().create_instance("i1", {{"Modality", "CT"}});
                      call.graph().create_instance("i2", {{"Modality", "CT"}});
                      call.graph().create_instance("i3", {{"Modality", "MR"}});
                  }});

    Workflow w = load_workflow("execute:\n"
                               "  - ThreeInstances\n"
                               "  - module: InstanceFilter\n"
                               "    attribute: Modality\n"
                               "    values: [CT]\n",
                               registry);
    ExecuteOptions options{input.path(), output.path()};
    options.work_dir = work.path();
    RunLog log = execute_workflow(w, options, registry);
    CHECK(log.instances_created == 3);
    CHECK(log.instances_skipped == 1);
    CHECK(log.instances_active == 2);
}

TEST_CASE("InstanceFilter: file-availability mode drops instances lacking the file") {
    TempDir input, output, work;
    write_ct_volume(input / "present.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));
    fs::write_text(input / "other.json", "{}");

    std::string text =
        "execute:\n"
        "  - module: FileSystemImporter\n"
        "    pattern: \"**/*\"\n"
        "    descriptor: unknownkind\n"
        "  - module: InstanceFilter\n"
        "    require_file: unknown\n";
    // every instance has an UNKNOWN-typed handle, so all pass ...
    TempDir work2;
    RunLog keep = run(text, input.path(), output.path(), work2.path());
    CHECK(keep.instances_skipped == 0);

    // ... but a query nothing satisfies drops them all
    std::string drop_text =
        "execute:\n"
        "  - module: FileSystemImporter\n"
        "    pattern: \"**/*\"\n"
        "    descriptor: unknownkind\n"
        "  - module: InstanceFilter\n"
        "    require_file: nifti:mod=seg\n";
    RunLog drop = run(drop_text, input.path(), output.path(), work.path());
    CHECK(drop.instances_skipped == 2);
    CHECK(exit_code_for(drop) == 4);
}

TEST_CASE("InstanceFilter: exactly one mode must be configured") {
    TempDir input, output, work;
    write_ct_volume(input / "x.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));
    RunLog log = run("execute:\n"
                     "  - module: FileSystemImporter\n"
                     "    pattern: \"**/*.nii.gz\"\n"
                     "    descriptor: nifti:mod=ct\n"
                     "  - InstanceFilter\n",
                     input.path(), output.path(), work.path());
    CHECK(log.instances_failed == 1); // per-instance SchemaError
}

TEST_CASE("ThresholdRunner: boundary rule and mask counts") {
    TempDir input, output, work;
    SUBCASE("all voxels below threshold give an all-zero mask") {
        write_ct_volume(input / "c.nii.gz", {2, 2, 2}, {10, 20, 30, 40, 50, 60, 70, 80});
        RunLog log = run("execute:\n"
                         "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
                         "  - {module: ThresholdRunner, threshold: 500}\n",
                         input.path(), output.path(), work.path());
        CHECK(exit_code_for(log) == 0);
        VolumeGrid mask = read_nifti(work.path() / "c" / "ThresholdRunner" / "seg.nii.gz");
        for (double v : mask.voxels) CHECK(v == 0.0);
    }
    SUBCASE("constant volume at the threshold value is all ones (inclusive)") {
        write_ct_volume(input / "c.nii.gz", {2, 2, 2}, std::vector<double>(8, 300));
        RunLog log = run("execute:\n"
                         "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
                         "  - {module: ThresholdRunner, threshold: 300}\n",
                         input.path(), output.path(), work.path());
        CHECK(exit_code_for(log) == 0);
        VolumeGrid mask = read_nifti(work.path() / "c" / "ThresholdRunner" / "seg.nii.gz");
        for (double v : mask.voxels) CHECK(v == 1.0);
    }
    SUBCASE("gradient volume at the median sets exactly half the voxels") {
        std::vector<double> ramp(64);
        for (int i = 0; i < 64; ++i) ramp[std::size_t(i)] = i; // 0..63
        write_ct_volume(input / "c.nii.gz", {4, 4, 4}, ramp);
        RunLog log = run("execute:\n"
                         "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
                         "  - {module: ThresholdRunner, threshold: 32}\n",
                         input.path(), output.path(), work.path());
        CHECK(exit_code_for(log) == 0);
        VolumeGrid mask = read_nifti(work.path() / "c" / "ThresholdRunner" / "seg.nii.gz");
        long long set = 0;
        for (double v : mask.voxels) set += v != 0;
        long long brute = 0;
        for (double v : ramp) brute += v >= 32;
        CHECK(set == brute);
        CHECK(set == 32);
    }
}

TEST_CASE("ThresholdRunner: mask voxel count equals brute force on random volumes") {
    TempDir input, output, work;
    std::mt19937 rng(101);
    std::vector<std::pair<std::string, long long>> expected; // id -> brute-force count
    for (int c = 0; c < 10; ++c) {
        std::array<int, 3> dims{int(2 + rng() % 31), int(2 + rng() % 31), int(2 + rng() % 31)};
        VolumeGrid g = VolumeGrid::make(dims, VoxelType::I16);
        long long count = 0;
        for (auto& v : g.voxels) {
            v = double(int(rng() % 1000) - 200);
            count += v >= 300;
        }
        std::string id = "vol" + std::to_string(c);
        write_nifti(g, input / (id + ".nii.gz"));
        expected.emplace_back(id, count);
    }
    RunLog log = run(
        "execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - {module: ThresholdRunner, threshold: 300}\n",
        input.path(), output.path(), work.path());
    REQUIRE(exit_code_for(log) == 0);
    for (const auto& [id, count] : expected) {
        VolumeGrid mask = read_nifti(work.path() / id / "ThresholdRunner" / "seg.nii.gz");
        long long set = 0;
        for (double v : mask.voxels) set += v != 0;
        CHECK(set == count);
    }
}

TEST_CASE("ThresholdRunner: unknown roi id fails the instance") {
    TempDir input, output, work;
    write_ct_volume(input / "c.nii.gz", {2, 2, 1}, std::vector<double>(4, 500));
    RunLog log = run("execute:\n"
                     "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
                     "  - {module: ThresholdRunner, threshold: 300, roi: NOT_A_SEGMENT}\n",
                     input.path(), output.path(), work.path());
    CHECK(log.instances_failed == 1);
    bool mentions = false;
    for (const auto& record : log.steps[1].records) {
        mentions |= record.message.find("UnknownSegmentId") != std::string::npos;
    }
    CHECK(mentions);
}

TEST_CASE("ThresholdRunner: mask descriptor carries the roi and resolves downstream") {
    TempDir input, output, work;
    write_ct_volume(input / "c.nii.gz", {2, 2, 1}, std::vector<double>(4, 500));
    RunLog log = run("execute:\n"
                     "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
                     "  - {module: ThresholdRunner, threshold: 300, roi: LIVER}\n"
                     "  - module: DataOrganizer\n"
                     "    rules:\n"
                     "      - {source: \"nifti:mod=seg:roi=LIVER\", target: \"{id}/{basename}\"}\n",
                     input.path(), output.path(), work.path());
    CHECK(exit_code_for(log) == 0);
    CHECK(std::filesystem::exists(output.path() / "c" / "seg.nii.gz"));
}

TEST_CASE("ReportExporter: aggregate CSV and per-instance JSON") {
    TempDir input, output, work;
    write_ct_volume(input / "k1.nii.gz", {2, 2, 1}, std::vector<double>(4, 500));
    write_ct_volume(input / "k2.nii.gz", {2, 2, 1}, std::vector<double>(4, 100));
    RunLog log = run(
        "execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - {module: ThresholdRunner, threshold: 300}\n"
        "  - module: ReportExporter\n"
        "    format: both\n"
        "    fields: [\"case=id\", \"file=filename\", \"voxels=threshold_voxels\"]\n",
        input.path(), output.path(), work.path());
    CHECK(exit_code_for(log) == 0);

    auto rows = csv::parse(fs::read_text(output / "report.csv"));
    REQUIRE(rows.size() == 3); // header + 2 instances
    CHECK(rows[0] == std::vector<std::string>{"case", "file", "voxels"});
    CHECK(rows[1] == std::vector<std::string>{"k1", "k1.nii.gz", "4"});
    CHECK(rows[2] == std::vector<std::string>{"k2", "k2.nii.gz", "0"});

    auto doc = json::parse(fs::read_text(work.path() / "k1" / "ReportExporter" / "report.json"));
    CHECK(doc.at("case") == "k1");
    CHECK(doc.at("voxels") == 4);
}

TEST_CASE("ReportExporter: column order follows configuration order") {
    TempDir input, output, work;
    write_ct_volume(input / "x.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));
    run("execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - module: ReportExporter\n"
        "    format: csv\n"
        "    fields: [\"zeta=id\", \"alpha=filename\"]\n",
        input.path(), output.path(), work.path());
    auto rows = csv::parse(fs::read_text(output / "report.csv"));
    CHECK(rows[0] == std::vector<std::string>{"zeta", "alpha"}); // configured, not sorted
}

TEST_CASE("ReportExporter: missing source becomes null with a note") {
    TempDir input, output, work;
    write_ct_volume(input / "x.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));
    RunLog log = run(
        "execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - module: ReportExporter\n"
        "    format: both\n"
        "    fields: [\"missing=does_not_exist\"]\n",
        input.path(), output.path(), work.path());
    CHECK_FALSE(log.steps[1].notes.empty());
    auto doc = json::parse(fs::read_text(work.path() / "x" / "ReportExporter" / "report.json"));
    CHECK(doc.at("missing").is_null());
    auto rows = csv::parse(fs::read_text(output / "report.csv"));
    CHECK(rows[1] == std::vector<std::string>{""});
}

TEST_CASE("DataOrganizer: per-rule copies, overwrite refusal, placeholders") {
    TempDir input, output, work;
    write_ct_volume(input / "c.nii.gz", {2, 2, 1}, std::vector<double>(4, 500));

    SUBCASE("no matching files means no copies and no error") {
        RunLog log = run(
            "execute:\n"
            "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
            "  - module: DataOrganizer\n"
            "    rules:\n"
            "      - {source: \"nifti:mod=seg\", target: \"{id}/seg.nii.gz\"}\n",
            input.path(), output.path(), work.path());
        CHECK(exit_code_for(log) == 0);
        CHECK(fs::list_files(output.path()).empty());
    }
    SUBCASE("overlapping targets: second copy refused without overwrite") {
        RunLog log = run(
            "execute:\n"
            "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
            "  - {module: ThresholdRunner, threshold: 300}\n"
            "  - module: DataOrganizer\n"
            "    rules:\n"
            "      - {source: \"nifti:mod=seg\", target: \"{id}/out.nii.gz\"}\n"
            "      - {source: \"nifti:mod=ct\", target: \"{id}/out.nii.gz\"}\n",
            input.path(), output.path(), work.path());
        CHECK(exit_code_for(log) == 0);
        REQUIRE_FALSE(log.steps.empty());
        CHECK_FALSE(log.steps[2].notes.empty()); // refusal warning
        // first rule won: the file is the mask, not the CT
        VolumeGrid v = read_nifti(output.path() / "c" / "out.nii.gz");
        CHECK(v.datatype == VoxelType::U8);
    }
    SUBCASE("unresolvable placeholder fails the instance") {
        RunLog log = run(
            "execute:\n"
            "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
            "  - module: DataOrganizer\n"
            "    rules:\n"
            "      - {source: \"nifti:mod=ct\", target: \"{SeriesInstanceUID}/x.nii.gz\"}\n",
            input.path(), output.path(), work.path());
        CHECK(log.instances_failed == 1);
    }
    SUBCASE("rerun produces a byte-identical output tree") {
        TempDir out2, work2;
        std::string text =
            "execute:\n"
            "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
            "  - {module: ThresholdRunner, threshold: 300}\n"
            "  - module: DataOrganizer\n"
            "    rules:\n"
            "      - {source: \"nifti:mod=seg\", target: \"{id}/seg.nii.gz\"}\n";
        run(text, input.path(), output.path(), work.path());
        run(text, input.path(), out2.path(), work2.path());
        CHECK(digest::sha256_tree(output.path()) == digest::sha256_tree(out2.path()));
    }
}

// ------------------------------------------------- external command modules

namespace {

std::string copy_runner_yaml() {
    return "name: CopyRunner\n"
           "category: converter\n"
           "scope: instance\n"
           "inputs: [\"nifti:mod=ct\"]\n"
           "outputs: [{descriptor: \"nifti:mod=ct2\", basename: copy.nii.gz}]\n"
           "argv: [cp, \"{input:nifti:mod=ct}\", \"{output:nifti:mod=ct2:copy.nii.gz}\"]\n";
}

} // namespace

TEST_CASE("external command: cp as an identity pipeline confirms its output") {
    TempDir input, output, work;
    write_ct_volume(input / "c.nii.gz", {2, 2, 1}, {1, 2, 3, 4});
    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    registry.add(module_from_definition_text(copy_runner_yaml()));

    RunLog log = run(
        "execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - CopyRunner\n",
        input.path(), output.path(), work.path(), &registry);
    CHECK(exit_code_for(log) == 0);
    auto copy_path = work.path() / "c" / "CopyRunner" / "copy.nii.gz";
    CHECK(std::filesystem::exists(copy_path));
    CHECK(fs::files_equal(input / "c.nii.gz", copy_path));
    // stdout/stderr captured next to the outputs
    CHECK(std::filesystem::exists(work.path() / "c" / "CopyRunner" / "stdout.log"));
}

TEST_CASE("external command: inputs are never mutated") {
    TempDir input, output, work;
    write_ct_volume(input / "c.nii.gz", {2, 2, 1}, {1, 2, 3, 4});
    std::string before = digest::sha256_file(input / "c.nii.gz");
    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    registry.add(module_from_definition_text(copy_runner_yaml()));
    run("execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - CopyRunner\n",
        input.path(), output.path(), work.path(), &registry);
    CHECK(digest::sha256_file(input / "c.nii.gz") == before);
}

TEST_CASE("external command: nonzero exit fails the instance only") {
    TempDir input, output, work;
    write_ct_volume(input / "a.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));
    write_ct_volume(input / "b.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));

    // fails only when the input path contains the victim substring
    fs::write_text(input / "script.sh",
                   "#!/bin/sh\ncase \"$1\" in *\"$3\"*) exit 1;; esac\ncp \"$1\" \"$2\"\n");
    std::filesystem::permissions(input / "script.sh",
                                 std::filesystem::perms::owner_all |
                                     std::filesystem::perms::group_read |
                                     std::filesystem::perms::others_read);

    std::string yaml =
        "name: Flaky\n"
        "category: runner\n"
        "params: [{name: victim, type: string, default: nothing}]\n"
        "argv: [\"" + (input / "script.sh").string() + "\", \"{input:nifti:mod=ct}\", "
        "\"{output:nifti:mod=out:out.nii.gz}\", \"{param:victim}\"]\n";
    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    registry.add(module_from_definition_text(yaml));

    RunLog log = run(
        "execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - {module: Flaky, victim: a.nii}\n",
        input.path(), output.path(), work.path(), &registry);
    CHECK(log.instances_failed == 1);
    CHECK(log.instances_active == 1);
    CHECK(exit_code_for(log) == 0); // b survived
    bool command_failed = false;
    for (const auto& record : log.steps[1].records) {
        command_failed |= record.message.find("CommandFailed") != std::string::npos;
    }
    CHECK(command_failed);
    CHECK(std::filesystem::exists(work.path() / "b" / "Flaky" / "out.nii.gz"));
}

TEST_CASE("external command: one subprocess per instance") {
    TempDir input, output, work;
    for (const char* name : {"x.nii.gz", "y.nii.gz", "z.nii.gz"}) {
        write_ct_volume(input / name, {2, 2, 1}, std::vector<double>(4, 0));
    }
    auto tally = work / "tally.txt";
    fs::write_text(input / "count.sh",
                   "#!/bin/sh\necho run >> \"" + tally.string() + "\"\ncp \"$1\" \"$2\"\n");
    std::filesystem::permissions(input / "count.sh", std::filesystem::perms::owner_all);

    std::string yaml = "name: Counter\n"
                       "argv: [\"" + (input / "count.sh").string() +
                       "\", \"{input:nifti:mod=ct}\", \"{output:nifti:mod=o:o.nii.gz}\"]\n";
    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    registry.add(module_from_definition_text(yaml));

    RunLog log = run(
        "execute:\n"
        "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=ct\"}\n"
        "  - Counter\n",
        input.path(), output.path(), work.path(), &registry);
    CHECK(exit_code_for(log) == 0);
    auto lines = fs::read_text(tally);
    CHECK(std::count(lines.begin(), lines.end(), '\n') == 3);
}

TEST_CASE("external command: input arity errors") {
    TempDir input, output, work;
    write_ct_volume(input / "a.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));
    write_ct_volume(input / "b.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));

    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    registry.add(module_from_definition_text(copy_runner_yaml()));

    SUBCASE("no matching input is MissingInput") {
        RunLog log = run(
            "execute:\n"
            "  - {module: FileSystemImporter, pattern: \"**/*.nii.gz\", descriptor: \"nifti:mod=mr\"}\n"
            "  - CopyRunner\n",
            input.path(), output.path(), work.path(), &registry);
        CHECK(log.instances_failed == 2);
        CHECK(log.steps[1].records[0].message.find("MissingInput") != std::string::npos);
    }
    SUBCASE("two matching inputs without list expansion is AmbiguousInput") {
        // both files into ONE instance via a custom importer
        ModuleDescriptor desc;
        desc.name = "OneInstance";
        desc.category = ModuleCategory::Importer;
        desc.scope = ModuleScope::PerRun;
        registry.add({desc, [&](ModuleCall& call) {
                          Instance& inst = call.graph().create_instance("only");
                          for (const auto& rel : fs::list_files(call.input_dir())) {
                              call.graph().add_existing(inst, call.input_dir() / rel,
                                                        parse_descriptor("nifti:mod=ct"),
                                                        "OneInstance");
                          }
                      }});
        RunLog log = run("execute: [OneInstance, CopyRunner]", input.path(), output.path(),
                         work.path(), &registry);
        CHECK(log.instances_failed == 1);
        CHECK(log.steps[1].records[0].message.find("AmbiguousInput") != std::string::npos);
    }
}

TEST_CASE("external command: list expansion and values.json publishing") {
    TempDir input, output, work;
    write_ct_volume(input / "a.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));
    write_ct_volume(input / "b.nii.gz", {2, 2, 1}, std::vector<double>(4, 0));

    // counts its path arguments and publishes the count via values.json
    fs::write_text(input / "nargs.sh",
                   "#!/bin/sh\nout=$1\nshift\nn=$#\ncp \"$1\" \"$out\"\n"
                   "echo \"{\\\"n_inputs\\\": $n}\" > values.json\n");
    std::filesystem::permissions(input / "nargs.sh", std::filesystem::perms::owner_all);

    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    ModuleDescriptor desc;
    desc.name = "OneInstance";
    desc.category = ModuleCategory::Importer;
    desc.scope = ModuleScope::PerRun;
    registry.add({desc, [&](ModuleCall& call) {
                      Instance& inst = call.graph().create_instance("only");
                      for (const auto& rel : fs::list_files(call.input_dir())) {
                          if (!rel.ends_with(".nii.gz")) continue;
                          call.graph().add_existing(inst, call.input_dir() / rel,
                                                    parse_descriptor("nifti:mod=ct"),
                                                    "OneInstance");
                      }
                  }});
    std::string yaml = "name: NArgs\n"
                       "argv: [\"" + (input / "nargs.sh").string() +
                       "\", \"{output:txt:mod=o:o.bin}\", \"{input:nifti:mod=ct*}\"]\n";
    registry.add(module_from_definition_text(yaml));

    RunLog log = run("execute:\n"
                     "  - OneInstance\n"
                     "  - NArgs\n"
                     "  - module: ReportExporter\n"
                     "    format: csv\n"
                     "    fields: [\"n=n_inputs\"]\n",
                     input.path(), output.path(), work.path(), &registry);
    CHECK(exit_code_for(log) == 0);
    auto rows = csv::parse(fs::read_text(output / "report.csv"));
    REQUIRE(rows.size() == 2);
    CHECK(rows[1][0] == "2"); // both nii handles expanded into argv
}

TEST_CASE("module definition validation") {
    CHECK(error_code_of([] {
              module_from_definition_text("name: X\nargv: [echo, hi]\n");
          }) == "SchemaError"); // no output token
    CHECK(error_code_of([] {
              module_from_definition_text(
                  "name: X\nargv: [echo, \"{param:nope}\", \"{output:txt:o.txt}\"]\n");
          }) == "SchemaError"); // undeclared param
    CHECK(error_code_of([] {
              module_from_definition_text("name: X\nscope: run\nargv: [echo, \"{output:txt:o.txt}\"]\n");
          }) == "SchemaError"); // per-run external commands unsupported
    CHECK(error_code_of([] { module_from_definition_text("argv: [x]\n"); }) == "SchemaError");

    // a valid definition derives inputs/outputs from the argv template
    Module m = module_from_definition_text(copy_runner_yaml());
    CHECK(m.descriptor.category == ModuleCategory::Converter);
    REQUIRE(m.descriptor.inputs.size() == 1);
    CHECK(m.descriptor.inputs[0] == "nifti:mod=ct");
    REQUIRE(m.descriptor.outputs.size() == 1);
    CHECK(m.descriptor.outputs[0].basename == "copy.nii.gz");
}

TEST_CASE("load_module_definitions scans a directory") {
    TempDir dir;
    fs::write_text(dir / "copy.yml", copy_runner_yaml());
    ModuleRegistry registry = builtin_registry(SegmentRegistry::builtin());
    load_module_definitions(registry, dir.path());
    CHECK(registry.find("CopyRunner") != nullptr);
}
