// medpipe - reproducible medical-imaging pipeline runner.
//
// Subcommands: run, test, compare, validate, models, segdb, evaluate,
// scaffold. Human-facing output goes to stderr; stdout carries only the
// line-oriented results of `segdb` and `models`. Exit codes: 0 ok, 2
// usage/config error, 3 run failure, 4 no instances processed, 5 test
// deviation.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <yaml-cpp/yaml.h>

#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"
#include "medpipe/model_meta.hpp"
#include "medpipe/modules.hpp"
#include "medpipe/segdb.hpp"
#include "medpipe/stats.hpp"
#include "medpipe/subprocess.hpp"
#include "medpipe/test_engine.hpp"
#include "medpipe/volume.hpp"
#include "medpipe/workflow.hpp"
#include "medpipe/workspace.hpp"

namespace {

using namespace medpipe;
namespace stdfs = std::filesystem;

const std::set<std::string> kUsageErrorCodes{
    "SchemaError",   "ParamTypeError", "UnknownModule",    "UnknownParam",
    "UnknownWorkflow", "SyntaxError",  "UnknownSegmentId", "NotAFinding",
    "ParseError",    "NonEmptyDir",    "CsvError",         "InvalidSegmentDef",
    "InvalidSegmentId", "DuplicateSegmentId", "DuplicateModule", "UsageError"};

int exit_code_for_error(const Error& e) {
    return kUsageErrorCodes.count(e.code()) ? 2 : 3;
}

struct CommonFlags {
    bool verbose = false;
    bool debug = false;

    std::function<void(const std::string&)> sink() const {
        if (!verbose && !debug) return nullptr;
        return [](const std::string& message) { std::cerr << message << "\n"; };
    }
};

SegmentRegistry load_registry(const std::string& registry_csv) {
    if (registry_csv.empty()) return SegmentRegistry::builtin();
    return SegmentRegistry::load_csv(registry_csv);
}

// The paper-style `--config:Module.param=value` flags cannot be expressed as
// CLI11 options; they are peeled off before normal parsing.
std::vector<std::string> extract_config_overrides(std::vector<std::string>& args) {
    std::vector<std::string> overrides;
    std::vector<std::string> rest;
    for (auto& arg : args) {
        if (arg.starts_with("--config:")) {
            overrides.push_back(arg.substr(9));
        } else {
            rest.push_back(std::move(arg));
        }
    }
    args = std::move(rest);
    return overrides;
}

stdfs::path resolve_io_dir(const std::string& flag_value, const char* container_default,
                           const char* which) {
    if (!flag_value.empty()) return flag_value;
    if (stdfs::is_directory(container_default)) return container_default;
    fail("UsageError", std::string("--") + which + " is required outside a container (" +
                           container_default + " not present)");
}

int cmd_run(const std::string& workspace_dir, const std::string& workflow_name,
            const std::string& input, const std::string& output, const std::string& workdir,
            const std::vector<std::string>& overrides, const std::string& registry_csv,
            const CommonFlags& flags) {
    Workspace workspace{workspace_dir};
    SegmentRegistry segdb = load_registry(registry_csv);
    ModuleRegistry registry = workspace_registry(workspace, segdb);

    Workflow workflow =
        load_workspace_workflow(workspace, workflow_name, registry, &std::cin);
    if (!overrides.empty()) workflow = apply_overrides(workflow, overrides, registry);

    ExecuteOptions options;
    options.input_dir = resolve_io_dir(input, kContainerInputDir, "input");
    options.output_dir = resolve_io_dir(output, kContainerOutputDir, "output");
    if (!workdir.empty()) options.work_dir = workdir;
    options.keep_work = flags.debug;
    options.log = flags.sink();

    RunLog log = execute_workflow(workflow, options, registry);
    if (flags.verbose || flags.debug || log.fatal) std::cerr << summarize(log);
    int code = exit_code_for(log);
    if (code == 4) std::cerr << "no instances processed\n";
    return code;
}

int cmd_test(const std::string& workspace_dir, const std::string& output,
             const std::string& cache, double dice_threshold,
             const std::vector<std::string>& overrides, const CommonFlags& flags) {
    Workspace workspace{workspace_dir};
    TestOptions options;
    options.output_dir = output.empty() ? workspace.dir / "test_output" : stdfs::path(output);
    if (!cache.empty()) options.cache_dir = cache;
    options.dice_threshold = dice_threshold;
    options.overrides = overrides;
    options.log = flags.sink();

    TestReport report = run_reproducibility_test(workspace, options);
    std::cerr << "verdict: " << to_string(report.verdict) << " (" << report.files_checked
              << " files checked, " << report.deviations << " deviations)\n";
    return exit_code_for(report);
}

TestSpec compare_rules(const std::string& spec_file) {
    TestSpec spec;
    if (spec_file.empty()) {
        spec.content_rules = {{"**/*.nii.gz", ContentKind::Segmentation},
                              {"**/*.nii", ContentKind::Segmentation},
                              {"**/*.json", ContentKind::KeyValue},
                              {"**/*.csv", ContentKind::KeyValue}};
        return spec;
    }
    YAML::Node root;
    try {
        root = YAML::LoadFile(spec_file);
    } catch (const YAML::Exception& e) {
        fail("SchemaError", "cannot read --spec file " + spec_file + ": " + e.what());
    }
    if (root["content"]) {
        for (const auto& kv : root["content"]) {
            spec.content_rules.emplace_back(
                kv.first.as<std::string>(),
                content_kind_from_string(kv.second.as<std::string>()));
        }
    }
    return spec;
}

int cmd_compare(const std::string& generated, const std::string& reference,
                const std::string& spec_file, const std::string& report_file,
                double dice_threshold) {
    TestReport report =
        compare_directories(generated, reference, compare_rules(spec_file), dice_threshold);
    std::string yaml = report_to_yaml(report);
    if (!report_file.empty()) {
        fs::write_text(report_file, yaml);
    } else {
        std::cerr << yaml;
    }
    std::cerr << "verdict: " << to_string(report.verdict) << "\n";
    return exit_code_for(report);
}

int cmd_validate(const std::string& workspace_dir, const std::string& registry_csv) {
    Workspace workspace{workspace_dir};
    SegmentRegistry segdb = load_registry(registry_csv);
    auto issues = validate_workspace(workspace, segdb);
    int errors = 0;
    for (const auto& issue : issues) {
        bool is_error = issue.severity == Severity::Error;
        errors += is_error;
        std::cerr << (is_error ? "error" : "warning") << " at " << issue.path << ": "
                  << issue.message << "\n";
    }
    std::cerr << (errors ? "validation failed (" + std::to_string(errors) + " errors)\n"
                         : "validation passed\n");
    return errors ? 2 : 0;
}

int cmd_models(const std::string& repo_dir, const std::string& modality,
               const std::string& task, const std::string& output_class,
               const std::string& registry_csv) {
    ModelFilter filter;
    if (!modality.empty()) filter.modality = modality;
    if (!task.empty()) filter.task = task;
    if (!output_class.empty()) filter.output_class = output_class;
    auto result = query_models(repo_dir, filter, load_registry(registry_csv));
    for (const auto& warning : result.warnings) std::cerr << "warning: " << warning << "\n";
    for (const auto& entry : result.models) std::cout << entry.directory << "\n";
    return 0;
}

int cmd_segdb_lookup(const std::string& id, const std::string& registry_csv) {
    SegmentDef def = load_registry(registry_csv).lookup(id);
    std::cout << def.id << "," << def.name << "," << def.rgb[0] << "," << def.rgb[1] << ","
              << def.rgb[2] << "," << def.category << "," << def.type << "," << def.modifier
              << "," << (def.is_finding ? 1 : 0) << "\n";
    return 0;
}

int cmd_segdb_composite(const std::string& text, const std::string& registry_csv) {
    CompositeAnnotation composite = load_registry(registry_csv).parse_composite(text);
    std::cout << serialize(composite) << "\n";
    std::cout << "context," << composite.context.id << "," << composite.context.name << "\n";
    std::cout << "finding," << composite.finding.id << "," << composite.finding.name << "\n";
    return 0;
}

int cmd_evaluate(const std::string& pred, const std::string& ref, const std::string& labels,
                 const std::string& clinical, const std::string& model,
                 const std::string& out_dir, bool pooled, const std::string& registry_csv) {
    SegmentRegistry segdb = load_registry(registry_csv);
    stats::EvalConfig config = stats::load_eval_config(labels, segdb);
    std::optional<stdfs::path> clinical_path;
    if (!clinical.empty()) clinical_path = clinical;

    auto cohort = stats::evaluate_cohort(pred, ref, clinical_path, config, segdb, model);
    for (const auto& warning : cohort.warnings) std::cerr << "warning: " << warning << "\n";
    std::cerr << cohort.rows.size() << " cohort rows; excluded: " << cohort.excluded.size()
              << " (geometry " << cohort.geometry_exclusions << ", missing reference "
              << cohort.missing_reference << ", missing prediction "
              << cohort.missing_prediction << ")\n";

    auto variant = pooled ? stats::TTestVariant::Pooled : stats::TTestVariant::Welch;
    std::vector<stats::TTestRow> tests;
    std::vector<stats::CorrelationRow> correlations;

    // gender comparison (male vs female), as available
    std::vector<double> male, female;
    for (const auto& row : cohort.rows) {
        auto it = row.covariates.find("gender");
        if (it == row.covariates.end()) continue;
        if (it->second == "male") male.push_back(row.dice);
        if (it->second == "female") female.push_back(row.dice);
    }
    if (male.size() >= 2 && female.size() >= 2) {
        try {
            tests.push_back({model, "gender", stats::t_test_independent(male, female, variant)});
        } catch (const Error& e) {
            std::cerr << "warning: gender t-test skipped: " << e.what() << "\n";
        }
    }

    // segment comparison when exactly two segments are configured
    std::set<std::string> segments;
    for (const auto& row : cohort.rows) segments.insert(row.segment_id);
    if (segments.size() == 2) {
        auto first = *segments.begin();
        auto second = *std::next(segments.begin());
        std::vector<double> a, b;
        for (const auto& row : cohort.rows) {
            (row.segment_id == first ? a : b).push_back(row.dice);
        }
        if (a.size() >= 2 && b.size() >= 2) {
            try {
                tests.push_back({model, first + " vs " + second,
                                 stats::t_test_independent(a, b, variant)});
            } catch (const Error& e) {
                std::cerr << "warning: segment t-test skipped: " << e.what() << "\n";
            }
        }
    }

    // dice-vs-age correlation, as available
    std::vector<double> dice_values, ages;
    for (const auto& row : cohort.rows) {
        auto it = row.covariates.find("age");
        if (it == row.covariates.end()) continue;
        char* end = nullptr;
        double age = std::strtod(it->second.c_str(), &end);
        if (end == it->second.c_str()) continue;
        dice_values.push_back(row.dice);
        ages.push_back(age);
    }
    if (dice_values.size() >= 3) {
        try {
            correlations.push_back({model, stats::spearman(dice_values, ages)});
        } catch (const Error& e) {
            std::cerr << "warning: age correlation skipped: " << e.what() << "\n";
        }
    }

    stats::export_stats(cohort.rows, tests, correlations, out_dir);
    std::cerr << "wrote cohort.csv, ttests.csv, correlations.csv to " << out_dir << "\n";
    return 0;
}

int cmd_scaffold(const std::string& name, const std::string& dir, bool force) {
    stdfs::path target = dir.empty() ? stdfs::path(name) : stdfs::path(dir);
    scaffold_model(name, target, force);
    std::cerr << "scaffolded workspace at " << target.string() << "\n";
    std::cerr << "container run command: " << container_run_command(name) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    install_signal_forwarding();

    std::vector<std::string> args(argv + 1, argv + argc);
    std::vector<std::string> overrides = extract_config_overrides(args);

    CLI::App app{"medpipe - reproducible medical-imaging pipelines"};
    app.require_subcommand(1);

    CommonFlags flags;
    app.add_flag("--verbose", flags.verbose, "log progress to stderr");
    app.add_flag("--debug", flags.debug, "verbose plus keep the work directory");

    std::string registry_csv;
    app.add_option("--segdb", registry_csv, "segment registry CSV (default: built-in)");

    // run
    auto* run = app.add_subcommand("run", "execute a workspace workflow");
    std::string run_workspace, run_workflow = "default", run_input, run_output, run_workdir;
    run->add_option("workspace", run_workspace, "model workspace directory")->required();
    run->add_option("--workflow", run_workflow, "workflow name, or '-' for stdin");
    run->add_option("--input", run_input, "input directory");
    run->add_option("--output", run_output, "output directory");
    run->add_option("--workdir", run_workdir, "work directory (default: temp)");

    // test
    auto* test = app.add_subcommand("test", "run the reproducibility test");
    std::string test_workspace, test_output, test_cache;
    double test_threshold = kDiceDeviationThreshold;
    test->add_option("workspace", test_workspace, "model workspace directory")->required();
    test->add_option("--output", test_output, "test output directory");
    test->add_option("--cache", test_cache, "download cache directory");
    test->add_option("--dice-threshold", test_threshold,
                     "deviation threshold (non-standard; default 0.99)");

    // compare
    auto* compare = app.add_subcommand("compare", "diff two output trees");
    std::string cmp_generated, cmp_reference, cmp_spec, cmp_report;
    double cmp_threshold = kDiceDeviationThreshold;
    compare->add_option("generated", cmp_generated, "generated output directory")->required();
    compare->add_option("reference", cmp_reference, "reference directory")->required();
    compare->add_option("--spec", cmp_spec, "test.yml supplying content rules");
    compare->add_option("--report", cmp_report, "write the YAML report here");
    compare->add_option("--dice-threshold", cmp_threshold,
                        "deviation threshold (non-standard; default 0.99)");

    // validate
    auto* validate = app.add_subcommand("validate", "validate a model workspace");
    std::string val_workspace;
    validate->add_option("workspace", val_workspace, "model workspace directory")->required();

    // models
    auto* models = app.add_subcommand("models", "query a repository of model workspaces");
    std::string mdl_repo, mdl_modality, mdl_task, mdl_class;
    models->add_option("repo", mdl_repo, "repository directory")->required();
    models->add_option("--modality", mdl_modality, "input modality filter, e.g. CT");
    models->add_option("--task", mdl_task, "task filter");
    models->add_option("--output-class", mdl_class, "output segment id filter");

    // segdb
    auto* segdb_cmd = app.add_subcommand("segdb", "segment registry queries");
    auto* segdb_lookup = segdb_cmd->add_subcommand("lookup", "resolve a segment id");
    std::string segdb_id;
    segdb_lookup->add_option("id", segdb_id, "segment id, e.g. HEART")->required();
    auto* segdb_composite = segdb_cmd->add_subcommand("composite", "parse CONTEXT+FINDING");
    std::string segdb_text;
    segdb_composite->add_option("annotation", segdb_text, "e.g. LEFT_LUNG+TUMOR")->required();
    segdb_cmd->require_subcommand(1);

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "cohort Dice + statistics");
    std::string ev_pred, ev_ref, ev_labels, ev_clinical, ev_model, ev_out;
    bool ev_pooled = false;
    evaluate->add_option("--pred", ev_pred, "prediction volumes directory")->required();
    evaluate->add_option("--ref", ev_ref, "reference volumes directory")->required();
    evaluate->add_option("--labels", ev_labels, "label/aggregation config YAML")->required();
    evaluate->add_option("--clinical", ev_clinical, "clinical covariates CSV");
    evaluate->add_option("--model", ev_model, "model name recorded in the tables")->required();
    evaluate->add_option("--out", ev_out, "output directory for the CSV tables")->required();
    evaluate->add_flag("--pooled", ev_pooled, "pooled-variance t-test instead of Welch");

    // scaffold
    auto* scaffold = app.add_subcommand("scaffold", "generate a model workspace");
    std::string sc_name, sc_dir;
    bool sc_force = false;
    scaffold->add_option("name", sc_name, "model name")->required();
    scaffold->add_option("--dir", sc_dir, "target directory (default: ./<name>)");
    scaffold->add_flag("--force", sc_force, "allow a non-empty target directory");

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        std::reverse(args.begin(), args.end()); // CLI11 consumes a reversed vector
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*run) {
            return cmd_run(run_workspace, run_workflow, run_input, run_output, run_workdir,
                           overrides, registry_csv, flags);
        }
        if (*test) {
            return cmd_test(test_workspace, test_output, test_cache, test_threshold, overrides,
                            flags);
        }
        if (*compare) {
            return cmd_compare(cmp_generated, cmp_reference, cmp_spec, cmp_report,
                               cmp_threshold);
        }
        if (*validate) return cmd_validate(val_workspace, registry_csv);
        if (*models) {
            return cmd_models(mdl_repo, mdl_modality, mdl_task, mdl_class, registry_csv);
        }
        if (*segdb_lookup) return cmd_segdb_lookup(segdb_id, registry_csv);
        if (*segdb_composite) return cmd_segdb_composite(segdb_text, registry_csv);
        if (*evaluate) {
            return cmd_evaluate(ev_pred, ev_ref, ev_labels, ev_clinical, ev_model, ev_out,
                                ev_pooled, registry_csv);
        }
        if (*scaffold) return cmd_scaffold(sc_name, sc_dir, sc_force);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for_error(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
