#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "medpipe/semantic.hpp"

namespace medpipe {

enum class ModuleCategory { Importer, Filter, Converter, Processor, Runner, Exporter, Organizer };
enum class ModuleScope { PerRun, PerInstance };

std::string_view to_string(ModuleCategory category);
ModuleCategory category_from_string(std::string_view text);
std::string_view to_string(ModuleScope scope);
ModuleScope scope_from_string(std::string_view text);

/// Declared configurable parameter. A null default marks the parameter as
/// required. `type` is one of string|int|number|bool|list.
struct ParamSpec {
    std::string name;
    std::string type = "string";
    nlohmann::json default_value;
    std::string description;
};

struct OutputSpec {
    std::string descriptor;
    std::string basename;
};

struct ModuleDescriptor {
    std::string name;
    ModuleCategory category = ModuleCategory::Processor;
    ModuleScope scope = ModuleScope::PerInstance;
    std::vector<ParamSpec> params;
    std::vector<std::string> inputs; // semantic query strings
    std::vector<OutputSpec> outputs;

    const ParamSpec* param(std::string_view name) const;
};

class ModuleCall;
using ModuleFn = std::function<void(ModuleCall&)>;

struct Module {
    ModuleDescriptor descriptor;
    ModuleFn run;
};

class ModuleRegistry {
public:
    void add(Module module);
    const Module* find(std::string_view name) const;
    const Module& require(std::string_view name) const; // UnknownModule
    std::vector<std::string> names() const;

private:
    std::vector<Module> modules_;
};

struct StepSpec {
    std::string module;
    nlohmann::json params = nlohmann::json::object();

    bool operator==(const StepSpec&) const = default;
};

struct Workflow {
    std::string name;
    std::string description;
    std::vector<StepSpec> steps;
    nlohmann::json global_config = nlohmann::json::object();

    bool operator==(const Workflow&) const = default;
};

/// YAML schema: optional `general {name, description, ...}` plus required
/// `execute` list of module names or `{module: Name, param: value, ...}`
/// maps. Step params are validated against the registry's declarations.
Workflow load_workflow(const std::string& yaml_text, const ModuleRegistry& registry);

/// Applies `Module.param=value` override strings; later overrides win.
Workflow apply_overrides(Workflow workflow, const std::vector<std::string>& overrides,
                         const ModuleRegistry& registry);

enum class RecordStatus { Ok, Skipped, Failed };

struct RunRecord {
    std::string instance_id; // empty for PER-RUN records
    RecordStatus status = RecordStatus::Ok;
    std::string message;
    std::vector<std::string> produced; // confirmed output paths
    long long event_begin = 0;
    long long event_end = 0;
    double wall_ms = 0.0;
};

struct StepLog {
    int index = 0;
    std::string module;
    std::vector<RunRecord> records;
    std::vector<std::string> notes;
    double wall_ms = 0.0;
};

struct RunLog {
    std::vector<StepLog> steps;
    bool fatal = false;
    std::string fatal_message;
    int instances_created = 0;
    int instances_active = 0;
    int instances_skipped = 0;
    int instances_failed = 0;
};

/// 0 success, 3 run failure, 4 no instances processed.
int exit_code_for(const RunLog& log);

std::string summarize(const RunLog& log);

struct ExecuteOptions {
    std::filesystem::path input_dir;
    std::filesystem::path output_dir;
    std::optional<std::filesystem::path> work_dir; // default: fresh temp dir
    bool keep_work = false;
    std::function<void(const std::string&)> log;   // optional verbose sink
};

/// Runs steps strictly in order; PER-INSTANCE steps fan out over the
/// instances active when the step starts. A failing instance is marked and
/// skipped downstream; a failing PER-RUN step is fatal.
RunLog execute_workflow(const Workflow& workflow, const ExecuteOptions& options,
                        const ModuleRegistry& registry);

/// Execution-time view handed to a module implementation: resolved
/// configuration, the instance in scope (PER-INSTANCE only), and graph access.
class ModuleCall {
public:
    ModuleCall(RunGraph& graph, const ModuleDescriptor& descriptor, nlohmann::json params,
               Instance* instance, std::filesystem::path input_dir,
               std::filesystem::path output_dir, StepLog* sink);

    const ModuleDescriptor& descriptor() const { return *descriptor_; }
    const std::string& module_name() const { return descriptor_->name; }

    const nlohmann::json& params() const { return params_; }
    nlohmann::json param(const std::string& name) const;
    std::string param_string(const std::string& name) const;
    long long param_int(const std::string& name) const;
    double param_number(const std::string& name) const;
    bool param_bool(const std::string& name) const;
    std::vector<std::string> param_string_list(const std::string& name) const;

    /// Placeholder bindings: stringified scalar params over global config.
    const Bindings& bindings() const { return bindings_; }
    void bind_globals(const nlohmann::json& global_config);

    RunGraph& graph() { return *graph_; }
    Instance* instance() { return instance_; }
    Instance& require_instance();

    const std::filesystem::path& input_dir() const { return input_dir_; }
    const std::filesystem::path& output_dir() const { return output_dir_; }

    std::vector<DataHandle> inputs(const std::string& query_text);
    std::vector<DataHandle> inputs(Instance& instance, const std::string& query_text);
    DataHandle& output(Instance& instance, const std::string& descriptor,
                       const std::string& basename);
    void confirm(DataHandle& handle);

    void note(const std::string& message);
    const std::vector<std::string>& produced() const { return produced_; }

private:
    RunGraph* graph_;
    const ModuleDescriptor* descriptor_;
    nlohmann::json params_;
    Bindings bindings_;
    Instance* instance_;
    std::filesystem::path input_dir_;
    std::filesystem::path output_dir_;
    StepLog* sink_;
    std::vector<std::string> produced_;
};

/// Fills declared defaults and type-checks provided values.
nlohmann::json resolve_params(const ModuleDescriptor& descriptor, const nlohmann::json& provided);

/// Scalar rendering used for placeholder bindings and argv substitution.
std::string scalar_to_string(const nlohmann::json& value);

} // namespace medpipe
