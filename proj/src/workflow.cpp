#include "medpipe/workflow.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include <yaml-cpp/yaml.h>

#include "medpipe/csv.hpp"
#include "medpipe/error.hpp"
#include "medpipe/yaml_json.hpp"

namespace medpipe {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

json yaml_scalar_to_json(const YAML::Node& node) {
    const std::string& text = node.Scalar();
    if (node.Tag() == "!") return text; // quoted scalar stays a string
    if (text == "null" || text == "~" || text.empty()) return nullptr;
    if (text == "true") return true;
    if (text == "false") return false;
    {
        std::size_t pos = 0;
        try {
            long long v = std::stoll(text, &pos);
            if (pos == text.size()) return v;
        } catch (const std::exception&) {
        }
    }
    {
        char* end = nullptr;
        double v = std::strtod(text.c_str(), &end);
        if (end == text.c_str() + text.size()) return v;
    }
    return text;
}

bool value_matches_type(const json& value, const std::string& type) {
    if (type == "string") return value.is_string();
    if (type == "int") return value.is_number_integer() || value.is_number_unsigned();
    if (type == "number") return value.is_number();
    if (type == "bool") return value.is_boolean();
    if (type == "list") return value.is_array();
    fail("ParamTypeError", "unknown declared param type \"" + type + "\"");
}

json parse_override_value(const std::string& text, const std::string& type) {
    if (type == "string") return text;
    if (type == "int") {
        std::size_t pos = 0;
        try {
            long long v = std::stoll(text, &pos);
            if (pos == text.size()) return v;
        } catch (const std::exception&) {
        }
        fail("ParamTypeError", "expected integer, got \"" + text + "\"");
    }
    if (type == "number") {
        char* end = nullptr;
        double v = std::strtod(text.c_str(), &end);
        if (end == text.c_str() + text.size() && !text.empty()) return v;
        fail("ParamTypeError", "expected number, got \"" + text + "\"");
    }
    if (type == "bool") {
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        fail("ParamTypeError", "expected bool, got \"" + text + "\"");
    }
    if (type == "list") {
        json out = json::array();
        std::size_t start = 0;
        while (start <= text.size()) {
            auto comma = text.find(',', start);
            out.push_back(text.substr(start, comma == std::string::npos ? std::string::npos
                                                                        : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    }
    fail("ParamTypeError", "unknown declared param type \"" + type + "\"");
}

} // namespace

json yaml_to_json(const YAML::Node& node) {
    switch (node.Type()) {
        case YAML::NodeType::Null: return nullptr;
        case YAML::NodeType::Scalar: return yaml_scalar_to_json(node);
        case YAML::NodeType::Sequence: {
            json out = json::array();
            for (const auto& item : node) out.push_back(yaml_to_json(item));
            return out;
        }
        case YAML::NodeType::Map: {
            json out = json::object();
            for (const auto& kv : node) out[kv.first.as<std::string>()] = yaml_to_json(kv.second);
            return out;
        }
        default: return nullptr;
    }
}

std::string_view to_string(ModuleCategory category) {
    switch (category) {
        case ModuleCategory::Importer: return "importer";
        case ModuleCategory::Filter: return "filter";
        case ModuleCategory::Converter: return "converter";
        case ModuleCategory::Processor: return "processor";
        case ModuleCategory::Runner: return "runner";
        case ModuleCategory::Exporter: return "exporter";
        case ModuleCategory::Organizer: return "organizer";
    }
    return "processor";
}

ModuleCategory category_from_string(std::string_view text) {
    for (auto c : {ModuleCategory::Importer, ModuleCategory::Filter, ModuleCategory::Converter,
                   ModuleCategory::Processor, ModuleCategory::Runner, ModuleCategory::Exporter,
                   ModuleCategory::Organizer}) {
        if (to_string(c) == text) return c;
    }
    fail("SchemaError", "unknown module category \"" + std::string(text) + "\"");
}

std::string_view to_string(ModuleScope scope) {
    return scope == ModuleScope::PerRun ? "run" : "instance";
}

ModuleScope scope_from_string(std::string_view text) {
    if (text == "run") return ModuleScope::PerRun;
    if (text == "instance") return ModuleScope::PerInstance;
    fail("SchemaError", "unknown module scope \"" + std::string(text) + "\" (run|instance)");
}

const ParamSpec* ModuleDescriptor::param(std::string_view name) const {
    for (const auto& p : params) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

void ModuleRegistry::add(Module module) {
    if (find(module.descriptor.name)) {
        fail("DuplicateModule", "module already registered: " + module.descriptor.name);
    }
    for (const auto& p : module.descriptor.params) {
        if (!p.default_value.is_null() && !value_matches_type(p.default_value, p.type)) {
            fail("ParamTypeError", module.descriptor.name + "." + p.name +
                                       ": default does not match declared type " + p.type);
        }
    }
    modules_.push_back(std::move(module));
}

const Module* ModuleRegistry::find(std::string_view name) const {
    for (const auto& m : modules_) {
        if (m.descriptor.name == name) return &m;
    }
    return nullptr;
}

const Module& ModuleRegistry::require(std::string_view name) const {
    if (const Module* m = find(name)) return *m;
    fail("UnknownModule", "no module named \"" + std::string(name) + "\"");
}

std::vector<std::string> ModuleRegistry::names() const {
    std::vector<std::string> out;
    out.reserve(modules_.size());
    for (const auto& m : modules_) out.push_back(m.descriptor.name);
    return out;
}

json resolve_params(const ModuleDescriptor& descriptor, const json& provided) {
    json resolved = json::object();
    for (const auto& spec : descriptor.params) {
        if (provided.contains(spec.name)) {
            const json& value = provided.at(spec.name);
            json coerced = value;
            // ints are acceptable where numbers are declared
            if (!value_matches_type(coerced, spec.type)) {
                fail("ParamTypeError", descriptor.name + "." + spec.name + ": value " +
                                           value.dump() + " does not match type " + spec.type);
            }
            resolved[spec.name] = coerced;
        } else if (!spec.default_value.is_null()) {
            resolved[spec.name] = spec.default_value;
        } else {
            fail("SchemaError",
                 descriptor.name + "." + spec.name + " is required and has no default");
        }
    }
    for (auto it = provided.begin(); it != provided.end(); ++it) {
        if (!descriptor.param(it.key())) {
            fail("UnknownParam", descriptor.name + " has no parameter \"" + it.key() + "\"");
        }
    }
    return resolved;
}

Workflow load_workflow(const std::string& yaml_text, const ModuleRegistry& registry) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        fail("SchemaError", "workflow YAML parse error: " + std::string(e.what()));
    }
    if (!root.IsMap()) fail("SchemaError", "workflow must be a YAML map");

    Workflow workflow;
    if (root["general"]) {
        if (!root["general"].IsMap()) fail("SchemaError", "general must be a map");
        for (const auto& kv : root["general"]) {
            std::string key = kv.first.as<std::string>();
            if (key == "name") {
                workflow.name = kv.second.as<std::string>();
            } else if (key == "description") {
                workflow.description = kv.second.as<std::string>();
            } else {
                workflow.global_config[key] = yaml_to_json(kv.second);
            }
        }
    }

    if (!root["execute"]) fail("SchemaError", "workflow lacks required `execute` list");
    if (!root["execute"].IsSequence()) fail("SchemaError", "`execute` must be a list");

    for (const auto& entry : root["execute"]) {
        StepSpec step;
        if (entry.IsScalar()) {
            step.module = entry.as<std::string>();
        } else if (entry.IsMap()) {
            if (!entry["module"]) fail("SchemaError", "execute entry without `module` key");
            step.module = entry["module"].as<std::string>();
            for (const auto& kv : entry) {
                std::string key = kv.first.as<std::string>();
                if (key == "module") continue;
                step.params[key] = yaml_to_json(kv.second);
            }
        } else {
            fail("SchemaError", "execute entries must be module names or maps");
        }
        const Module& mod = registry.require(step.module);
        resolve_params(mod.descriptor, step.params); // validates names and types
        workflow.steps.push_back(std::move(step));
    }
    if (workflow.steps.empty()) fail("SchemaError", "workflow has no steps");
    return workflow;
}

Workflow apply_overrides(Workflow workflow, const std::vector<std::string>& overrides,
                         const ModuleRegistry& registry) {
    for (const auto& text : overrides) {
        auto dot = text.find('.');
        auto eq = text.find('=', dot == std::string::npos ? 0 : dot);
        if (dot == std::string::npos || eq == std::string::npos || dot == 0 || eq <= dot + 1) {
            fail("SchemaError", "override must be <Module>.<param>=<value>: \"" + text + "\"");
        }
        std::string module_name = text.substr(0, dot);
        std::string param_name = text.substr(dot + 1, eq - dot - 1);
        std::string value_text = text.substr(eq + 1);

        bool in_workflow = std::any_of(workflow.steps.begin(), workflow.steps.end(),
                                       [&](const StepSpec& s) { return s.module == module_name; });
        if (!in_workflow) {
            fail("UnknownModule", "override \"" + text + "\" names a module not in the workflow");
        }
        const Module& mod = registry.require(module_name);
        const ParamSpec* spec = mod.descriptor.param(param_name);
        if (!spec) {
            fail("UnknownParam", "override \"" + text + "\": " + module_name +
                                     " has no parameter \"" + param_name + "\"");
        }
        json value;
        try {
            value = parse_override_value(value_text, spec->type);
        } catch (const Error& e) {
            fail(e.code(), "override \"" + text + "\": " + e.what());
        }
        for (auto& step : workflow.steps) {
            if (step.module == module_name) step.params[param_name] = value;
        }
    }
    return workflow;
}

ModuleCall::ModuleCall(RunGraph& graph, const ModuleDescriptor& descriptor, json params,
                       Instance* instance, std::filesystem::path input_dir,
                       std::filesystem::path output_dir, StepLog* sink)
    : graph_(&graph),
      descriptor_(&descriptor),
      params_(std::move(params)),
      instance_(instance),
      input_dir_(std::move(input_dir)),
      output_dir_(std::move(output_dir)),
      sink_(sink) {
    for (auto it = params_.begin(); it != params_.end(); ++it) {
        if (it->is_primitive() && !it->is_null()) {
            bindings_[it.key()] = scalar_to_string(*it);
        }
    }
}

void ModuleCall::bind_globals(const json& global_config) {
    for (auto it = global_config.begin(); it != global_config.end(); ++it) {
        if (it->is_primitive() && !it->is_null()) {
            bindings_.try_emplace(it.key(), scalar_to_string(*it));
        }
    }
}

json ModuleCall::param(const std::string& name) const {
    if (!params_.contains(name)) {
        fail("UnknownParam", descriptor_->name + " has no resolved parameter \"" + name + "\"");
    }
    return params_.at(name);
}

std::string ModuleCall::param_string(const std::string& name) const {
    return scalar_to_string(param(name));
}

long long ModuleCall::param_int(const std::string& name) const {
    return param(name).get<long long>();
}

double ModuleCall::param_number(const std::string& name) const {
    return param(name).get<double>();
}

bool ModuleCall::param_bool(const std::string& name) const {
    return param(name).get<bool>();
}

std::vector<std::string> ModuleCall::param_string_list(const std::string& name) const {
    std::vector<std::string> out;
    for (const auto& item : param(name)) out.push_back(scalar_to_string(item));
    return out;
}

Instance& ModuleCall::require_instance() {
    if (!instance_) fail("ScopeError", descriptor_->name + " requires an instance in scope");
    return *instance_;
}

std::vector<DataHandle> ModuleCall::inputs(const std::string& query_text) {
    return inputs(require_instance(), query_text);
}

std::vector<DataHandle> ModuleCall::inputs(Instance& instance, const std::string& query_text) {
    return graph_->resolve_inputs(instance, parse_query(query_text), bindings_);
}

DataHandle& ModuleCall::output(Instance& instance, const std::string& descriptor,
                               const std::string& basename) {
    return graph_->register_output(instance, parse_descriptor(descriptor), basename,
                                   descriptor_->name);
}

void ModuleCall::confirm(DataHandle& handle) {
    graph_->confirm(handle);
    produced_.push_back(handle.path.string());
}

void ModuleCall::note(const std::string& message) {
    if (sink_) sink_->notes.push_back(descriptor_->name + ": " + message);
}

std::string scalar_to_string(const json& value) {
    if (value.is_string()) return value.get<std::string>();
    if (value.is_boolean()) return value.get<bool>() ? "true" : "false";
    if (value.is_number_integer()) return std::to_string(value.get<long long>());
    if (value.is_number_unsigned()) return std::to_string(value.get<unsigned long long>());
    if (value.is_number_float()) return csv::format_double(value.get<double>());
    return value.dump();
}

int exit_code_for(const RunLog& log) {
    if (log.fatal) return 3;
    if (log.instances_created == 0 || log.instances_created == log.instances_skipped) return 4;
    if (log.instances_active == 0) return 3;
    return 0;
}

std::string summarize(const RunLog& log) {
    std::string out;
    for (const auto& step : log.steps) {
        out += "step " + std::to_string(step.index + 1) + " " + step.module + ": ";
        int ok = 0, failed = 0;
        for (const auto& r : step.records) {
            ok += r.status == RecordStatus::Ok;
            failed += r.status == RecordStatus::Failed;
        }
        out += std::to_string(ok) + " ok, " + std::to_string(failed) + " failed (" +
               std::to_string(int(step.wall_ms)) + " ms)\n";
        for (const auto& note : step.notes) out += "  note: " + note + "\n";
    }
    out += "instances: " + std::to_string(log.instances_created) + " created, " +
           std::to_string(log.instances_active) + " ok, " +
           std::to_string(log.instances_skipped) + " skipped, " +
           std::to_string(log.instances_failed) + " failed\n";
    if (log.fatal) out += "fatal: " + log.fatal_message + "\n";
    return out;
}

namespace {

std::filesystem::path make_temp_work_dir() {
    auto base = std::filesystem::temp_directory_path();
    std::mt19937_64 rng(std::random_device{}());
    for (int attempt = 0; attempt < 32; ++attempt) {
        auto candidate = base / ("medpipe-run-" + std::to_string(rng()));
        std::error_code ec;
        if (std::filesystem::create_directories(candidate, ec) && !ec) return candidate;
    }
    fail("IoError", "cannot create a temporary work directory under " + base.string());
}

} // namespace

RunLog execute_workflow(const Workflow& workflow, const ExecuteOptions& options,
                        const ModuleRegistry& registry) {
    RunLog log;
    auto say = [&](const std::string& message) {
        if (options.log) options.log(message);
    };

    std::error_code ec;
    std::filesystem::create_directories(options.output_dir, ec);
    if (ec || !std::filesystem::is_directory(options.output_dir)) {
        log.fatal = true;
        log.fatal_message = "output directory not writable: " + options.output_dir.string();
        return log;
    }

    for (const auto& step : workflow.steps) registry.require(step.module);

    bool temp_work = !options.work_dir.has_value();
    std::filesystem::path work_dir = temp_work ? make_temp_work_dir() : *options.work_dir;
    RunGraph graph(work_dir, options.input_dir);
    say("work dir: " + work_dir.string());

    long long event_seq = 0;

    for (std::size_t i = 0; i < workflow.steps.size(); ++i) {
        const StepSpec& step = workflow.steps[i];
        const Module& mod = registry.require(step.module);
        json params = resolve_params(mod.descriptor, step.params);

        StepLog slog;
        slog.index = int(i);
        slog.module = step.module;
        auto step_start = Clock::now();
        say("step " + std::to_string(i + 1) + "/" + std::to_string(workflow.steps.size()) +
            ": " + step.module);

        if (mod.descriptor.scope == ModuleScope::PerRun) {
            RunRecord record;
            record.event_begin = ++event_seq;
            auto start = Clock::now();
            try {
                ModuleCall call(graph, mod.descriptor, params, nullptr, options.input_dir,
                                options.output_dir, &slog);
                call.bind_globals(workflow.global_config);
                mod.run(call);
                record.produced = call.produced();
                record.status = RecordStatus::Ok;
            } catch (const std::exception& e) {
                record.status = RecordStatus::Failed;
                record.message = e.what();
                log.fatal = true;
                log.fatal_message = step.module + ": " + e.what();
            }
            record.wall_ms = ms_since(start);
            record.event_end = ++event_seq;
            slog.records.push_back(std::move(record));
        } else {
            auto snapshot = graph.active_instances();
            for (Instance* instance : snapshot) {
                RunRecord record;
                record.instance_id = instance->id();
                record.event_begin = ++event_seq;
                auto start = Clock::now();
                try {
                    ModuleCall call(graph, mod.descriptor, params, instance, options.input_dir,
                                    options.output_dir, &slog);
                    call.bind_globals(workflow.global_config);
                    mod.run(call);
                    record.produced = call.produced();
                    record.status = instance->state() == InstanceState::Failed
                                        ? RecordStatus::Failed
                                        : RecordStatus::Ok;
                    if (instance->state() == InstanceState::Skipped) {
                        record.message = instance->failure_reason();
                    }
                } catch (const std::exception& e) {
                    instance->mark_failed(e.what());
                    record.status = RecordStatus::Failed;
                    record.message = e.what();
                    say("  instance " + instance->id() + " failed: " + e.what());
                }
                record.wall_ms = ms_since(start);
                record.event_end = ++event_seq;
                slog.records.push_back(std::move(record));
            }
        }

        slog.wall_ms = ms_since(step_start);
        log.steps.push_back(std::move(slog));
        if (log.fatal) break;
    }

    log.instances_created = int(graph.instances().size());
    for (Instance* instance : graph.instances()) {
        switch (instance->state()) {
            case InstanceState::Active: ++log.instances_active; break;
            case InstanceState::Skipped: ++log.instances_skipped; break;
            case InstanceState::Failed: ++log.instances_failed; break;
        }
    }

    if (temp_work && !options.keep_work) {
        std::filesystem::remove_all(work_dir, ec);
    }
    return log;
}

} // namespace medpipe
