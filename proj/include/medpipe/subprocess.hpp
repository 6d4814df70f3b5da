#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace medpipe {

struct SubprocessResult {
    int exit_code = -1;
    bool timed_out = false;
    bool signaled = false;
};

/// Runs argv[0] with execvp (no shell), cwd set to `working_dir`, stdout and
/// stderr redirected to the given files. `timeout_seconds` <= 0 disables the
/// timeout. In-flight children are killed on SIGINT/SIGTERM once
/// install_signal_forwarding() has run.
SubprocessResult run_subprocess(const std::vector<std::string>& argv,
                                const std::filesystem::path& working_dir,
                                const std::filesystem::path& stdout_file,
                                const std::filesystem::path& stderr_file,
                                double timeout_seconds);

void install_signal_forwarding();

} // namespace medpipe
