#include "medpipe/subprocess.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <thread>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include "medpipe/error.hpp"

namespace medpipe {

namespace {

std::atomic<pid_t> g_active_child{0};

void forward_signal(int signum) {
    pid_t child = g_active_child.load();
    if (child > 0) kill(child, signum);
    // restore default disposition and re-raise so the exit status is honest
    std::signal(signum, SIG_DFL);
    raise(signum);
}

int open_capture(const std::filesystem::path& file) {
    std::filesystem::create_directories(file.parent_path());
    int fd = ::open(file.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) fail("IoError", "cannot open capture file " + file.string());
    return fd;
}

} // namespace

void install_signal_forwarding() {
    std::signal(SIGINT, forward_signal);
    std::signal(SIGTERM, forward_signal);
}

SubprocessResult run_subprocess(const std::vector<std::string>& argv,
                                const std::filesystem::path& working_dir,
                                const std::filesystem::path& stdout_file,
                                const std::filesystem::path& stderr_file,
                                double timeout_seconds) {
    if (argv.empty()) fail("CommandFailed", "empty argv");

    std::vector<char*> cargv;
    cargv.reserve(argv.size() + 1);
    for (const auto& arg : argv) cargv.push_back(const_cast<char*>(arg.c_str()));
    cargv.push_back(nullptr);

    int out_fd = open_capture(stdout_file);
    int err_fd = open_capture(stderr_file);

    pid_t pid = fork();
    if (pid < 0) {
        close(out_fd);
        close(err_fd);
        fail("CommandFailed", "fork failed");
    }
    if (pid == 0) {
        if (chdir(working_dir.c_str()) != 0) _exit(127);
        dup2(out_fd, STDOUT_FILENO);
        dup2(err_fd, STDERR_FILENO);
        close(out_fd);
        close(err_fd);
        execvp(cargv[0], cargv.data());
        _exit(127);
    }
    close(out_fd);
    close(err_fd);
    g_active_child.store(pid);

    SubprocessResult result;
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                        std::chrono::duration<double>(timeout_seconds));
    for (;;) {
        int status = 0;
        pid_t done = waitpid(pid, &status, WNOHANG);
        if (done == pid) {
            if (WIFEXITED(status)) {
                result.exit_code = WEXITSTATUS(status);
            } else if (WIFSIGNALED(status)) {
                result.signaled = true;
                result.exit_code = 128 + WTERMSIG(status);
            }
            break;
        }
        if (timeout_seconds > 0 && std::chrono::steady_clock::now() >= deadline) {
            kill(pid, SIGKILL);
            waitpid(pid, &status, 0);
            result.timed_out = true;
            result.exit_code = -1;
            break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    g_active_child.store(0);
    return result;
}

} // namespace medpipe
