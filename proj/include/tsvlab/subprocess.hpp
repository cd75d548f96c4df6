#pragma once

// Minimal POSIX child process with line-oriented pipes on stdin/stdout.

#include <cerrno>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <fcntl.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "tsvlab/error.hpp"

namespace tsvlab {

class Subprocess {
public:
    explicit Subprocess(const std::vector<std::string>& argv) {
        if (argv.empty()) throw Error("launch", "empty adapter command");
        std::signal(SIGPIPE, SIG_IGN);
        int to_child[2], from_child[2], err_pipe[2];
        if (pipe(to_child) != 0 || pipe(from_child) != 0 || pipe(err_pipe) != 0) {
            throw Error("launch", std::string("pipe failed: ") + std::strerror(errno));
        }
        fcntl(err_pipe[1], F_SETFD, FD_CLOEXEC);
        pid_ = fork();
        if (pid_ < 0) throw Error("launch", std::string("fork failed: ") + std::strerror(errno));
        if (pid_ == 0) {
            dup2(to_child[0], STDIN_FILENO);
            dup2(from_child[1], STDOUT_FILENO);
            close(to_child[0]);
            close(to_child[1]);
            close(from_child[0]);
            close(from_child[1]);
            close(err_pipe[0]);
            std::vector<char*> args;
            for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
            args.push_back(nullptr);
            execvp(args[0], args.data());
            const int code = errno;
            [[maybe_unused]] auto n = write(err_pipe[1], &code, sizeof code);
            _exit(127);
        }
        close(to_child[0]);
        close(from_child[1]);
        close(err_pipe[1]);
        int child_errno = 0;
        const auto got = read(err_pipe[0], &child_errno, sizeof child_errno);
        close(err_pipe[0]);
        if (got == static_cast<ssize_t>(sizeof child_errno)) {
            close(to_child[1]);
            close(from_child[0]);
            waitpid(pid_, nullptr, 0);
            pid_ = -1;
            throw Error("launch", "cannot execute '" + argv[0] + "': " + std::strerror(child_errno));
        }
        in_ = fdopen(to_child[1], "w");
        out_ = fdopen(from_child[0], "r");
        if (!in_ || !out_) throw Error("launch", "fdopen failed");
    }

    Subprocess(const Subprocess&) = delete;
    Subprocess& operator=(const Subprocess&) = delete;

    ~Subprocess() { wait(); }

    void write_line(std::string_view line) {
        if (!in_) throw Error("backend", "adapter stdin is closed");
        if (std::fwrite(line.data(), 1, line.size(), in_) != line.size() || std::fputc('\n', in_) == EOF ||
            std::fflush(in_) != 0) {
            throw Error("backend", "adapter process is not accepting input");
        }
    }

    // Returns nullopt at end of stream.
    std::optional<std::string> read_line() {
        if (!out_) return std::nullopt;
        std::string line;
        int ch;
        while ((ch = std::fgetc(out_)) != EOF) {
            if (ch == '\n') return line;
            line.push_back(static_cast<char>(ch));
        }
        if (line.empty()) return std::nullopt;
        return line;
    }

    // Closes the pipes and reaps the child; returns its exit status or -1.
    int wait() {
        if (in_) {
            std::fclose(in_);
            in_ = nullptr;
        }
        if (out_) {
            std::fclose(out_);
            out_ = nullptr;
        }
        int status = -1;
        if (pid_ > 0) {
            waitpid(pid_, &status, 0);
            pid_ = -1;
            if (WIFEXITED(status)) return WEXITSTATUS(status);
        }
        return -1;
    }

private:
    pid_t pid_ = -1;
    std::FILE* in_ = nullptr;
    std::FILE* out_ = nullptr;
};

}  // namespace tsvlab
