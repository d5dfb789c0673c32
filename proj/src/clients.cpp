#include "sgdl/clients.hpp"

#include <cctype>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <cstring>
#include <fcntl.h>
#include <limits>
#include <poll.h>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "httplib.h"
#include "json.hpp"
#include <openssl/evp.h>

#include "sgdl/fileio.hpp"
#include "sgdl/rng.hpp"

namespace sgdl::clients {

using nlohmann::json;

int HeuristicTokenizer::count(std::string_view text) const {
    return static_cast<int>((text.size() + 3) / 4);
}

std::string normalize_prompt(std::string_view prompt) {
    std::string out;
    out.reserve(prompt.size());
    bool pending_space = false;
    for (unsigned char c : prompt) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(c));
    }
    return out;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static const char *digits = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int k = 0; k < len; ++k) {
        out.push_back(digits[md[k] >> 4]);
        out.push_back(digits[md[k] & 0xF]);
    }
    return out;
}

std::string prompt_digest(std::string_view prompt) { return sha256_hex(normalize_prompt(prompt)); }

TranscriptLlm TranscriptLlm::from_jsonl(const std::string &text, const std::string &source_name) {
    std::map<std::string, std::string> responses;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (normalize_prompt(line).empty()) {
            continue;
        }
        const std::string where = source_name + ":" + std::to_string(line_no);
        try {
            const json record = json::parse(line);
            auto key = record.at("key").get<std::string>();
            auto response = record.at("response").get<std::string>();
            if (!responses.emplace(std::move(key), std::move(response)).second) {
                throw FormatError(where, "duplicate key");
            }
        } catch (const json::exception &e) {
            throw FormatError(where, e.what());
        }
    }
    return TranscriptLlm(std::move(responses));
}

TranscriptLlm TranscriptLlm::load(const std::string &path) { return from_jsonl(read_file(path), path); }

std::string TranscriptLlm::complete(const CompletionRequest &request) {
    const std::string key = prompt_digest(request.prompt);
    const auto it = responses_.find(key);
    if (it == responses_.end()) {
        throw FixtureError("no transcript entry for prompt digest " + key, key);
    }
    return it->second;
}

std::string RecordingLlm::complete(const CompletionRequest &request) {
    std::string response = inner_.complete(request);
    std::lock_guard lock(mutex_);
    records_[prompt_digest(request.prompt)] = response;
    return response;
}

std::string RecordingLlm::to_jsonl() const {
    std::lock_guard lock(mutex_);
    std::string out;
    for (const auto &[key, response] : records_) {
        out += json{{"key", key}, {"response", response}}.dump();
        out += '\n';
    }
    return out;
}

std::size_t RecordingLlm::size() const {
    std::lock_guard lock(mutex_);
    return records_.size();
}

ContextCheckedLlm::ContextCheckedLlm(LlmClient &inner, const Tokenizer &tokenizer, int context_limit)
    : inner_(inner), tokenizer_(tokenizer), limit_(context_limit) {
    if (context_limit < 1) {
        throw InvalidArgument("context limit must be positive");
    }
}

std::string ContextCheckedLlm::complete(const CompletionRequest &request) {
    const int tokens = tokenizer_.count(request.prompt);
    if (tokens > limit_) {
        throw InvalidArgument("prompt has " + std::to_string(tokens) + " tokens, context limit is " +
                              std::to_string(limit_));
    }
    return inner_.complete(request);
}

CallLimiter::CallLimiter(int limit) : limit_(limit) {
    if (limit < 1) {
        throw InvalidArgument("in-flight limit must be positive");
    }
}

CallLimiter::Slot::Slot(CallLimiter &owner) : owner_(owner) {
    std::unique_lock lock(owner_.mutex_);
    owner_.cv_.wait(lock, [&] { return owner_.in_use_ < owner_.limit_; });
    ++owner_.in_use_;
}

CallLimiter::Slot::~Slot() {
    {
        std::lock_guard lock(owner_.mutex_);
        --owner_.in_use_;
    }
    owner_.cv_.notify_one();
}

std::string GuardedLlm::complete(const CompletionRequest &request) {
    return with_retry(policy_, [&] {
        if (limiter_ == nullptr) {
            return inner_.complete(request);
        }
        CallLimiter::Slot slot(*limiter_);
        return inner_.complete(request);
    });
}

VerifyResult GuardedProver::verify_theory(const std::string &source) {
    return with_retry(policy_, [&] {
        if (limiter_ == nullptr) {
            return inner_.verify_theory(source);
        }
        CallLimiter::Slot slot(*limiter_);
        return inner_.verify_theory(source);
    });
}

namespace {

class ExprError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Recursive-descent evaluator for one side of an assertion.
class ExprParser {
public:
    explicit ExprParser(std::string_view text) : s_(text) {}

    std::int64_t parse_all() {
        const std::int64_t v = sum();
        skip_space();
        if (pos_ != s_.size()) {
            throw ExprError("unexpected '" + std::string(s_.substr(pos_, 1)) + "' at column " + std::to_string(pos_ + 1));
        }
        return v;
    }

private:
    void skip_space() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) {
            ++pos_;
        }
    }

    bool eat(std::string_view token) {
        skip_space();
        if (s_.substr(pos_, token.size()) == token) {
            pos_ += token.size();
            return true;
        }
        return false;
    }

    bool eat_minus() { return eat("-") || eat("−"); }
    bool eat_times() { return eat("*") || eat("×"); }

    static std::int64_t add(std::int64_t a, std::int64_t b) {
        std::int64_t r;
        if (__builtin_add_overflow(a, b, &r)) {
            throw ExprError("integer overflow");
        }
        return r;
    }

    static std::int64_t sub(std::int64_t a, std::int64_t b) {
        std::int64_t r;
        if (__builtin_sub_overflow(a, b, &r)) {
            throw ExprError("integer overflow");
        }
        return r;
    }

    static std::int64_t mul(std::int64_t a, std::int64_t b) {
        std::int64_t r;
        if (__builtin_mul_overflow(a, b, &r)) {
            throw ExprError("integer overflow");
        }
        return r;
    }

    std::int64_t sum() {
        std::int64_t v = product();
        for (;;) {
            if (eat("+")) {
                v = add(v, product());
            } else if (eat_minus()) {
                v = sub(v, product());
            } else {
                return v;
            }
        }
    }

    std::int64_t product() {
        std::int64_t v = unary();
        while (eat_times()) {
            v = mul(v, unary());
        }
        return v;
    }

    std::int64_t unary() {
        if (eat_minus()) {
            return sub(0, unary());
        }
        if (eat("+")) {
            return unary();
        }
        return atom();
    }

    std::int64_t atom() {
        skip_space();
        if (eat("(")) {
            const std::int64_t v = sum();
            if (!eat(")")) {
                throw ExprError("missing ')'");
            }
            return v;
        }
        if (pos_ >= s_.size() || !std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
            throw ExprError(pos_ >= s_.size() ? std::string("expression ends early")
                                              : "expected a number at column " + std::to_string(pos_ + 1));
        }
        std::int64_t v = 0;
        while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
            v = add(mul(v, 10), s_[pos_] - '0');
            ++pos_;
        }
        return v;
    }

    std::string_view s_;
    std::size_t pos_ = 0;
};

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
        s.remove_prefix(1);
    }
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
        s.remove_suffix(1);
    }
    return s;
}

} // namespace

VerifyResult ToyProver::verify_theory(const std::string &source) {
    const auto start = std::chrono::steady_clock::now();
    VerifyResult result;
    result.accepted = true;
    std::istringstream in(source);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string_view line = trim(raw);
        if (line.empty()) {
            continue;
        }
        const std::string prefix = "line " + std::to_string(line_no) + ": ";
        constexpr std::string_view kKeyword = "assert";
        if (line.substr(0, kKeyword.size()) != kKeyword || line.size() == kKeyword.size() ||
            !std::isspace(static_cast<unsigned char>(line[kKeyword.size()]))) {
            result = {false, prefix + "expected 'assert <expr> = <expr>'", {}};
            break;
        }
        const std::string_view body = line.substr(kKeyword.size());
        const auto eq = body.find('=');
        if (eq == std::string_view::npos || body.find('=', eq + 1) != std::string_view::npos) {
            result = {false, prefix + "expected exactly one '='", {}};
            break;
        }
        try {
            const std::int64_t lhs = ExprParser(body.substr(0, eq)).parse_all();
            const std::int64_t rhs = ExprParser(body.substr(eq + 1)).parse_all();
            if (lhs != rhs) {
                result = {false, prefix + std::to_string(lhs) + " != " + std::to_string(rhs), {}};
                break;
            }
        } catch (const ExprError &e) {
            result = {false, prefix + e.what(), {}};
            break;
        }
    }
    result.elapsed = std::chrono::steady_clock::now() - start;
    return result;
}

std::vector<double> HashEmbedder::embed(const std::string &text) {
    Rng rng(derive_seed(seed_, fnv1a64(sha256_hex(text))));
    std::vector<double> v(static_cast<std::size_t>(dim_));
    double norm = 0.0;
    for (auto &x : v) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto &x : v) {
        x /= norm;
    }
    return v;
}

HttpEndpoint HttpEndpoint::with_env_overrides() const {
    HttpEndpoint out = *this;
    if (const char *url = std::getenv("SGDL_LLM_URL"); url != nullptr && *url != '\0') {
        out.url = url;
    }
    if (const char *key = std::getenv("SGDL_LLM_KEY"); key != nullptr && *key != '\0') {
        out.api_key = key;
    }
    return out;
}

namespace {

json post_json(const HttpEndpoint &endpoint, const json &body) {
    const auto scheme_end = endpoint.url.find("://");
    if (scheme_end == std::string::npos) {
        throw InvalidArgument("endpoint URL needs a scheme: " + endpoint.url);
    }
    const auto path_start = endpoint.url.find('/', scheme_end + 3);
    const std::string origin = endpoint.url.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : endpoint.url.substr(path_start);

    httplib::Client client(origin);
    client.set_connection_timeout(endpoint.timeout);
    client.set_read_timeout(endpoint.timeout);
    client.set_write_timeout(endpoint.timeout);
    httplib::Headers headers;
    if (!endpoint.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + endpoint.api_key);
    }
    const auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) {
        throw ClientError("request to " + endpoint.url + " failed: " + httplib::to_string(res.error()));
    }
    if (res->status == 429 || res->status >= 500) {
        throw ClientError("request to " + endpoint.url + " returned HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
        throw Error("request to " + endpoint.url + " returned HTTP " + std::to_string(res->status) + ": " +
                    res->body);
    }
    try {
        return json::parse(res->body);
    } catch (const json::exception &e) {
        throw ClientError("malformed response from " + endpoint.url + ": " + e.what());
    }
}

} // namespace

std::string HttpLlm::complete(const CompletionRequest &request) {
    const json body = {{"model", endpoint_.model},
                       {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})},
                       {"temperature", request.temperature},
                       {"max_tokens", request.max_output_tokens}};
    const json reply = post_json(endpoint_, body);
    try {
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception &e) {
        throw ClientError(std::string("unexpected chat-completion response: ") + e.what());
    }
}

std::vector<double> HttpEmbedder::embed(const std::string &text) {
    const json reply = post_json(endpoint_, {{"model", endpoint_.model}, {"input", text}});
    try {
        return reply.at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const json::exception &e) {
        throw ClientError(std::string("unexpected embedding response: ") + e.what());
    }
}

ProcessProver::ProcessProver(std::vector<std::string> argv, std::chrono::milliseconds timeout)
    : argv_(std::move(argv)), timeout_(timeout) {
    if (argv_.empty()) {
        throw InvalidArgument("prover command line is empty");
    }
    if (timeout.count() <= 0) {
        throw InvalidArgument("prover timeout must be positive");
    }
    // A checker that exits without reading its input must not kill this process.
    static std::once_flag ignore_sigpipe;
    std::call_once(ignore_sigpipe, [] { std::signal(SIGPIPE, SIG_IGN); });
}

namespace {

struct Fd {
    int fd = -1;
    ~Fd() { reset(); }
    void reset() {
        if (fd >= 0) {
            ::close(fd);
            fd = -1;
        }
    }
};

} // namespace

VerifyResult ProcessProver::verify_theory(const std::string &source) {
    const auto start = std::chrono::steady_clock::now();
    int in_pipe[2];
    int out_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0) {
        throw ClientError(std::string("pipe failed: ") + std::strerror(errno));
    }
    Fd in_read{in_pipe[0]}, in_write{in_pipe[1]};
    if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
        throw ClientError(std::string("pipe failed: ") + std::strerror(errno));
    }
    Fd out_read{out_pipe[0]}, out_write{out_pipe[1]};

    std::vector<char *> args;
    for (const auto &a : argv_) {
        args.push_back(const_cast<char *>(a.c_str()));
    }
    args.push_back(nullptr);

    const pid_t pid = ::fork();
    if (pid < 0) {
        throw ClientError(std::string("fork failed: ") + std::strerror(errno));
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(in_read.fd, STDIN_FILENO);
        ::dup2(out_write.fd, STDOUT_FILENO);
        ::dup2(out_write.fd, STDERR_FILENO);
        ::execvp(args[0], args.data());
        const char msg[] = "exec failed\n";
        [[maybe_unused]] auto ignored = ::write(STDERR_FILENO, msg, sizeof(msg) - 1);
        ::_exit(127);
    }
    in_read.reset();
    out_write.reset();

    // Feed stdin and drain stdout together so neither side can block the other.
    ::fcntl(in_write.fd, F_SETFL, O_NONBLOCK);
    std::size_t written = 0;
    if (source.empty()) {
        in_write.reset();
    }
    std::string output;
    bool timed_out = false;
    const auto deadline = start + timeout_;
    while (out_read.fd >= 0) {
        const auto now = std::chrono::steady_clock::now();
        if (now >= deadline) {
            timed_out = true;
            break;
        }
        pollfd fds[2];
        nfds_t count = 0;
        fds[count++] = {out_read.fd, POLLIN, 0};
        if (in_write.fd >= 0) {
            fds[count++] = {in_write.fd, POLLOUT, 0};
        }
        const auto wait_ms = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
        const int ready = ::poll(fds, count, static_cast<int>(std::min<long long>(wait_ms + 1, 1000)));
        if (ready < 0 && errno != EINTR) {
            break;
        }
        if (count == 2 && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
            const ssize_t n = ::write(in_write.fd, source.data() + written, source.size() - written);
            if (n > 0) {
                written += static_cast<std::size_t>(n);
            }
            if (n < 0 && errno != EAGAIN && errno != EINTR) {
                in_write.reset();
            } else if (written == source.size()) {
                in_write.reset();
            }
        }
        if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
            char buf[4096];
            const ssize_t n = ::read(out_read.fd, buf, sizeof(buf));
            if (n > 0) {
                output.append(buf, static_cast<std::size_t>(n));
            } else if (n == 0 || (errno != EAGAIN && errno != EINTR)) {
                out_read.reset();
            }
        }
    }
    if (timed_out) {
        ::kill(-pid, SIGKILL);
        ::kill(pid, SIGKILL);
    }
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }

    VerifyResult result;
    result.elapsed = std::chrono::steady_clock::now() - start;
    result.message = output;
    if (timed_out) {
        result.accepted = false;
        result.message = "prover timed out after " + std::to_string(timeout_.count()) + " ms";
    } else if (WIFEXITED(status) && WEXITSTATUS(status) == 0) {
        result.accepted = true;
    } else {
        result.accepted = false;
        if (result.message.empty()) {
            result.message = WIFEXITED(status) ? "prover exited with status " + std::to_string(WEXITSTATUS(status))
                                               : std::string("prover terminated by a signal");
        }
    }
    return result;
}

} // namespace sgdl::clients
