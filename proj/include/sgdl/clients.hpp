#ifndef SGDL_CLIENTS_HPP
#define SGDL_CLIENTS_HPP

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "sgdl/errors.hpp"

namespace sgdl::clients {

constexpr int kEmbeddingDim = 1536;
constexpr int kDefaultContextLimit = 3072;

struct CompletionRequest {
    std::string prompt;
    double temperature = 0.0;
    int max_output_tokens = 1024;
};

/// Sampling settings shared by every request a component issues.
struct Sampling {
    double temperature = 0.0;
    int max_output_tokens = 1024;

    CompletionRequest request(std::string prompt) const { return {std::move(prompt), temperature, max_output_tokens}; }
};

struct VerifyResult {
    bool accepted = false;
    std::string message; ///< non-empty whenever accepted is false
    std::chrono::duration<double> elapsed{0.0};
};

class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual std::string complete(const CompletionRequest &request) = 0;
};

class ProverClient {
public:
    virtual ~ProverClient() = default;
    virtual VerifyResult verify_theory(const std::string &source) = 0;
};

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::vector<double> embed(const std::string &text) = 0;
};

class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual int count(std::string_view text) const = 0;
};

/// ceil(bytes / 4).
class HeuristicTokenizer : public Tokenizer {
public:
    int count(std::string_view text) const override;
};

/// Runs of whitespace collapsed to one space, ends trimmed.
std::string normalize_prompt(std::string_view prompt);

/// Lowercase hex SHA-256 of the normalized prompt; the transcript key.
std::string prompt_digest(std::string_view prompt);

std::string sha256_hex(std::string_view bytes);

/// Replays recorded responses keyed by prompt digest. Immutable after construction.
class TranscriptLlm : public LlmClient {
public:
    explicit TranscriptLlm(std::map<std::string, std::string> responses) : responses_(std::move(responses)) {}

    /// JSON-lines of {"key", "response"}. Malformed lines raise FormatError naming the line.
    static TranscriptLlm from_jsonl(const std::string &text, const std::string &source_name = "transcript");
    static TranscriptLlm load(const std::string &path);

    std::string complete(const CompletionRequest &request) override;

    std::size_t size() const { return responses_.size(); }

private:
    std::map<std::string, std::string> responses_;
};

/// Scripted LLM backed by a callable.
class FunctionLlm : public LlmClient {
public:
    using Fn = std::function<std::string(const CompletionRequest &)>;
    explicit FunctionLlm(Fn fn) : fn_(std::move(fn)) {}

    std::string complete(const CompletionRequest &request) override { return fn_(request); }

private:
    Fn fn_;
};

/// Forwards to `inner` and keeps every (digest, response) pair for writing a transcript.
class RecordingLlm : public LlmClient {
public:
    explicit RecordingLlm(LlmClient &inner) : inner_(inner) {}

    std::string complete(const CompletionRequest &request) override;

    /// Records sorted by key, one JSON object per line.
    std::string to_jsonl() const;
    std::size_t size() const;

private:
    LlmClient &inner_;
    mutable std::mutex mutex_;
    std::map<std::string, std::string> records_;
};

/// Rejects prompts over the context limit before forwarding.
class ContextCheckedLlm : public LlmClient {
public:
    ContextCheckedLlm(LlmClient &inner, const Tokenizer &tokenizer, int context_limit = kDefaultContextLimit);

    std::string complete(const CompletionRequest &request) override;

private:
    LlmClient &inner_;
    const Tokenizer &tokenizer_;
    int limit_;
};

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{200};
    double factor = 2.0;
    std::chrono::milliseconds max_backoff{5000};
};

/// Calls `fn`, retrying ClientError with exponential backoff; the last error is rethrown.
template <class Fn>
auto with_retry(const RetryPolicy &policy, Fn &&fn) -> decltype(fn()) {
    auto delay = policy.initial_backoff;
    for (int attempt = 0;; ++attempt) {
        try {
            return fn();
        } catch (const ClientError &) {
            if (attempt >= policy.max_retries) {
                throw;
            }
        }
        std::this_thread::sleep_for(delay);
        const auto next = std::chrono::milliseconds(static_cast<std::int64_t>(static_cast<double>(delay.count()) * policy.factor));
        delay = std::min(next, policy.max_backoff);
    }
}

/// Counting semaphore bounding concurrent external calls.
class CallLimiter {
public:
    explicit CallLimiter(int limit = 4);

    class Slot {
    public:
        explicit Slot(CallLimiter &owner);
        ~Slot();
        Slot(const Slot &) = delete;
        Slot &operator=(const Slot &) = delete;

    private:
        CallLimiter &owner_;
    };

    int limit() const { return limit_; }

private:
    int limit_;
    int in_use_ = 0;
    std::mutex mutex_;
    std::condition_variable cv_;
};

/// Retry and in-flight limiting around an LLM. The limiter may be shared.
class GuardedLlm : public LlmClient {
public:
    GuardedLlm(LlmClient &inner, RetryPolicy policy, CallLimiter *limiter = nullptr)
        : inner_(inner), policy_(policy), limiter_(limiter) {}

    std::string complete(const CompletionRequest &request) override;

private:
    LlmClient &inner_;
    RetryPolicy policy_;
    CallLimiter *limiter_;
};

class GuardedProver : public ProverClient {
public:
    GuardedProver(ProverClient &inner, RetryPolicy policy, CallLimiter *limiter = nullptr)
        : inner_(inner), policy_(policy), limiter_(limiter) {}

    VerifyResult verify_theory(const std::string &source) override;

private:
    ProverClient &inner_;
    RetryPolicy policy_;
    CallLimiter *limiter_;
};

/// Arithmetic assertion checker. A theory is newline-separated lines
/// `assert <expr> = <expr>` over 64-bit integers with + - * and parentheses
/// (the Unicode minus and times signs are accepted too). Blank lines are skipped;
/// the empty theory is accepted.
class ToyProver : public ProverClient {
public:
    VerifyResult verify_theory(const std::string &source) override;
};

/// Seeded hash of the text expanded to unit-norm Gaussian components.
class HashEmbedder : public Embedder {
public:
    explicit HashEmbedder(std::uint64_t seed = 0, int dim = kEmbeddingDim) : seed_(seed), dim_(dim) {}

    std::vector<double> embed(const std::string &text) override;

private:
    std::uint64_t seed_;
    int dim_;
};

struct HttpEndpoint {
    std::string url; ///< full endpoint URL, e.g. https://host/v1/chat/completions
    std::string api_key;
    std::string model;
    std::chrono::seconds timeout{120};

    /// SGDL_LLM_URL and SGDL_LLM_KEY override the url and key when set.
    HttpEndpoint with_env_overrides() const;
};

/// Chat-completion adapter: {"model", "messages", "temperature", "max_tokens"} in,
/// choices[0].message.content out. Transport errors, 429 and 5xx raise ClientError.
class HttpLlm : public LlmClient {
public:
    explicit HttpLlm(HttpEndpoint endpoint) : endpoint_(std::move(endpoint)) {}

    std::string complete(const CompletionRequest &request) override;

private:
    HttpEndpoint endpoint_;
};

/// Embedding adapter: {"model", "input"} in, data[0].embedding out.
class HttpEmbedder : public Embedder {
public:
    explicit HttpEmbedder(HttpEndpoint endpoint) : endpoint_(std::move(endpoint)) {}

    std::vector<double> embed(const std::string &text) override;

private:
    HttpEndpoint endpoint_;
};

/// Runs an external checker with the theory on standard input. Exit status 0 accepts;
/// the captured output becomes the message. A run past the timeout is killed and rejected.
class ProcessProver : public ProverClient {
public:
    explicit ProcessProver(std::vector<std::string> argv, std::chrono::milliseconds timeout = std::chrono::seconds(120));

    VerifyResult verify_theory(const std::string &source) override;

private:
    std::vector<std::string> argv_;
    std::chrono::milliseconds timeout_;
};

} // namespace sgdl::clients

#endif // SGDL_CLIENTS_HPP
