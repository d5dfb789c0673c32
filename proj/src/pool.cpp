#include "sgdl/pool.hpp"

#include <cctype>
#include <set>
#include <sstream>

#include "sgdl/errors.hpp"

namespace sgdl {

using nlohmann::json;

namespace {

const std::vector<std::pair<const char *, std::string Prompts::*>> &prompt_fields() {
    static const std::vector<std::pair<const char *, std::string Prompts::*>> fields{
        {"demo", &Prompts::demo},
        {"initialize", &Prompts::initialize},
        {"verify", &Prompts::verify},
        {"correct", &Prompts::correct},
        {"step_theory", &Prompts::step_theory},
        {"subgoal_proof", &Prompts::subgoal_proof},
        {"sketch", &Prompts::sketch},
        {"sketch_theory", &Prompts::sketch_theory},
    };
    return fields;
}

bool is_name_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

} // namespace

json Prompts::to_json() const {
    json j = json::object();
    for (const auto &[name, member] : prompt_fields()) {
        j[name] = this->*member;
    }
    return j;
}

Prompts Prompts::from_json(const json &j) {
    Prompts p;
    for (const auto &[key, value] : j.items()) {
        bool known = false;
        for (const auto &[name, member] : prompt_fields()) {
            if (key == name) {
                p.*member = value.get<std::string>();
                known = true;
            }
        }
        if (!known) {
            throw InvalidArgument("unknown prompt template '" + key + "'");
        }
    }
    return p;
}

std::string fill(const std::string &tmpl, const std::map<std::string, std::string> &vars) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t k = 0;
    while (k < tmpl.size()) {
        if (tmpl[k] == '{') {
            std::size_t end = k + 1;
            while (end < tmpl.size() && is_name_char(tmpl[end])) {
                ++end;
            }
            if (end < tmpl.size() && tmpl[end] == '}' && end > k + 1) {
                const auto it = vars.find(tmpl.substr(k + 1, end - k - 1));
                if (it != vars.end()) {
                    out += it->second;
                    k = end + 1;
                    continue;
                }
            }
        }
        out.push_back(tmpl[k]);
        ++k;
    }
    return out;
}

std::string render_demo(const Prompts &prompts, const PoolRecord &record) {
    return fill(prompts.demo, {{"statement", record.statement},
                               {"subgoal_proof", record.subgoal_proof},
                               {"formal_sketch", record.formal_sketch}});
}

std::string render_demos(const Prompts &prompts, const std::vector<PoolRecord> &pool, const std::vector<int> &ids) {
    std::string out;
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= pool.size()) {
            throw InvalidArgument("demonstration index " + std::to_string(id) + " outside the pool");
        }
        if (!out.empty()) {
            out += '\n';
        }
        out += render_demo(prompts, pool[static_cast<std::size_t>(id)]);
    }
    return out;
}

void update_token_count(PoolRecord &record, const Prompts &prompts, const clients::Tokenizer &tokenizer) {
    record.token_count = tokenizer.count(render_demo(prompts, record));
}

std::vector<PoolRecord> parse_pool(const std::string &text, const std::string &source_name, const Prompts &prompts,
                                   const clients::Tokenizer &tokenizer) {
    std::vector<PoolRecord> pool;
    std::set<std::string> ids;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (clients::normalize_prompt(line).empty()) {
            continue;
        }
        const std::string where = source_name + ":" + std::to_string(line_no);
        PoolRecord r;
        try {
            const json j = json::parse(line);
            r.id = j.at("id").get<std::string>();
            r.statement = j.at("statement").get<std::string>();
            r.subgoal_proof = j.value("subgoal_proof", std::string());
            r.formal_sketch = j.at("formal_sketch").get<std::string>();
        } catch (const json::exception &e) {
            throw FormatError(where, e.what());
        }
        if (r.id.empty() || r.statement.empty() || r.formal_sketch.empty()) {
            throw FormatError(where, "id, statement and formal_sketch must be non-empty");
        }
        if (!ids.insert(r.id).second) {
            throw FormatError(where, "duplicate id '" + r.id + "'");
        }
        update_token_count(r, prompts, tokenizer);
        pool.push_back(std::move(r));
    }
    return pool;
}

std::string pool_to_jsonl(const std::vector<PoolRecord> &pool) {
    std::string out;
    for (const auto &r : pool) {
        out += json{{"id", r.id},
                    {"statement", r.statement},
                    {"subgoal_proof", r.subgoal_proof},
                    {"formal_sketch", r.formal_sketch},
                    {"token_count", r.token_count}}
                   .dump();
        out += '\n';
    }
    return out;
}

std::map<std::string, int> pool_index(const std::vector<PoolRecord> &pool) {
    std::map<std::string, int> index;
    for (std::size_t k = 0; k < pool.size(); ++k) {
        index.emplace(pool[k].id, static_cast<int>(k));
    }
    return index;
}

} // namespace sgdl
