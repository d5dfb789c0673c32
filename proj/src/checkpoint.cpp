#include "sgdl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include "sgdl/errors.hpp"
#include "sgdl/fileio.hpp"
#include "sgdl/rng.hpp"

namespace sgdl::gnn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'G', 'D', 'M'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 8;
const std::string kBetaTensor = "schedule.betas";

template <class T>
void put(std::string &out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T get(const std::string &in, std::size_t offset) {
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    return value;
}

std::string hex64(std::uint64_t v) {
    static const char *digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int k = 15; k >= 0; --k) {
        s[static_cast<std::size_t>(k)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

} // namespace

nlohmann::json config_to_json(const DenoiserConfig &c) {
    return {{"layers", c.layers},
            {"hidden_dim", c.hidden_dim},
            {"embed_dim", c.embed_dim},
            {"time_embed_dim", c.time_embed_dim},
            {"pool_size", c.pool_size}};
}

DenoiserConfig config_from_json(const nlohmann::json &j) {
    DenoiserConfig c;
    c.layers = j.value("layers", c.layers);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.pool_size = j.value("pool_size", c.pool_size);
    c.validate();
    return c;
}

std::string serialize_checkpoint(const Checkpoint &checkpoint) {
    std::string payload;
    nlohmann::json manifest = nlohmann::json::array();
    auto add = [&](const std::string &name, const Mat &m) {
        manifest.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", payload.size()}});
        payload.append(reinterpret_cast<const char *>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    };
    checkpoint.params.for_each([&](const std::string &name, const Mat &m, bool) { add(name, m); });
    const auto &betas = checkpoint.schedule.betas();
    Mat beta_row(1, static_cast<Eigen::Index>(betas.size()));
    for (std::size_t k = 0; k < betas.size(); ++k) {
        beta_row(0, static_cast<Eigen::Index>(k)) = betas[k];
    }
    add(kBetaTensor, beta_row);

    const nlohmann::json meta = {
        {"config", config_to_json(checkpoint.params.config)},
        {"schedule", {{"kind", diffusion::to_string(checkpoint.schedule.kind())}, {"steps", betas.size()}, {"betas", betas}}},
        {"tensors", manifest},
        {"payload_bytes", payload.size()},
        {"checksum", hex64(fnv1a64(payload))},
        {"extra", checkpoint.extra},
    };
    const std::string meta_text = meta.dump();

    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, meta_text.size());
    out += meta_text;
    out += payload;
    return out;
}

Checkpoint parse_checkpoint(const std::string &bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("magic", "missing SGDM signature");
    }
    if (bytes.size() < kHeaderBytes) {
        throw FormatError("header", "file ends inside the header");
    }
    const auto version = get<std::uint32_t>(bytes, 4);
    if (version != kCheckpointVersion) {
        throw UnsupportedVersion(version);
    }
    const auto meta_len = get<std::uint64_t>(bytes, 8);
    if (meta_len > bytes.size() - kHeaderBytes) {
        throw FormatError("metadata", "file ends inside the metadata document");
    }
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(bytes.substr(kHeaderBytes, meta_len));
    } catch (const nlohmann::json::exception &e) {
        throw FormatError("metadata", e.what());
    }
    const std::string payload = bytes.substr(kHeaderBytes + meta_len);

    Checkpoint out;
    std::map<std::string, Mat> tensors;
    try {
        out.params = init_params(config_from_json(meta.at("config")), 0);
        const auto expected = meta.at("payload_bytes").get<std::size_t>();
        if (payload.size() != expected) {
            throw FormatError("payload", "expected " + std::to_string(expected) + " bytes, found " +
                                             std::to_string(payload.size()));
        }
        if (meta.at("checksum").get<std::string>() != hex64(fnv1a64(payload))) {
            throw FormatError("payload", "checksum mismatch");
        }
        for (const auto &entry : meta.at("tensors")) {
            const auto name = entry.at("name").get<std::string>();
            const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
            const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
            const auto offset = entry.at("offset").get<std::size_t>();
            const std::size_t size = static_cast<std::size_t>(rows * cols) * sizeof(double);
            if (rows < 0 || cols < 0 || offset > payload.size() || size > payload.size() - offset) {
                throw FormatError("manifest", "tensor " + name + " lies outside the payload");
            }
            Mat m(rows, cols);
            std::memcpy(m.data(), payload.data() + offset, size);
            tensors.emplace(name, std::move(m));
        }
    } catch (const nlohmann::json::exception &e) {
        throw FormatError("metadata", e.what());
    } catch (const InvalidArgument &e) {
        throw FormatError("metadata", e.what());
    }

    out.params.for_each([&](const std::string &name, Mat &m, bool) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw FormatError("manifest", "missing tensor " + name);
        }
        if (it->second.rows() != m.rows() || it->second.cols() != m.cols()) {
            throw FormatError("manifest", "tensor " + name + " has the wrong shape");
        }
        m = it->second;
    });
    const auto beta_it = tensors.find(kBetaTensor);
    if (beta_it == tensors.end() || beta_it->second.rows() != 1) {
        throw FormatError("manifest", "missing schedule ratios");
    }
    std::vector<double> betas(beta_it->second.data(), beta_it->second.data() + beta_it->second.size());
    try {
        const auto kind = diffusion::schedule_kind_from_string(meta.at("schedule").at("kind").get<std::string>());
        out.schedule = diffusion::NoiseSchedule(std::move(betas), kind);
        out.extra = meta.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception &e) {
        throw FormatError("schedule", e.what());
    } catch (const InvalidArgument &e) {
        throw FormatError("schedule", e.what());
    }
    return out;
}

void save_checkpoint(const Checkpoint &checkpoint, const std::string &path) {
    write_file_atomic(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::string &path) { return parse_checkpoint(read_file(path)); }

} // namespace sgdl::gnn
