#ifndef SGDL_CHECKPOINT_HPP
#define SGDL_CHECKPOINT_HPP

#include <string>

#include "json.hpp"
#include "sgdl/denoiser.hpp"
#include "sgdl/diffusion.hpp"

/// Binary model file:
///
///   "SGDM" | u32 version | u64 metadata length | metadata JSON | f64 payloads
///
/// All integers and floats are little-endian. The metadata lists every tensor
/// with its shape and byte offset into the payload, plus a checksum of the payload.
namespace sgdl::gnn {

inline constexpr unsigned kCheckpointVersion = 1;

struct Checkpoint {
    DenoiserParams params;
    diffusion::NoiseSchedule schedule{std::vector<double>{1.0}};
    /// Caller-owned metadata stored alongside the model (for example the candidate length law).
    nlohmann::json extra = nlohmann::json::object();
};

std::string serialize_checkpoint(const Checkpoint &checkpoint);
/// Either returns a complete checkpoint or throws FormatError; never a partial one.
Checkpoint parse_checkpoint(const std::string &bytes);

void save_checkpoint(const Checkpoint &checkpoint, const std::string &path);
Checkpoint load_checkpoint(const std::string &path);

nlohmann::json config_to_json(const DenoiserConfig &config);
DenoiserConfig config_from_json(const nlohmann::json &j);

} // namespace sgdl::gnn

#endif // SGDL_CHECKPOINT_HPP
