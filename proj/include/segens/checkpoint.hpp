#ifndef SEGENS_CHECKPOINT_HPP
#define SEGENS_CHECKPOINT_HPP

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "segens/models.hpp"

namespace segens::models {

inline constexpr int kCheckpointFormatVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

std::string sha256_hex(std::string_view bytes);

/// Parameters followed by buffers, in registration order.
NamedTensors module_state(torch::nn::Module& module);

/// Copies `state` into `module`; names and shapes must match exactly.
void load_module_state(torch::nn::Module& module, const NamedTensors& state);

std::string serialize_tensors(const NamedTensors& tensors);
NamedTensors deserialize_tensors(std::string_view blob);

/// SHA-256 over the serialized subset of the module state whose names satisfy `keep`.
std::string state_digest(torch::nn::Module& module,
                         const std::function<bool(const std::string&)>& keep = [](const std::string&) { return true; });

/// Training provenance stored next to the parameters.
struct TrainingMeta {
    int epochs = 0;
    double best_val_loss = 0.0;
    uint64_t seed = 0;
    std::string config_digest;
};

/// Header (JSON metadata) + parameter blob + SHA-256 of the blob.
struct Checkpoint {
    nlohmann::json header;
    std::string blob;
    std::string digest;

    void verify() const;  // throws IntegrityError on mismatch
};

Checkpoint make_checkpoint(nlohmann::json header, const NamedTensors& state);

Checkpoint save_checkpoint(SegmentationModel& model, const TrainingMeta& meta = {});
SegmentationModel load_checkpoint(const Checkpoint& checkpoint);
TrainingMeta training_meta(const Checkpoint& checkpoint);

/// File layout: "SEGENSCK" | u32 version | u64 header length | header JSON |
/// u64 blob length | blob | 64 hex digest characters. Written via temp + rename.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace segens::models

#endif  // SEGENS_CHECKPOINT_HPP
