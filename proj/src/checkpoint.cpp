#include "segens/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

namespace segens::models {

namespace fs = std::filesystem;

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw IntegrityError("SHA-256 computation failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xF]);
    }
    return out;
}

NamedTensors module_state(torch::nn::Module& module) {
    NamedTensors out;
    for (auto& p : module.named_parameters()) out.emplace_back(p.key(), p.value());
    for (auto& b : module.named_buffers()) out.emplace_back(b.key(), b.value());
    return out;
}

void load_module_state(torch::nn::Module& module, const NamedTensors& state) {
    auto target = module_state(module);
    if (target.size() != state.size()) {
        throw IntegrityError("state has " + std::to_string(state.size()) + " tensors, module expects " +
                             std::to_string(target.size()));
    }
    torch::NoGradGuard no_grad;
    for (size_t i = 0; i < target.size(); ++i) {
        auto& [name, dst] = target[i];
        const auto& [src_name, src] = state[i];
        if (name != src_name || dst.sizes() != src.sizes() || dst.scalar_type() != src.scalar_type()) {
            throw IntegrityError("state tensor '" + src_name + "' does not match module tensor '" + name + "'");
        }
        dst.copy_(src);
    }
}

namespace {

enum class DType : uint8_t { Float32 = 0, Float64 = 1, Int64 = 2 };

DType encode_dtype(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat32: return DType::Float32;
        case torch::kFloat64: return DType::Float64;
        case torch::kInt64: return DType::Int64;
        default: throw ArgumentError("unsupported tensor dtype for serialization");
    }
}

torch::ScalarType decode_dtype(uint8_t code) {
    switch (static_cast<DType>(code)) {
        case DType::Float32: return torch::kFloat32;
        case DType::Float64: return torch::kFloat64;
        case DType::Int64: return torch::kInt64;
    }
    throw IntegrityError("unknown dtype code in checkpoint");
}

template <typename T>
void put(std::string& out, T value) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
}

struct Reader {
    std::string_view data;
    size_t pos = 0;

    template <typename T>
    T get() {
        if (pos + sizeof(T) > data.size()) throw IntegrityError("truncated tensor blob");
        T value;
        std::memcpy(&value, data.data() + pos, sizeof(T));
        pos += sizeof(T);
        return value;
    }
    std::string_view take(size_t n) {
        if (pos + n > data.size()) throw IntegrityError("truncated tensor blob");
        auto out = data.substr(pos, n);
        pos += n;
        return out;
    }
};

}  // namespace

std::string serialize_tensors(const NamedTensors& tensors) {
    std::string out;
    put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        const auto t = tensor.detach().to(torch::kCPU).contiguous();
        put<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.append(name);
        put<uint8_t>(out, static_cast<uint8_t>(encode_dtype(t.scalar_type())));
        put<uint32_t>(out, static_cast<uint32_t>(t.dim()));
        for (auto d : t.sizes()) put<int64_t>(out, d);
        out.append(static_cast<const char*>(t.data_ptr()), t.numel() * t.element_size());
    }
    return out;
}

NamedTensors deserialize_tensors(std::string_view blob) {
    Reader r{blob};
    NamedTensors out;
    const auto count = r.get<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<uint32_t>();
        std::string name(r.take(name_len));
        const auto dtype = decode_dtype(r.get<uint8_t>());
        const auto ndim = r.get<uint32_t>();
        std::vector<int64_t> dims;
        for (uint32_t d = 0; d < ndim; ++d) dims.push_back(r.get<int64_t>());
        auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
        const auto bytes = r.take(static_cast<size_t>(t.numel() * t.element_size()));
        std::memcpy(t.data_ptr(), bytes.data(), bytes.size());
        out.emplace_back(std::move(name), std::move(t));
    }
    if (r.pos != blob.size()) throw IntegrityError("trailing bytes in tensor blob");
    return out;
}

std::string state_digest(torch::nn::Module& module, const std::function<bool(const std::string&)>& keep) {
    NamedTensors subset;
    for (auto& entry : module_state(module)) {
        if (keep(entry.first)) subset.push_back(std::move(entry));
    }
    return sha256_hex(serialize_tensors(subset));
}

void Checkpoint::verify() const {
    if (sha256_hex(blob) != digest) throw IntegrityError("checkpoint digest mismatch: parameters were modified");
}

Checkpoint make_checkpoint(nlohmann::json header, const NamedTensors& state) {
    Checkpoint ck;
    ck.blob = serialize_tensors(state);
    ck.digest = sha256_hex(ck.blob);
    header["format_version"] = kCheckpointFormatVersion;
    ck.header = std::move(header);
    return ck;
}

Checkpoint save_checkpoint(SegmentationModel& model, const TrainingMeta& meta) {
    const auto& cfg = model.net->config();
    nlohmann::json header;
    header["kind"] = "segmentation_model";
    header["backbone"] = std::string(backbone_name(cfg.backbone));
    header["organ"] = model.organ ? std::string(organ_name(*model.organ)) : std::string("multiclass");
    nlohmann::json windows = nlohmann::json::array();
    for (const auto& w : model.windows) windows.push_back({{"width", w.width}, {"level", w.level}});
    header["windows"] = windows;
    header["net"] = {{"in_channels", cfg.in_channels},
                     {"out_channels", cfg.out_channels},
                     {"width", cfg.width},
                     {"depth", cfg.depth}};
    header["source_dataset"] = model.source_dataset;
    header["training"] = {{"epochs", meta.epochs},
                          {"best_val_loss", meta.best_val_loss},
                          {"seed", meta.seed},
                          {"config_digest", meta.config_digest}};
    return make_checkpoint(std::move(header), module_state(*model.net));
}

SegmentationModel load_checkpoint(const Checkpoint& checkpoint) {
    checkpoint.verify();
    const auto& h = checkpoint.header;
    if (h.value("kind", "") != "segmentation_model") throw ConfigError("checkpoint does not hold a segmentation model");
    NetConfig cfg;
    cfg.backbone = backbone_from_name(h.at("backbone").get<std::string>());
    cfg.in_channels = h.at("net").at("in_channels").get<int64_t>();
    cfg.out_channels = h.at("net").at("out_channels").get<int64_t>();
    cfg.width = h.at("net").at("width").get<double>();
    cfg.depth = h.at("net").at("depth").get<int>();

    SegmentationModel model;
    model.net = make_net(cfg);
    const auto organ = h.at("organ").get<std::string>();
    if (organ != "multiclass") model.organ = organ_from_name(organ);
    for (const auto& w : h.at("windows")) model.windows.push_back({w.at("width").get<double>(), w.at("level").get<double>()});
    model.source_dataset = h.value("source_dataset", "default");
    load_module_state(*model.net, deserialize_tensors(checkpoint.blob));
    model.net->eval();
    return model;
}

TrainingMeta training_meta(const Checkpoint& checkpoint) {
    TrainingMeta meta;
    if (!checkpoint.header.contains("training")) return meta;
    const auto& t = checkpoint.header.at("training");
    meta.epochs = t.value("epochs", 0);
    meta.best_val_loss = t.value("best_val_loss", 0.0);
    meta.seed = t.value("seed", uint64_t{0});
    meta.config_digest = t.value("config_digest", "");
    return meta;
}

namespace {
constexpr char kMagic[8] = {'S', 'E', 'G', 'E', 'N', 'S', 'C', 'K'};
}

void write_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
    std::string out(kMagic, sizeof(kMagic));
    put<uint32_t>(out, kCheckpointFormatVersion);
    const auto header = checkpoint.header.dump();
    put<uint64_t>(out, header.size());
    out.append(header);
    put<uint64_t>(out, checkpoint.blob.size());
    out.append(checkpoint.blob);
    out.append(checkpoint.digest);

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write '" + tmp.string() + "'");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string data = ss.str();
    Reader r{data};
    if (r.take(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
        throw IntegrityError("'" + path.string() + "' is not a checkpoint file");
    }
    const auto version = r.get<uint32_t>();
    if (version != kCheckpointFormatVersion) {
        throw IntegrityError("unsupported checkpoint format version " + std::to_string(version));
    }
    Checkpoint ck;
    const auto header_len = r.get<uint64_t>();
    try {
        ck.header = nlohmann::json::parse(r.take(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("corrupt checkpoint header in '" + path.string() + "': " + e.what());
    }
    const auto blob_len = r.get<uint64_t>();
    ck.blob = std::string(r.take(blob_len));
    ck.digest = std::string(r.take(64));
    if (r.pos != data.size()) throw IntegrityError("trailing bytes in checkpoint '" + path.string() + "'");
    ck.verify();
    return ck;
}

}  // namespace segens::models
