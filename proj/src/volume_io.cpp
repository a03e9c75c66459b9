#include "segens/volume_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <memory>

#include "segens/log.hpp"

namespace segens::io {

namespace fs = std::filesystem;

namespace {

// Header floats widened through their shortest decimal form, so 1.2f reads back as 1.2.
double widen(float v) {
    char buf[32];
    const auto end = std::to_chars(buf, buf + sizeof(buf), std::abs(v)).ptr;
    double out = 0.0;
    std::from_chars(buf, end, out);
    return out;
}

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1;
    float intent_p2;
    float intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max;
    float cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax;
    int32_t glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b;
    float quatern_c;
    float quatern_d;
    float qoffset_x;
    float qoffset_y;
    float qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

enum NiftiType : int16_t {
    kUInt8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kInt8 = 256,
    kUInt16 = 512,
};

struct GzCloser {
    void operator()(gzFile_s* f) const {
        if (f) gzclose(f);
    }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

GzHandle open_gz(const fs::path& path, const char* mode) {
    GzHandle handle(gzopen(path.string().c_str(), mode));
    if (!handle) throw IoError("cannot open '" + path.string() + "'");
    return handle;
}

void read_exact(gzFile f, void* dst, size_t bytes, const fs::path& path) {
    auto* out = static_cast<char*>(dst);
    while (bytes > 0) {
        const auto chunk = static_cast<unsigned>(std::min<size_t>(bytes, 1u << 30));
        const int got = gzread(f, out, chunk);
        if (got <= 0) throw IoError("truncated or corrupt NIfTI file '" + path.string() + "'");
        out += got;
        bytes -= static_cast<size_t>(got);
    }
}

void write_exact(gzFile f, const void* src, size_t bytes, const fs::path& path) {
    const auto* in = static_cast<const char*>(src);
    while (bytes > 0) {
        const auto chunk = static_cast<unsigned>(std::min<size_t>(bytes, 1u << 30));
        const int put = gzwrite(f, in, chunk);
        if (put <= 0) throw IoError("write failed for '" + path.string() + "'");
        in += put;
        bytes -= static_cast<size_t>(put);
    }
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct RawVolume {
    int64_t depth = 0, rows = 0, cols = 0;
    Spacing spacing;
    std::vector<double> values;
};

template <typename T>
void decode(const std::vector<char>& bytes, std::vector<double>& out) {
    const size_t n = bytes.size() / sizeof(T);
    out.resize(n);
    for (size_t i = 0; i < n; ++i) {
        T v;
        std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
        out[i] = static_cast<double>(v);
    }
}

RawVolume read_nifti(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("no such file '" + path.string() + "'");
    auto file = open_gz(path, "rb");
    Nifti1Header hdr{};
    read_exact(file.get(), &hdr, sizeof(hdr), path);
    if (hdr.sizeof_hdr != 348) throw IoError("'" + path.string() + "' is not a little-endian NIfTI-1 file");
    if (std::memcmp(hdr.magic, "n+1", 3) != 0) throw IoError("'" + path.string() + "' is not a single-file NIfTI-1");
    if (hdr.dim[0] < 2 || hdr.dim[0] > 7) throw IoError("unsupported dimensionality in '" + path.string() + "'");
    for (int i = 4; i <= hdr.dim[0]; ++i) {
        if (hdr.dim[i] > 1) throw IoError("only 3-D volumes are supported: '" + path.string() + "'");
    }

    RawVolume raw;
    raw.cols = hdr.dim[1];
    raw.rows = hdr.dim[2];
    raw.depth = hdr.dim[0] >= 3 ? hdr.dim[3] : 1;
    if (raw.cols <= 0 || raw.rows <= 0 || raw.depth <= 0) throw IoError("bad dimensions in '" + path.string() + "'");
    raw.spacing = {hdr.dim[0] >= 3 ? widen(hdr.pixdim[3]) : 1.0, widen(hdr.pixdim[2]), widen(hdr.pixdim[1])};
    if (!(raw.spacing.x > 0) || !(raw.spacing.y > 0) || !(raw.spacing.z > 0)) {
        log::warn("'", path.string(), "' has non-positive spacing; using 1 mm");
        if (!(raw.spacing.x > 0)) raw.spacing.x = 1.0;
        if (!(raw.spacing.y > 0)) raw.spacing.y = 1.0;
        if (!(raw.spacing.z > 0)) raw.spacing.z = 1.0;
    }

    const auto skip = static_cast<int64_t>(hdr.vox_offset) - static_cast<int64_t>(sizeof(hdr));
    if (skip < 0) throw IoError("bad vox_offset in '" + path.string() + "'");
    std::vector<char> ext(static_cast<size_t>(skip));
    if (skip > 0) read_exact(file.get(), ext.data(), ext.size(), path);

    const size_t count = static_cast<size_t>(raw.cols * raw.rows * raw.depth);
    const size_t elem = static_cast<size_t>(hdr.bitpix / 8);
    if (elem == 0) throw IoError("bad bitpix in '" + path.string() + "'");
    std::vector<char> bytes(count * elem);
    read_exact(file.get(), bytes.data(), bytes.size(), path);

    switch (hdr.datatype) {
        case kUInt8: decode<uint8_t>(bytes, raw.values); break;
        case kInt8: decode<int8_t>(bytes, raw.values); break;
        case kInt16: decode<int16_t>(bytes, raw.values); break;
        case kUInt16: decode<uint16_t>(bytes, raw.values); break;
        case kInt32: decode<int32_t>(bytes, raw.values); break;
        case kFloat32: decode<float>(bytes, raw.values); break;
        case kFloat64: decode<double>(bytes, raw.values); break;
        default: throw IoError("unsupported NIfTI datatype " + std::to_string(hdr.datatype));
    }
    const bool scaled = hdr.scl_slope != 0.0f && !(hdr.scl_slope == 1.0f && hdr.scl_inter == 0.0f);
    if (scaled) {
        for (auto& v : raw.values) v = v * hdr.scl_slope + hdr.scl_inter;
    }
    return raw;
}

Nifti1Header make_header(const std::array<int64_t, 3>& shape, const Spacing& spacing, int16_t datatype,
                         int16_t bitpix) {
    Nifti1Header hdr{};
    hdr.sizeof_hdr = 348;
    hdr.regular = 'r';
    hdr.dim[0] = 3;
    hdr.dim[1] = static_cast<int16_t>(shape[2]);
    hdr.dim[2] = static_cast<int16_t>(shape[1]);
    hdr.dim[3] = static_cast<int16_t>(shape[0]);
    for (int i = 4; i < 8; ++i) hdr.dim[i] = 1;
    hdr.datatype = datatype;
    hdr.bitpix = bitpix;
    hdr.pixdim[0] = 1.0f;
    hdr.pixdim[1] = static_cast<float>(spacing.x);
    hdr.pixdim[2] = static_cast<float>(spacing.y);
    hdr.pixdim[3] = static_cast<float>(spacing.z);
    hdr.vox_offset = 352.0f;
    hdr.scl_slope = 1.0f;
    hdr.xyzt_units = 2;  // mm
    hdr.sform_code = 1;
    hdr.srow_x[0] = hdr.pixdim[1];
    hdr.srow_y[1] = hdr.pixdim[2];
    hdr.srow_z[2] = hdr.pixdim[3];
    std::memcpy(hdr.magic, "n+1\0", 4);
    return hdr;
}

template <typename T>
void write_nifti(const fs::path& path, const std::array<int64_t, 3>& shape, const Spacing& spacing,
                 const std::vector<T>& values, int16_t datatype) {
    for (auto d : shape) {
        if (d <= 0 || d > 32767) throw ArgumentError("NIfTI-1 dimension out of range");
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto tmp = fs::path(path.string() + ".tmp");
    {
        auto file = open_gz(tmp, ends_with(path.string(), ".gz") ? "wb1" : "wbT");
        const auto hdr = make_header(shape, spacing, datatype, static_cast<int16_t>(sizeof(T) * 8));
        write_exact(file.get(), &hdr, sizeof(hdr), path);
        const char extension[4] = {0, 0, 0, 0};
        write_exact(file.get(), extension, sizeof(extension), path);
        write_exact(file.get(), values.data(), values.size() * sizeof(T), path);
    }
    fs::rename(tmp, path);
}

}  // namespace

fs::path resolve_image_path(const fs::path& path) {
    if (fs::is_directory(path)) {
        for (const char* name : {"data.nii.gz", "data.nii", "image.nii.gz", "image.nii"}) {
            if (fs::exists(path / name)) return path / name;
        }
        const auto dirname = path.filename().string();
        for (const auto& suffix : {".nii.gz", ".nii"}) {
            if (fs::exists(path / (dirname + suffix))) return path / (dirname + suffix);
        }
        throw IoError("no volume file found in '" + path.string() + "'");
    }
    if (!fs::exists(path)) throw IoError("no such file '" + path.string() + "'");
    return path;
}

std::optional<fs::path> find_sibling_mask(const fs::path& image_path) {
    const auto dir = image_path.parent_path();
    std::string stem = image_path.filename().string();
    for (const auto& suffix : {".nii.gz", ".nii"}) {
        if (ends_with(stem, suffix)) {
            stem.resize(stem.size() - std::string_view(suffix).size());
            break;
        }
    }
    std::vector<fs::path> candidates;
    for (const auto& suffix : {".nii.gz", ".nii"}) {
        candidates.push_back(dir / (stem + "_label" + suffix));
    }
    if (stem == "data" || stem == "image" || stem == dir.filename().string()) {
        for (const char* name : {"label.nii.gz", "label.nii", "GT.nii.gz", "GT.nii"}) candidates.push_back(dir / name);
    }
    for (const auto& c : candidates) {
        if (c != image_path && fs::exists(c)) return c;
    }
    return std::nullopt;
}

LabelMask load_mask(const fs::path& path, int class_count) {
    const auto raw = read_nifti(path);
    LabelMask mask;
    mask.class_count = class_count;
    mask.labels = Grid3<uint8_t>(raw.depth, raw.rows, raw.cols);
    for (size_t i = 0; i < raw.values.size(); ++i) {
        const double v = std::round(raw.values[i]);
        if (v < 0 || v > class_count) {
            throw IoError("label value " + std::to_string(static_cast<long long>(v)) + " in '" + path.string() +
                          "' outside 0.." + std::to_string(class_count));
        }
        mask.labels.data[i] = static_cast<uint8_t>(v);
    }
    return mask;
}

LoadedCase load_volume(const fs::path& path, int class_count) {
    const auto image_path = resolve_image_path(path);
    const auto raw = read_nifti(image_path);

    LoadedCase out;
    out.volume.spacing = raw.spacing;
    out.volume.voxels = Grid3<int16_t>(raw.depth, raw.rows, raw.cols);
    auto pid = image_path.parent_path().filename().string();
    if (pid.empty()) pid = image_path.stem().string();
    out.volume.patient_id = pid;

    size_t clamped = 0;
    for (size_t i = 0; i < raw.values.size(); ++i) {
        double v = std::round(raw.values[i]);
        if (v < kHuMin || v > kHuMax) {
            ++clamped;
            v = std::clamp(v, static_cast<double>(kHuMin), static_cast<double>(kHuMax));
        }
        out.volume.voxels.data[i] = static_cast<int16_t>(v);
    }
    if (clamped > 0) {
        log::warn("'", image_path.string(), "': ", clamped, " voxels outside [", kHuMin, ", ", kHuMax, "] HU were clamped");
    }

    if (auto mask_path = find_sibling_mask(image_path)) {
        auto mask = load_mask(*mask_path, class_count);
        if (mask.labels.shape() != out.volume.voxels.shape()) {
            throw IoError("mask '" + mask_path->string() + "' does not match volume shape");
        }
        out.mask = std::move(mask);
    }
    return out;
}

void save_volume(const fs::path& path, const CtVolume& volume) {
    write_nifti(path, volume.voxels.shape(), volume.spacing, volume.voxels.data, kInt16);
}

void save_mask(const fs::path& path, const LabelMask& mask, const Spacing& spacing) {
    write_nifti(path, mask.labels.shape(), spacing, mask.labels.data, kUInt8);
}

}  // namespace segens::io
