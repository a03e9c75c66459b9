#ifndef SEGENS_VOLUME_IO_HPP
#define SEGENS_VOLUME_IO_HPP

#include <filesystem>
#include <optional>

#include "segens/core.hpp"

namespace segens::io {

struct LoadedCase {
    CtVolume volume;
    std::optional<LabelMask> mask;
};

/// Reads a NIfTI-1 volume (.nii or .nii.gz). `path` may be the image file or a
/// case directory containing `data.nii[.gz]`. A sibling label file (`label.nii[.gz]`,
/// `GT.nii[.gz]` or `<stem>_label.nii[.gz]`) is loaded as the mask when present.
/// Voxels outside [-1024, 3071] are clamped and a warning is logged.
LoadedCase load_volume(const std::filesystem::path& path, int class_count = kOrganCount);

/// Reads an integer label volume. Values are used as-is.
LabelMask load_mask(const std::filesystem::path& path, int class_count = kOrganCount);

/// Locates the label file paired with an image file, if any.
std::optional<std::filesystem::path> find_sibling_mask(const std::filesystem::path& image_path);

/// Resolves a case directory or image path to the image file.
std::filesystem::path resolve_image_path(const std::filesystem::path& path);

/// Writes int16 HU voxels. Gzip compression is used when the name ends in `.gz`.
void save_volume(const std::filesystem::path& path, const CtVolume& volume);

/// Writes uint8 labels with the given spacing.
void save_mask(const std::filesystem::path& path, const LabelMask& mask, const Spacing& spacing);

}  // namespace segens::io

#endif  // SEGENS_VOLUME_IO_HPP
