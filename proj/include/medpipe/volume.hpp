#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

namespace medpipe {

enum class VoxelType : std::int16_t { U8 = 2, I16 = 4, I32 = 8, F32 = 16 };

/// A 3-D voxel grid. Voxels are stored x-fastest as doubles, which represent
/// every supported on-disk datatype exactly; the original datatype is kept
/// for lossless round trips.
struct VolumeGrid {
    std::array<int, 3> dims{1, 1, 1};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    VoxelType datatype = VoxelType::F32;
    std::array<double, 16> affine{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    std::vector<double> voxels;

    std::size_t voxel_count() const {
        return std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]);
    }
    std::size_t index(int x, int y, int z) const {
        return std::size_t(x) + std::size_t(dims[0]) * (std::size_t(y) + std::size_t(dims[1]) * z);
    }
    double& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
    double at(int x, int y, int z) const { return voxels[index(x, y, z)]; }

    static VolumeGrid make(std::array<int, 3> dims, VoxelType type,
                           std::array<double, 3> spacing = {1.0, 1.0, 1.0});
};

/// NIfTI-1 single-file reader (.nii, little-endian, 3-D, magic "n+1\0";
/// gzip-wrapped input detected by the 0x1F8B prefix). Throws BadMagic,
/// HeaderSizeMismatch, UnsupportedDatatype, UnsupportedDims, Truncated.
VolumeGrid read_nifti(const std::filesystem::path& file);

/// Writes `.nii`, or gzip-wrapped when the filename ends in `.gz`. The gzip
/// header is pinned (mtime 0) so rewrites are byte-identical.
void write_nifti(const VolumeGrid& grid, const std::filesystem::path& file);

/// Dice coefficient over nonzero voxels: 2|A∩B| / (|A|+|B|); both empty -> 1.
/// Grids must have identical dims (ShapeMismatch otherwise).
double dice(const VolumeGrid& a, const VolumeGrid& b);

struct SegmentDiceRow {
    long long segment_id = 0;
    double dice = 0.0;
    std::uint64_t voxels_a = 0;
    std::uint64_t voxels_b = 0;
    std::uint64_t voxels_overlap = 0;
    bool both_empty = false;

    bool operator==(const SegmentDiceRow&) const = default;
};

/// Per-label Dice: a voxel belongs to a segment iff its rounded value equals
/// the id. Ids absent from both grids score 1.0 with the both_empty marker.
std::vector<SegmentDiceRow> per_segment_dice(const VolumeGrid& a, const VolumeGrid& b,
                                             const std::vector<long long>& ids);

/// Voxel-wise relabel: mapped ids are replaced, everything else becomes 0.
/// Dims, spacing and affine are preserved; result datatype is I32.
VolumeGrid merge_labels(const VolumeGrid& grid,
                        const std::map<long long, long long>& mapping);

/// Distinct nonzero labels present, ascending.
std::vector<long long> labels_in(const VolumeGrid& grid);

/// Element-wise affine agreement within `tol`.
bool affine_close(const VolumeGrid& a, const VolumeGrid& b, double tol = 1e-3);

} // namespace medpipe
