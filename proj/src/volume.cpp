#include "medpipe/volume.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"

namespace medpipe {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;

template <typename T>
T read_le(const std::uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T)); // little-endian host
    return v;
}

template <typename T>
void write_le(std::uint8_t* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

int bytes_per_voxel(VoxelType type) {
    switch (type) {
        case VoxelType::U8: return 1;
        case VoxelType::I16: return 2;
        case VoxelType::I32: return 4;
        case VoxelType::F32: return 4;
    }
    return 0;
}

} // namespace

VolumeGrid VolumeGrid::make(std::array<int, 3> dims, VoxelType type,
                            std::array<double, 3> spacing) {
    VolumeGrid g;
    g.dims = dims;
    g.spacing = spacing;
    g.datatype = type;
    g.affine = {spacing[0], 0, 0, 0, 0, spacing[1], 0, 0, 0, 0, spacing[2], 0, 0, 0, 0, 1};
    g.voxels.assign(g.voxel_count(), 0.0);
    return g;
}

VolumeGrid read_nifti(const std::filesystem::path& file) {
    std::vector<std::uint8_t> raw = fs::read_bytes(file);
    if (raw.size() >= 2 && raw[0] == 0x1F && raw[1] == 0x8B) raw = fs::gunzip(raw);
    if (raw.size() < kHeaderSize) fail("HeaderSizeMismatch", "file shorter than NIfTI-1 header");

    const std::uint8_t* h = raw.data();
    if (read_le<std::int32_t>(h + 0) != 348) {
        fail("HeaderSizeMismatch", "sizeof_hdr != 348 (not little-endian NIfTI-1?)");
    }
    if (std::memcmp(h + 344, "n+1\0", 4) != 0) {
        fail("BadMagic", "magic is not \"n+1\" (single-file NIfTI-1 required)");
    }

    std::int16_t ndim = read_le<std::int16_t>(h + 40);
    if (ndim != 3) fail("UnsupportedDims", "dim[0] = " + std::to_string(ndim) + ", expected 3");

    VolumeGrid g;
    for (int i = 0; i < 3; ++i) {
        std::int16_t d = read_le<std::int16_t>(h + 40 + 2 * (i + 1));
        if (d < 1) fail("UnsupportedDims", "nonpositive dimension");
        g.dims[i] = d;
    }

    std::int16_t datatype = read_le<std::int16_t>(h + 70);
    switch (datatype) {
        case 2: g.datatype = VoxelType::U8; break;
        case 4: g.datatype = VoxelType::I16; break;
        case 8: g.datatype = VoxelType::I32; break;
        case 16: g.datatype = VoxelType::F32; break;
        default: fail("UnsupportedDatatype", "datatype code " + std::to_string(datatype));
    }

    float qfac = read_le<float>(h + 76);
    for (int i = 0; i < 3; ++i) {
        float s = read_le<float>(h + 76 + 4 * (i + 1));
        g.spacing[i] = s > 0 ? s : 1.0;
    }

    std::int16_t qform_code = read_le<std::int16_t>(h + 252);
    std::int16_t sform_code = read_le<std::int16_t>(h + 254);
    if (sform_code > 0) {
        for (int row = 0; row < 3; ++row) {
            for (int col = 0; col < 4; ++col) {
                g.affine[row * 4 + col] = read_le<float>(h + 280 + 16 * row + 4 * col);
            }
        }
        g.affine[12] = g.affine[13] = g.affine[14] = 0;
        g.affine[15] = 1;
    } else if (qform_code > 0) {
        double b = read_le<float>(h + 256), c = read_le<float>(h + 260),
               d = read_le<float>(h + 264);
        double a_sq = 1.0 - (b * b + c * c + d * d);
        double a = a_sq > 0 ? std::sqrt(a_sq) : 0.0;
        double f = qfac >= 0 ? 1.0 : -1.0;
        double sx = g.spacing[0], sy = g.spacing[1], sz = g.spacing[2];
        double r[3][3] = {
            {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c}};
        double off[3] = {read_le<float>(h + 268), read_le<float>(h + 272),
                         read_le<float>(h + 276)};
        for (int row = 0; row < 3; ++row) {
            g.affine[row * 4 + 0] = r[row][0] * sx;
            g.affine[row * 4 + 1] = r[row][1] * sy;
            g.affine[row * 4 + 2] = r[row][2] * sz * f;
            g.affine[row * 4 + 3] = off[row];
        }
        g.affine[12] = g.affine[13] = g.affine[14] = 0;
        g.affine[15] = 1;
    } else {
        g.affine = {g.spacing[0], 0, 0, 0, 0, g.spacing[1], 0, 0,
                    0, 0, g.spacing[2], 0, 0, 0, 0, 1};
    }

    auto vox_offset = static_cast<std::size_t>(read_le<float>(h + 108));
    if (vox_offset < kHeaderSize) fail("HeaderSizeMismatch", "vox_offset below header size");

    std::size_t count = g.voxel_count();
    std::size_t payload = count * std::size_t(bytes_per_voxel(g.datatype));
    if (raw.size() < vox_offset + payload) fail("Truncated", "voxel payload exceeds file size");

    const std::uint8_t* data = raw.data() + vox_offset;
    g.voxels.resize(count);
    switch (g.datatype) {
        case VoxelType::U8:
            for (std::size_t i = 0; i < count; ++i) g.voxels[i] = data[i];
            break;
        case VoxelType::I16:
            for (std::size_t i = 0; i < count; ++i) {
                g.voxels[i] = read_le<std::int16_t>(data + 2 * i);
            }
            break;
        case VoxelType::I32:
            for (std::size_t i = 0; i < count; ++i) {
                g.voxels[i] = read_le<std::int32_t>(data + 4 * i);
            }
            break;
        case VoxelType::F32:
            for (std::size_t i = 0; i < count; ++i) {
                g.voxels[i] = read_le<float>(data + 4 * i);
            }
            break;
    }
    return g;
}

void write_nifti(const VolumeGrid& grid, const std::filesystem::path& file) {
    if (grid.voxels.size() != grid.voxel_count()) {
        fail("UnsupportedDims", "voxel buffer size does not match dims");
    }
    std::size_t payload = grid.voxel_count() * std::size_t(bytes_per_voxel(grid.datatype));
    std::vector<std::uint8_t> raw(kVoxOffset + payload, 0);
    std::uint8_t* h = raw.data();

    write_le<std::int32_t>(h + 0, 348);
    write_le<std::int16_t>(h + 40, 3);
    for (int i = 0; i < 3; ++i) {
        write_le<std::int16_t>(h + 40 + 2 * (i + 1), std::int16_t(grid.dims[i]));
    }
    for (int i = 4; i <= 7; ++i) write_le<std::int16_t>(h + 40 + 2 * i, 1);
    write_le<std::int16_t>(h + 70, std::int16_t(grid.datatype));
    write_le<std::int16_t>(h + 72, std::int16_t(bytes_per_voxel(grid.datatype) * 8));
    write_le<float>(h + 76, 1.0f); // qfac
    for (int i = 0; i < 3; ++i) write_le<float>(h + 76 + 4 * (i + 1), float(grid.spacing[i]));
    write_le<float>(h + 108, float(kVoxOffset));
    write_le<float>(h + 112, 1.0f); // scl_slope
    write_le<std::int16_t>(h + 252, 0);
    write_le<std::int16_t>(h + 254, 1);
    for (int row = 0; row < 3; ++row) {
        for (int col = 0; col < 4; ++col) {
            write_le<float>(h + 280 + 16 * row + 4 * col, float(grid.affine[row * 4 + col]));
        }
    }
    std::memcpy(h + 344, "n+1\0", 4);

    std::uint8_t* data = raw.data() + kVoxOffset;
    std::size_t count = grid.voxel_count();
    switch (grid.datatype) {
        case VoxelType::U8:
            for (std::size_t i = 0; i < count; ++i) {
                data[i] = std::uint8_t(std::llround(grid.voxels[i]));
            }
            break;
        case VoxelType::I16:
            for (std::size_t i = 0; i < count; ++i) {
                write_le<std::int16_t>(data + 2 * i, std::int16_t(std::llround(grid.voxels[i])));
            }
            break;
        case VoxelType::I32:
            for (std::size_t i = 0; i < count; ++i) {
                write_le<std::int32_t>(data + 4 * i, std::int32_t(std::llround(grid.voxels[i])));
            }
            break;
        case VoxelType::F32:
            for (std::size_t i = 0; i < count; ++i) {
                write_le<float>(data + 4 * i, float(grid.voxels[i]));
            }
            break;
    }

    if (file.extension() == ".gz") {
        auto packed = fs::gzip_deterministic(raw);
        fs::write_bytes(file, packed.data(), packed.size());
    } else {
        fs::write_bytes(file, raw.data(), raw.size());
    }
}

namespace {

void require_same_dims(const VolumeGrid& a, const VolumeGrid& b) {
    if (a.dims != b.dims) {
        fail("ShapeMismatch",
             "grid dims differ: " + std::to_string(a.dims[0]) + "x" + std::to_string(a.dims[1]) +
                 "x" + std::to_string(a.dims[2]) + " vs " + std::to_string(b.dims[0]) + "x" +
                 std::to_string(b.dims[1]) + "x" + std::to_string(b.dims[2]));
    }
}

} // namespace

double dice(const VolumeGrid& a, const VolumeGrid& b) {
    require_same_dims(a, b);
    std::uint64_t na = 0, nb = 0, overlap = 0;
    for (std::size_t i = 0; i < a.voxels.size(); ++i) {
        bool va = a.voxels[i] != 0.0;
        bool vb = b.voxels[i] != 0.0;
        na += va;
        nb += vb;
        overlap += va && vb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(overlap) / double(na + nb);
}

std::vector<SegmentDiceRow> per_segment_dice(const VolumeGrid& a, const VolumeGrid& b,
                                             const std::vector<long long>& ids) {
    require_same_dims(a, b);
    std::vector<SegmentDiceRow> rows;
    rows.reserve(ids.size());
    for (long long id : ids) {
        SegmentDiceRow row;
        row.segment_id = id;
        for (std::size_t i = 0; i < a.voxels.size(); ++i) {
            bool va = std::llround(a.voxels[i]) == id;
            bool vb = std::llround(b.voxels[i]) == id;
            row.voxels_a += va;
            row.voxels_b += vb;
            row.voxels_overlap += va && vb;
        }
        if (row.voxels_a + row.voxels_b == 0) {
            row.dice = 1.0;
            row.both_empty = true;
        } else {
            row.dice = 2.0 * double(row.voxels_overlap) / double(row.voxels_a + row.voxels_b);
        }
        rows.push_back(row);
    }
    return rows;
}

VolumeGrid merge_labels(const VolumeGrid& grid, const std::map<long long, long long>& mapping) {
    VolumeGrid out = grid;
    out.datatype = VoxelType::I32;
    for (auto& v : out.voxels) {
        auto it = mapping.find(std::llround(v));
        v = it == mapping.end() ? 0.0 : double(it->second);
    }
    return out;
}

std::vector<long long> labels_in(const VolumeGrid& grid) {
    std::set<long long> seen;
    for (double v : grid.voxels) {
        long long id = std::llround(v);
        if (id != 0) seen.insert(id);
    }
    return {seen.begin(), seen.end()};
}

bool affine_close(const VolumeGrid& a, const VolumeGrid& b, double tol) {
    for (int i = 0; i < 16; ++i) {
        if (std::abs(a.affine[i] - b.affine[i]) > tol) return false;
    }
    return true;
}

} // namespace medpipe
