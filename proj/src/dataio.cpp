#include "volseg/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <unistd.h>

#include "json.hpp"

namespace volseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint8_t npy_magic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
constexpr char raw_magic[4] = {'V', 'S', 'E', 'G'};
constexpr std::uint32_t raw_version = 1;
constexpr std::uint32_t raw_f32 = 0;
constexpr std::uint32_t raw_u8 = 1;

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

std::uint64_t load_uint(const std::uint8_t* p, std::size_t n, bool big_endian)
{
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = big_endian ? i : n - 1 - i;
        v = (v << 8) | p[k];
    }
    return v;
}

std::uint32_t load_u32le(std::span<const std::uint8_t> bytes, std::size_t off)
{
    if (off + 4 > bytes.size())
        throw FormatError("truncated raw header");
    return static_cast<std::uint32_t>(load_uint(bytes.data() + off, 4, false));
}

void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct DType {
    char kind = 'f'; // 'f', 'i', 'u', 'b'
    std::size_t size = 4;
    bool big_endian = false;
};

DType parse_descr(const std::string& descr)
{
    if (descr.size() < 3)
        throw FormatError("unsupported npy dtype '" + descr + "'");
    DType t;
    const char order = descr[0];
    if (order == '>')
        t.big_endian = true;
    else if (order != '<' && order != '|' && order != '=')
        throw FormatError("unsupported npy byte order in '" + descr + "'");
    t.kind = descr[1];
    try {
        t.size = std::stoul(descr.substr(2));
    } catch (const std::exception&) {
        throw FormatError("unsupported npy dtype '" + descr + "'");
    }
    const bool ok = (t.kind == 'f' && (t.size == 4 || t.size == 8))
        || ((t.kind == 'i' || t.kind == 'u') && (t.size == 1 || t.size == 2 || t.size == 4 || t.size == 8))
        || (t.kind == 'b' && t.size == 1);
    if (!ok)
        throw FormatError("unsupported npy dtype '" + descr + "'");
    return t;
}

double decode_scalar(const std::uint8_t* p, const DType& t)
{
    const std::uint64_t bits = load_uint(p, t.size, t.big_endian);
    switch (t.kind) {
    case 'f':
        if (t.size == 4)
            return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
        return std::bit_cast<double>(bits);
    case 'u':
    case 'b':
        return static_cast<double>(bits);
    default: {
        // sign-extend
        const unsigned shift = static_cast<unsigned>(64 - 8 * t.size);
        return static_cast<double>(static_cast<std::int64_t>(bits << shift) >> shift);
    }
    }
}

// Extracts the value for `key` from a Python dict literal header.
std::string header_field(const std::string& header, const std::string& key)
{
    const std::string quoted[2] = {"'" + key + "'", "\"" + key + "\""};
    std::size_t pos = std::string::npos;
    for (const auto& q : quoted) {
        pos = header.find(q);
        if (pos != std::string::npos) {
            pos += q.size();
            break;
        }
    }
    if (pos == std::string::npos)
        throw FormatError("npy header lacks '" + key + "'");
    pos = header.find(':', pos);
    if (pos == std::string::npos)
        throw FormatError("malformed npy header");
    ++pos;
    while (pos < header.size() && header[pos] == ' ')
        ++pos;
    if (pos >= header.size())
        throw FormatError("malformed npy header");
    if (header[pos] == '\'' || header[pos] == '"') {
        const char q = header[pos];
        const auto end = header.find(q, pos + 1);
        if (end == std::string::npos)
            throw FormatError("malformed npy header");
        return header.substr(pos + 1, end - pos - 1);
    }
    if (header[pos] == '(') {
        const auto end = header.find(')', pos);
        if (end == std::string::npos)
            throw FormatError("malformed npy header");
        return header.substr(pos + 1, end - pos - 1);
    }
    auto end = header.find_first_of(",}", pos);
    if (end == std::string::npos)
        throw FormatError("malformed npy header");
    std::string v = header.substr(pos, end - pos);
    while (!v.empty() && v.back() == ' ')
        v.pop_back();
    return v;
}

std::vector<std::size_t> parse_shape(const std::string& tuple)
{
    std::vector<std::size_t> shape;
    std::stringstream ss(tuple);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove(item.begin(), item.end(), ' '), item.end());
        if (item.empty())
            continue;
        if (!std::all_of(item.begin(), item.end(), [](char c) { return c >= '0' && c <= '9'; }))
            throw FormatError("malformed npy shape '" + tuple + "'");
        shape.push_back(std::stoull(item));
    }
    return shape;
}

std::size_t product(const std::vector<std::size_t>& shape)
{
    std::size_t n = 1;
    for (auto d : shape)
        n *= d;
    return n;
}

// Column-major to row-major.
std::vector<double> fortran_to_c(const std::vector<double>& in, const std::vector<std::size_t>& shape)
{
    std::vector<double> out(in.size());
    const std::size_t rank = shape.size();
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t c_flat = 0; c_flat < in.size(); ++c_flat) {
        std::size_t f_flat = 0;
        std::size_t stride = 1;
        for (std::size_t a = 0; a < rank; ++a) {
            f_flat += idx[a] * stride;
            stride *= shape[a];
        }
        out[c_flat] = in[f_flat];
        for (std::size_t a = rank; a-- > 0;) {
            if (++idx[a] < shape[a])
                break;
            idx[a] = 0;
        }
    }
    return out;
}

Extent extent_of(const std::vector<std::size_t>& shape)
{
    if (shape.size() == 3)
        return {shape[0], shape[1], shape[2]};
    if (shape.size() == 2)
        return {1, shape[0], shape[1]};
    throw RankError("array rank " + std::to_string(shape.size()) + " is not 2 or 3");
}

std::string shape_tuple(int rank, const Extent& e)
{
    if (rank == 2)
        return "(" + std::to_string(e.height) + ", " + std::to_string(e.width) + ")";
    return "(" + std::to_string(e.depth) + ", " + std::to_string(e.height) + ", " + std::to_string(e.width) + ")";
}

std::vector<std::uint8_t> npy_bytes(const std::string& descr, int rank, const Extent& e, std::span<const std::uint8_t> payload)
{
    std::string header = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': " + shape_tuple(rank, e) + ", }";
    // magic(6) + version(2) + length(2) + header must be a multiple of 64
    const std::size_t unpadded = 10 + header.size() + 1;
    header.append((64 - unpadded % 64) % 64, ' ');
    header.push_back('\n');
    std::vector<std::uint8_t> out(npy_magic, npy_magic + 6);
    out.push_back(1);
    out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(header.size() & 0xFF));
    out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
    out.insert(out.end(), header.begin(), header.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

std::vector<std::uint8_t> raw_bytes(std::uint32_t dtype, int rank, const Extent& e, std::span<const std::uint8_t> payload)
{
    std::vector<std::uint8_t> out(raw_magic, raw_magic + 4);
    put_u32le(out, raw_version);
    put_u32le(out, static_cast<std::uint32_t>(rank));
    if (rank == 3)
        put_u32le(out, static_cast<std::uint32_t>(e.depth));
    put_u32le(out, static_cast<std::uint32_t>(e.height));
    put_u32le(out, static_cast<std::uint32_t>(e.width));
    put_u32le(out, dtype);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

std::span<const std::uint8_t> float_payload(const Image& image)
{
    const auto v = image.values();
    return {reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(float)};
}

} // namespace

ArrayData parse_npy(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 10 || !std::equal(npy_magic, npy_magic + 6, bytes.begin()))
        throw FormatError("not an npy file (bad magic)");
    const std::uint8_t major = bytes[6];
    std::size_t header_len = 0;
    std::size_t offset = 0;
    if (major == 1) {
        header_len = load_uint(bytes.data() + 8, 2, false);
        offset = 10;
    } else if (major == 2 || major == 3) {
        if (bytes.size() < 12)
            throw FormatError("truncated npy header");
        header_len = load_uint(bytes.data() + 8, 4, false);
        offset = 12;
    } else {
        throw FormatError("unsupported npy version " + std::to_string(major));
    }
    if (offset + header_len > bytes.size())
        throw FormatError("truncated npy header");
    const std::string header(reinterpret_cast<const char*>(bytes.data() + offset), header_len);
    if (header.find('{') == std::string::npos)
        throw FormatError("malformed npy header");

    const DType dtype = parse_descr(header_field(header, "descr"));
    const std::string fortran = header_field(header, "fortran_order");
    if (fortran != "False" && fortran != "True")
        throw FormatError("malformed fortran_order '" + fortran + "'");

    ArrayData out;
    out.shape = parse_shape(header_field(header, "shape"));
    out.integral = dtype.kind != 'f';
    const std::size_t n = product(out.shape);
    const std::size_t data_off = offset + header_len;
    if (bytes.size() - data_off < n * dtype.size)
        throw FormatError("npy payload shorter than its shape requires");
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        out.values[i] = decode_scalar(bytes.data() + data_off + i * dtype.size, dtype);
    if (fortran == "True" && out.shape.size() > 1)
        out.values = fortran_to_c(out.values, out.shape);
    return out;
}

ArrayData parse_raw(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 4 || !std::equal(raw_magic, raw_magic + 4, bytes.begin()))
        throw FormatError("not a raw volume file (bad magic)");
    const std::uint32_t version = load_u32le(bytes, 4);
    if (version != raw_version)
        throw FormatError("unsupported raw version " + std::to_string(version));
    const std::uint32_t rank = load_u32le(bytes, 8);
    if (rank > 8)
        throw FormatError("implausible raw rank " + std::to_string(rank));
    ArrayData out;
    std::size_t off = 12;
    for (std::uint32_t a = 0; a < rank; ++a, off += 4)
        out.shape.push_back(load_u32le(bytes, off));
    const std::uint32_t code = load_u32le(bytes, off);
    off += 4;
    if (code != raw_f32 && code != raw_u8)
        throw FormatError("unknown raw dtype code " + std::to_string(code));
    const DType dtype{code == raw_f32 ? 'f' : 'u', code == raw_f32 ? 4u : 1u, false};
    out.integral = code == raw_u8;
    const std::size_t n = product(out.shape);
    if (bytes.size() - off < n * dtype.size)
        throw FormatError("raw payload shorter than its shape requires");
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        out.values[i] = decode_scalar(bytes.data() + off + i * dtype.size, dtype);
    return out;
}

std::vector<std::uint8_t> read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ArrayData read_array(const fs::path& path)
{
    const auto bytes = read_file(path);
    if (bytes.size() >= 4 && std::equal(raw_magic, raw_magic + 4, bytes.begin()))
        return parse_raw(bytes);
    return parse_npy(bytes);
}

Image read_volume(const fs::path& path)
{
    ArrayData a = read_array(path);
    const Extent e = extent_of(a.shape);
    std::vector<float> voxels(a.values.begin(), a.values.end());
    return Image(static_cast<int>(a.shape.size()), e, std::move(voxels));
}

LabelMask read_mask(const fs::path& path, int num_classes)
{
    ArrayData a = read_array(path);
    const Extent e = extent_of(a.shape);
    std::vector<std::uint8_t> labels(a.values.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double v = a.values[i];
        if (!(v >= 0.0 && v < 256.0) || v != std::floor(v))
            throw ValueError("mask '" + path.string() + "' holds a non-label value");
        labels[i] = static_cast<std::uint8_t>(v);
    }
    return LabelMask(static_cast<int>(a.shape.size()), e, num_classes, std::move(labels));
}

std::vector<std::uint8_t> encode_npy(const Image& image)
{
    return npy_bytes("<f4", image.rank(), image.extent(), float_payload(image));
}

std::vector<std::uint8_t> encode_npy(const LabelMask& mask)
{
    return npy_bytes("|u1", mask.rank(), mask.extent(), mask.values());
}

std::vector<std::uint8_t> encode_raw(const Image& image)
{
    return raw_bytes(raw_f32, image.rank(), image.extent(), float_payload(image));
}

std::vector<std::uint8_t> encode_raw(const LabelMask& mask)
{
    return raw_bytes(raw_u8, mask.rank(), mask.extent(), mask.values());
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes)
{
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec)
            throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot write '" + path.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw IoError("short write to '" + path.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot move output into '" + path.string() + "'");
    }
}

void write_text_atomic(const fs::path& path, std::string_view text)
{
    write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

FileFormat format_from_extension(const fs::path& path)
{
    return path.extension() == ".raw" || path.extension() == ".vseg" ? FileFormat::raw : FileFormat::npy;
}

void write_volume(const Image& image, const fs::path& path, FileFormat format)
{
    write_file_atomic(path, format == FileFormat::npy ? encode_npy(image) : encode_raw(image));
}

void write_mask(const LabelMask& mask, const fs::path& path, FileFormat format)
{
    write_file_atomic(path, format == FileFormat::npy ? encode_npy(mask) : encode_raw(mask));
}

// ---------------------------------------------------------------------------

Variant parse_variant(std::string_view s)
{
    if (s == "LungTumor2D" || s == "lung_tumor_2d")
        return Variant::LungTumor2D;
    if (s == "Tumor2D" || s == "tumor_2d")
        return Variant::Tumor2D;
    if (s == "Tumor3D" || s == "tumor_3d")
        return Variant::Tumor3D;
    throw ConfigError("unknown data variant '" + std::string(s) + "'");
}

std::string_view to_string(Variant v)
{
    switch (v) {
    case Variant::LungTumor2D:
        return "LungTumor2D";
    case Variant::Tumor2D:
        return "Tumor2D";
    case Variant::Tumor3D:
        return "Tumor3D";
    }
    return "?";
}

int class_count(Variant v) { return v == Variant::LungTumor2D ? 3 : 2; }

bool is_2d(Variant v) { return v != Variant::Tumor3D; }

BatchTag parse_batch_tag(std::string_view s)
{
    if (s == "bright")
        return BatchTag::bright;
    if (s == "dark")
        return BatchTag::dark;
    throw ConfigError("unknown batch tag '" + std::string(s) + "'");
}

std::string_view to_string(BatchTag b) { return b == BatchTag::bright ? "bright" : "dark"; }

std::size_t DatasetManifest::count(Split s) const
{
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
}

void validate(const DatasetManifest& manifest)
{
    std::set<std::string> seen;
    for (const auto& e : manifest.entries) {
        if (e.image_path.empty())
            throw ConfigError("manifest entry '" + e.subject_id + "' has no image_path");
        if (!seen.insert(e.image_path).second)
            throw ConfigError("duplicate path in manifest: " + e.image_path);
        if (e.mask_path) {
            if (!seen.insert(*e.mask_path).second)
                throw ConfigError("duplicate path in manifest: " + *e.mask_path);
        } else if (e.split == Split::train) {
            throw ConfigError("training entry '" + e.subject_id + "' has no mask_path");
        }
    }
}

DatasetManifest parse_manifest(std::string_view json_text, const fs::path& base_dir)
{
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("manifest is not valid JSON: ") + ex.what());
    }
    if (!doc.is_object() || !doc.contains("variant") || !doc.contains("entries") || !doc["entries"].is_array())
        throw ConfigError("manifest needs 'variant' and an 'entries' array");

    auto resolve = [&](const std::string& p) {
        const fs::path path(p);
        return (path.is_absolute() || base_dir.empty() ? path : base_dir / path).lexically_normal().string();
    };

    DatasetManifest m;
    try {
        m.variant = parse_variant(doc["variant"].get<std::string>());
        for (const auto& item : doc["entries"]) {
            ManifestEntry e;
            e.image_path = resolve(item.at("image_path").get<std::string>());
            if (item.contains("mask_path") && !item["mask_path"].is_null())
                e.mask_path = resolve(item["mask_path"].get<std::string>());
            e.batch_tag = parse_batch_tag(item.value("batch_tag", std::string("bright")));
            e.subject_id = item.value("subject_id", fs::path(e.image_path).stem().string());
            const auto split = item.value("split", std::string("train"));
            if (split == "train")
                e.split = Split::train;
            else if (split == "test")
                e.split = Split::test;
            else
                throw ConfigError("unknown split '" + split + "'");
            m.entries.push_back(std::move(e));
        }
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed manifest entry: ") + ex.what());
    }
    validate(m);
    return m;
}

DatasetManifest load_manifest(const fs::path& path)
{
    const auto bytes = read_file(path);
    return parse_manifest({reinterpret_cast<const char*>(bytes.data()), bytes.size()}, path.parent_path());
}

// ---------------------------------------------------------------------------

std::string_view to_string(EvalUnitKind u) { return u == EvalUnitKind::slice ? "slice" : "stack"; }

EvalUnitKind parse_unit(std::string_view s)
{
    if (s == "slice")
        return EvalUnitKind::slice;
    if (s == "stack")
        return EvalUnitKind::stack;
    throw ConfigError("unknown evaluation unit '" + std::string(s) + "'");
}

StdMode parse_std_mode(std::string_view s)
{
    if (s == "population")
        return StdMode::population;
    if (s == "sample")
        return StdMode::sample;
    throw ConfigError("unknown std mode '" + std::string(s) + "'");
}

MeanStd mean_std(std::span<const double> values, StdMode mode)
{
    if (values.empty())
        return {};
    double sum = 0.0;
    for (double v : values)
        sum += v;
    const double mean = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values)
        ss += (v - mean) * (v - mean);
    const std::size_t dof = mode == StdMode::sample ? values.size() - 1 : values.size();
    return {mean, dof == 0 ? 0.0 : std::sqrt(ss / static_cast<double>(dof))};
}

std::string format_mean_std(MeanStd m, int decimals)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(decimals) << m.mean << " ± " << m.std;
    return os.str();
}

std::vector<SummaryRow> summarize(std::span<const MetricRecord> records, StdMode mode)
{
    struct Group {
        SummaryRow row;
        std::vector<double> iou, f1;
    };
    std::vector<Group> groups;
    for (const auto& r : records) {
        auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
            return g.row.class_name == r.class_name && g.row.unit == r.unit && g.row.postprocessed == r.postprocessed;
        });
        if (it == groups.end()) {
            groups.push_back({{r.class_name, r.unit, r.postprocessed, 0, {}, {}}, {}, {}});
            it = std::prev(groups.end());
        }
        it->iou.push_back(r.iou);
        it->f1.push_back(r.f1);
    }
    std::vector<SummaryRow> rows;
    for (auto& g : groups) {
        g.row.count = g.iou.size();
        g.row.iou = mean_std(g.iou, mode);
        g.row.f1 = mean_std(g.f1, mode);
        rows.push_back(g.row);
    }
    return rows;
}

std::string metrics_csv(std::span<const MetricRecord> records)
{
    std::ostringstream os;
    os << "subject_id,class,unit,postprocessed,iou,f1\n";
    os << std::setprecision(17);
    for (const auto& r : records) {
        os << r.subject_id;
        if (r.unit == EvalUnitKind::slice && r.z_index >= 0)
            os << ':' << r.z_index;
        os << ',' << r.class_name << ',' << to_string(r.unit) << ',' << (r.postprocessed ? "true" : "false") << ','
           << r.iou << ',' << r.f1 << '\n';
    }
    return os.str();
}

std::string metrics_summary_json(std::span<const MetricRecord> records, StdMode mode)
{
    json out;
    out["std_mode"] = mode == StdMode::population ? "population" : "sample";
    out["summary"] = json::array();
    for (const auto& row : summarize(records, mode)) {
        out["summary"].push_back({
            {"class", row.class_name},
            {"unit", std::string(to_string(row.unit))},
            {"postprocessed", row.postprocessed},
            {"count", row.count},
            {"iou_mean", row.iou.mean},
            {"iou_std", row.iou.std},
            {"f1_mean", row.f1.mean},
            {"f1_std", row.f1.std},
            {"iou", format_mean_std(row.iou)},
            {"f1", format_mean_std(row.f1)},
        });
    }
    return out.dump(2) + "\n";
}

fs::path write_metrics(std::span<const MetricRecord> records, const fs::path& csv_path, StdMode mode)
{
    if (records.empty())
        throw ValueError("no metric records to write");
    fs::path json_path = csv_path;
    json_path.replace_extension(".json");
    if (json_path == csv_path)
        json_path += ".summary.json";
    try {
        write_text_atomic(csv_path, metrics_csv(records));
        write_text_atomic(json_path, metrics_summary_json(records, mode));
    } catch (const fs::filesystem_error& ex) {
        throw IoError(ex.what());
    }
    return json_path;
}

} // namespace volseg
