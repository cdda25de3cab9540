#include "hcvt/explain.hpp"

#include <json.hpp>
#include <zlib.h>

#include <array>
#include <cstring>
#include <fstream>

namespace hcvt::explain {

std::pair<int, int> Heatmap::argmax() const {
    int by = 0, bx = 0;
    float best = -1.0f;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            if (at(y, x) > best) {
                best = at(y, x);
                by = y;
                bx = x;
            }
    return {by, bx};
}

void normalize_heatmap(Heatmap& h) {
    float lo = h.values.empty() ? 0.0f : h.values[0];
    float hi = lo;
    for (float v : h.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo <= 0.0f) {
        std::fill(h.values.begin(), h.values.end(), 0.0f);
        h.degenerate = true;
        log_warn(strfmt("heatmap %s/%s slice %d is constant; normalized to all zeros",
                        h.patient_id.c_str(), to_string(h.sequence), h.slice_index));
        return;
    }
    for (auto& v : h.values) v = (v - lo) / (hi - lo);
}

std::vector<float> upsample_bilinear(const std::vector<float>& src, int src_h, int src_w, int out_h,
                                     int out_w) {
    std::vector<float> out(std::size_t(out_h) * out_w);
    const double sy = double(src_h) / out_h;
    const double sx = double(src_w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(src_h - 1));
        const int y0 = int(fy);
        const int y1 = std::min(y0 + 1, src_h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(src_w - 1));
            const int x0 = int(fx);
            const int x1 = std::min(x0 + 1, src_w - 1);
            const double wx = fx - x0;
            const double top = src[std::size_t(y0) * src_w + x0] * (1 - wx) +
                               src[std::size_t(y0) * src_w + x1] * wx;
            const double bot = src[std::size_t(y1) * src_w + x0] * (1 - wx) +
                               src[std::size_t(y1) * src_w + x1] * wx;
            out[std::size_t(y) * out_w + x] = float(top * (1 - wy) + bot * wy);
        }
    }
    return out;
}

std::array<unsigned char, 3> viridis(double t) {
    static const std::array<std::array<int, 3>, 33> anchors = {{
        {68, 1, 84},    {71, 13, 96},   {72, 24, 106},  {72, 35, 116},  {71, 45, 123},
        {69, 55, 129},  {66, 64, 134},  {62, 73, 137},  {59, 82, 139},  {55, 91, 141},
        {51, 99, 141},  {47, 107, 142}, {44, 114, 142}, {41, 122, 142}, {38, 130, 142},
        {35, 137, 142}, {33, 145, 140}, {31, 152, 139}, {31, 160, 136}, {34, 167, 133},
        {40, 174, 128}, {50, 182, 122}, {63, 188, 115}, {78, 195, 107}, {94, 201, 98},
        {112, 207, 87}, {132, 212, 75}, {152, 216, 62}, {173, 220, 48}, {194, 223, 35},
        {216, 226, 25}, {236, 229, 27}, {253, 231, 37},
    }};
    t = std::clamp(t, 0.0, 1.0);
    const double pos = t * 32.0;
    const int i = std::min(31, int(pos));
    const double f = pos - i;
    std::array<unsigned char, 3> out{};
    for (int c = 0; c < 3; ++c)
        out[std::size_t(c)] =
            (unsigned char)std::lround(anchors[std::size_t(i)][std::size_t(c)] * (1 - f) +
                                       anchors[std::size_t(i) + 1][std::size_t(c)] * f);
    return out;
}

// ---------------------------------------------------------------------------
// PNG writer: signature, IHDR, one zlib-deflated IDAT, IEND.
// ---------------------------------------------------------------------------

namespace {

void push_u32(std::string& out, std::uint32_t v) {
    out.push_back(char((v >> 24) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char(v & 0xff));
}

void push_chunk(std::string& out, const char type[4], const std::string& payload) {
    push_u32(out, std::uint32_t(payload.size()));
    std::string body(type, 4);
    body += payload;
    out += body;
    const auto crc =
        ::crc32(0, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size()));
    push_u32(out, std::uint32_t(crc));
}

}  // namespace

void write_png_rgb(const fs::path& path, const std::vector<unsigned char>& rgb, int height,
                   int width) {
    if (rgb.size() != std::size_t(height) * width * 3)
        throw contract_error("write_png_rgb: buffer size does not match dims");
    // filter byte 0 in front of each scanline
    std::string raw;
    raw.reserve(std::size_t(height) * (std::size_t(width) * 3 + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back('\0');
        raw.append(reinterpret_cast<const char*>(rgb.data() + std::size_t(y) * width * 3),
                   std::size_t(width) * 3);
    }
    uLongf bound = ::compressBound(uLong(raw.size()));
    std::string deflated(bound, '\0');
    if (::compress2(reinterpret_cast<Bytef*>(deflated.data()), &bound,
                    reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()),
                    6) != Z_OK)
        throw io_error("png: zlib compression failed");
    deflated.resize(bound);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    push_u32(ihdr, std::uint32_t(width));
    push_u32(ihdr, std::uint32_t(height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    push_chunk(out, "IHDR", ihdr);
    push_chunk(out, "IDAT", deflated);
    push_chunk(out, "IEND", "");

    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error(strfmt("cannot open %s for writing", path.string().c_str()));
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw io_error(strfmt("short write to %s", path.string().c_str()));
}

void overlay(const std::vector<float>& slice, int height, int width, const Heatmap& heatmap,
             const fs::path& out_path, double opacity) {
    if (heatmap.height != height || heatmap.width != width)
        throw contract_error(strfmt("overlay: heatmap %dx%d does not match slice %dx%d",
                                    heatmap.height, heatmap.width, height, width));
    if (slice.size() != std::size_t(height) * width)
        throw contract_error("overlay: slice buffer does not match dims");
    std::vector<unsigned char> rgb(std::size_t(height) * width * 3);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const std::size_t i = std::size_t(y) * width + x;
            const double gray = 255.0 * std::clamp(double(slice[i]), 0.0, 1.0);
            const double h = std::clamp(double(heatmap.values[i]), 0.0, 1.0);
            const auto color = viridis(h);
            const double alpha = opacity * h;
            for (int c = 0; c < 3; ++c)
                rgb[i * 3 + std::size_t(c)] =
                    (unsigned char)std::lround((1.0 - alpha) * gray + alpha * color[std::size_t(c)]);
        }
    }
    write_png_rgb(out_path, rgb, height, width);
}

void write_sidecar(const Heatmap& h, const std::string& method, const std::string& checkpoint_hash,
                   const fs::path& png_path) {
    nlohmann::json j = {
        {"source", to_string(h.source)},
        {"patient_id", h.patient_id},
        {"sequence", to_string(h.sequence)},
        {"slice_index", h.slice_index},
        {"checkpoint_hash", checkpoint_hash},
        {"method", method},
        {"degenerate", h.degenerate},
    };
    fs::path sidecar = png_path;
    sidecar.replace_extension(".json");
    std::ofstream out(sidecar);
    if (!out) throw io_error(strfmt("cannot write %s", sidecar.string().c_str()));
    out << j.dump(2) << "\n";
}

}  // namespace hcvt::explain
