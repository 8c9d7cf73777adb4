/*
 * Copyright 2026 The sigmaflow Authors.
 * This file is licensed to you under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software distributed under
 * the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR REPRESENTATIONS
 * OF ANY KIND, either express or implied. See the License for the specific language
 * governing permissions and limitations under the License.
 */

#pragma once

#include "learning.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unistd.h>
#include <vector>

namespace sigmaflow::io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Raw file access

inline std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a temporary sibling and renames it over the target, so readers never
/// observe a partial file.
inline void write_file_atomic(const fs::path& path, std::string_view bytes)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + tmp.string());
        out.write(bytes.data(), std::streamsize(bytes.size()));
        out.flush();
        if (!out) throw ValidationError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw ValidationError("cannot rename onto " + path.string() + ": " + ec.message());
    }
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double x)
{
    std::array<char, 32> buf{};
    const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), x);
    return std::string(buf.data(), r.ptr);
}

inline double parse_double(std::string_view s)
{
    double x = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ValidationError("not a number: '" + std::string(s) + "'");
    return x;
}

// ---------------------------------------------------------------------------
// PGM label maps

namespace detail {

class HeaderReader
{
public:
    explicit HeaderReader(std::string_view data)
        : m_data(data)
    {}

    std::size_t pos() const { return m_pos; }
    /// Offset of the most recent token.
    std::size_t token_start() const { return m_token_start; }

    /// Next whitespace-delimited token, skipping '#' comments.
    std::string_view token(const char* what)
    {
        for (;;) {
            while (m_pos < m_data.size() && std::isspace(static_cast<unsigned char>(m_data[m_pos]))) ++m_pos;
            if (m_pos < m_data.size() && m_data[m_pos] == '#') {
                while (m_pos < m_data.size() && m_data[m_pos] != '\n') ++m_pos;
                continue;
            }
            break;
        }
        const std::size_t start = m_token_start = m_pos;
        while (m_pos < m_data.size() && !std::isspace(static_cast<unsigned char>(m_data[m_pos]))) ++m_pos;
        if (start == m_pos) throw ParseError(std::string("expected ") + what, start);
        return m_data.substr(start, m_pos - start);
    }

    long long integer(const char* what)
    {
        const std::string_view t = token(what);
        long long v = 0;
        const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
        if (r.ec != std::errc() || r.ptr != t.data() + t.size())
            throw ParseError(std::string("malformed ") + what, m_token_start);
        return v;
    }

    /// Consumes the single whitespace byte that ends a binary header.
    void end_of_header()
    {
        if (m_pos >= m_data.size() || !std::isspace(static_cast<unsigned char>(m_data[m_pos])))
            throw ParseError("expected whitespace after header", m_pos);
        ++m_pos;
    }

private:
    std::string_view m_data;
    std::size_t m_pos = 0;
    std::size_t m_token_start = 0;
};

} // namespace detail

/// Parses a PGM (P2 or P5) label map from memory. c <= 0 takes c = maxval + 1.
inline LabelField parse_label_map(std::string_view data, int c = 0)
{
    detail::HeaderReader hr(data);
    const std::string_view magic = hr.token("magic number");
    if (magic != "P2" && magic != "P5") throw ParseError("not a PGM file (expected P2 or P5)", 0);
    const long long W = hr.integer("width"), H = hr.integer("height");
    const long long maxval = hr.integer("maxval");
    const std::size_t maxval_at = hr.token_start();
    if (W < 3 || H < 3) throw ParseError("grid must be at least 3 x 3", maxval_at);
    if (maxval < 1 || maxval > 65535) throw ParseError("maxval out of range", maxval_at);
    if (c <= 0) c = int(maxval) + 1;
    const std::size_t n = std::size_t(W * H);
    std::vector<int> labels(n);
    auto check = [&](long long v, std::size_t at) {
        if (v < 0 || v > maxval) throw ParseError("pixel value " + std::to_string(v) + " exceeds maxval", at);
        if (v >= c) throw ParseError("label " + std::to_string(v) + " out of range for c = " + std::to_string(c), at);
        return int(v);
    };
    if (magic == "P2") {
        for (std::size_t a = 0; a < n; ++a) {
            const long long v = hr.integer("pixel");
            labels[a] = check(v, hr.token_start());
        }
    } else {
        hr.end_of_header();
        const std::size_t bpp = maxval < 256 ? 1 : 2;
        const std::size_t start = hr.pos();
        if (data.size() - start < n * bpp) throw ParseError("truncated pixel data", data.size());
        for (std::size_t a = 0; a < n; ++a) {
            const std::size_t at = start + a * bpp;
            const auto b0 = static_cast<unsigned char>(data[at]);
            long long v = b0;
            if (bpp == 2) v = (v << 8) | static_cast<unsigned char>(data[at + 1]);
            labels[a] = check(v, at);
        }
    }
    return LabelField(TorusGrid(Index(H), Index(W)), std::move(labels), c);
}

inline LabelField read_label_map(const fs::path& path, int c = 0) { return parse_label_map(read_file(path), c); }

enum class PgmEncoding { ascii, binary };

/// maxval = max(c - 1, 1), so a reader recovers c from the header.
inline std::string encode_label_map(const LabelField& L, PgmEncoding enc = PgmEncoding::binary)
{
    const TorusGrid& g = L.grid();
    const int maxval = std::max(L.labels_count() - 1, 1);
    if (maxval > 65535) throw ValidationError("label map: too many labels for PGM");
    std::string out = (enc == PgmEncoding::ascii ? "P2\n" : "P5\n") + std::to_string(g.width()) + " " +
                      std::to_string(g.height()) + "\n" + std::to_string(maxval) + "\n";
    for (Index a = 0; a < g.size(); ++a) {
        const int v = L[a];
        if (enc == PgmEncoding::ascii) {
            out += std::to_string(v);
            out += (g.col(a) + 1 == g.width()) ? '\n' : ' ';
        } else if (maxval < 256) {
            out += char(v);
        } else {
            out += char(v >> 8);
            out += char(v & 0xff);
        }
    }
    return out;
}

inline void write_label_map(const LabelField& L, const fs::path& path, PgmEncoding enc = PgmEncoding::binary)
{
    write_file_atomic(path, encode_label_map(L, enc));
}

// ---------------------------------------------------------------------------
// Binary state files: an ASCII header line, then little-endian doubles, node-major

struct RawField
{
    std::string magic;
    Index height = 0, width = 0;
    std::string tag; ///< channel count for AMF1, interpretation for MTF1
    Field values;
};

namespace detail {

inline std::string encode_raw(const std::string& header, const Field& values)
{
    std::string out = header + "\n";
    out.reserve(out.size() + std::size_t(values.size()) * 8);
    for (Index a = 0; a < values.rows(); ++a)
        for (Index k = 0; k < values.cols(); ++k) sigmaflow::detail::put_le(out, values(a, k));
    return out;
}

inline RawField decode_raw(std::string_view data, std::string_view magic)
{
    const std::size_t nl = data.find('\n');
    if (nl == std::string_view::npos) throw ParseError("missing header line", data.size());
    HeaderReader hr(data.substr(0, nl));
    RawField f;
    f.magic = std::string(hr.token("magic"));
    if (f.magic != magic) throw ParseError("expected " + std::string(magic) + " header", 0);
    const long long H = hr.integer("height"), W = hr.integer("width");
    f.tag = std::string(hr.token("channel descriptor"));
    const std::size_t tag_at = hr.token_start();
    if (H < 3 || W < 3) throw ParseError("grid must be at least 3 x 3", tag_at);
    long long cols = 3;
    if (magic == "AMF1") {
        std::size_t used = 0;
        try {
            cols = std::stoll(f.tag, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != f.tag.size() || cols < 1) throw ParseError("malformed channel count", tag_at);
    } else if (f.tag != "h" && f.tag != "hinv") {
        throw ParseError("interpretation must be h or hinv", tag_at);
    }
    const std::size_t expected = nl + 1 + std::size_t(H * W * cols) * 8;
    if (data.size() != expected)
        throw ParseError("file length " + std::to_string(data.size()) + " does not match declared size " +
                             std::to_string(expected),
                         std::min(data.size(), expected));
    f.height = Index(H);
    f.width = Index(W);
    f.values.resize(Index(H * W), Index(cols));
    std::size_t pos = nl + 1;
    for (Index a = 0; a < f.values.rows(); ++a)
        for (Index k = 0; k < f.values.cols(); ++k) f.values(a, k) = sigmaflow::detail::get_le<double>(data, pos);
    return f;
}

} // namespace detail

inline std::string encode_assignment(const AssignmentField& S)
{
    return detail::encode_raw("AMF1 " + std::to_string(S.grid().height()) + " " + std::to_string(S.grid().width()) +
                                  " " + std::to_string(S.labels()),
                              S.S());
}

inline RawField decode_assignment_raw(std::string_view data) { return detail::decode_raw(data, "AMF1"); }

inline AssignmentField decode_assignment(std::string_view data)
{
    RawField f = decode_assignment_raw(data);
    return AssignmentField(TorusGrid(f.height, f.width), std::move(f.values));
}

inline void write_assignment(const AssignmentField& S, const fs::path& path)
{
    write_file_atomic(path, encode_assignment(S));
}

/// The raw readers skip the invariant checks (the --no-validate escape hatch).
inline RawField read_assignment_raw(const fs::path& path) { return decode_assignment_raw(read_file(path)); }
inline AssignmentField read_assignment(const fs::path& path) { return decode_assignment(read_file(path)); }

inline std::string encode_metric(const MetricField& h)
{
    return detail::encode_raw("MTF1 " + std::to_string(h.grid().height()) + " " + std::to_string(h.grid().width()) +
                                  " " + to_string(h.interpretation()),
                              h.components());
}

inline RawField decode_metric_raw(std::string_view data) { return detail::decode_raw(data, "MTF1"); }

inline MetricField decode_metric(std::string_view data)
{
    RawField f = decode_metric_raw(data);
    return MetricField(TorusGrid(f.height, f.width),
                       f.tag == "h" ? MetricInterpretation::metric : MetricInterpretation::inverse, std::move(f.values));
}

inline void write_metric(const MetricField& h, const fs::path& path) { write_file_atomic(path, encode_metric(h)); }
inline RawField read_metric_raw(const fs::path& path) { return decode_metric_raw(read_file(path)); }
inline MetricField read_metric(const fs::path& path) { return decode_metric(read_file(path)); }

// ---------------------------------------------------------------------------
// Rendering (binary PPM)

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed 20-color label palette.
inline const std::array<Rgb, 20>& palette()
{
    static const std::array<Rgb, 20> p{{{31, 119, 180},  {255, 127, 14},  {44, 160, 44},   {214, 39, 40},
                                        {148, 103, 189}, {140, 86, 75},   {227, 119, 194}, {127, 127, 127},
                                        {188, 189, 34},  {23, 190, 207},  {174, 199, 232}, {255, 187, 120},
                                        {152, 223, 138}, {255, 152, 150}, {197, 176, 213}, {196, 156, 148},
                                        {247, 182, 210}, {199, 199, 199}, {219, 219, 141}, {158, 218, 229}}};
    return p;
}

inline std::string encode_ppm(const TorusGrid& g, const std::vector<Rgb>& pixels)
{
    std::string out = "P6\n" + std::to_string(g.width()) + " " + std::to_string(g.height()) + "\n255\n";
    for (const Rgb& px : pixels) out.append(reinterpret_cast<const char*>(px.data()), 3);
    return out;
}

/// Label colors; nodes flagged in error_mask are drawn black.
inline std::string render_labels(const TorusGrid& g, const std::vector<int>& labels,
                                 const std::vector<bool>* error_mask = nullptr)
{
    if (Index(labels.size()) != g.size()) throw ValidationError("render_labels: shape mismatch");
    std::vector<Rgb> px(labels.size());
    for (std::size_t a = 0; a < labels.size(); ++a) {
        px[a] = palette()[std::size_t(labels[a]) % palette().size()];
        if (error_mask && (*error_mask)[a]) px[a] = {0, 0, 0};
    }
    return encode_ppm(g, px);
}

/// Grayscale map of a scalar field: linear min-max, or the empirical CDF with equalize.
inline std::string render_scalar(const TorusGrid& g, const Vector& values, bool equalize)
{
    if (values.size() != g.size()) throw ValidationError("render_scalar: shape mismatch");
    const std::size_t n = std::size_t(values.size());
    std::vector<double> gray(n, 0.0);
    if (equalize) {
        std::vector<double> sorted(values.data(), values.data() + n);
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t a = 0; a < n; ++a) {
            const auto rank = std::upper_bound(sorted.begin(), sorted.end(), values[Index(a)]) - sorted.begin();
            gray[a] = double(rank) / double(n);
        }
    } else {
        const double lo = values.minCoeff(), hi = values.maxCoeff();
        if (hi > lo)
            for (std::size_t a = 0; a < n; ++a) gray[a] = (values[Index(a)] - lo) / (hi - lo);
    }
    std::vector<Rgb> px(n);
    for (std::size_t a = 0; a < n; ++a) {
        const auto v = std::uint8_t(std::lround(255.0 * std::clamp(gray[a], 0.0, 1.0)));
        px[a] = {v, v, v};
    }
    return encode_ppm(g, px);
}

// ---------------------------------------------------------------------------
// CSV

class CsvTable
{
public:
    explicit CsvTable(std::vector<std::string> header)
        : m_header(std::move(header))
    {}

    void add_row(const std::vector<double>& row)
    {
        if (row.size() != m_header.size()) throw ValidationError("CsvTable: row width mismatch");
        m_rows.push_back(row);
    }

    std::string str() const
    {
        std::string out;
        for (std::size_t k = 0; k < m_header.size(); ++k) out += (k ? "," : "") + m_header[k];
        out += '\n';
        for (const auto& r : m_rows) {
            for (std::size_t k = 0; k < r.size(); ++k) out += (k ? "," : "") + format_double(r[k]);
            out += '\n';
        }
        return out;
    }

    void write(const fs::path& path) const { write_file_atomic(path, str()); }

private:
    std::vector<std::string> m_header;
    std::vector<std::vector<double>> m_rows;
};

inline CsvTable trajectory_table(const TrajectoryRecord& r)
{
    CsvTable t({"time", "lyapunov", "mean_entropy", "max_entropy", "theta_l2"});
    for (std::size_t k = 0; k < r.times.size(); ++k)
        t.add_row({r.times[k], r.lyapunov[k], r.mean_entropy[k], r.max_entropy[k], r.theta_l2[k]});
    return t;
}

// ---------------------------------------------------------------------------
// Dataset directories: one PGM per scene plus manifest.csv with (path, seed, split)

inline Split parse_split(const std::string& s)
{
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    throw ValidationError("manifest: unknown split " + s);
}

inline void write_dataset(const std::vector<Scene>& scenes, const fs::path& dir)
{
    std::string manifest = "path,seed,split\n";
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        std::string name = std::to_string(i);
        name = "scene_" + std::string(name.size() < 4 ? 4 - name.size() : 0, '0') + name + ".pgm";
        write_label_map(scenes[i].labels, dir / name);
        manifest += name + "," + std::to_string(scenes[i].seed) + "," + to_string(scenes[i].split) + "\n";
    }
    write_file_atomic(dir / "manifest.csv", manifest);
}

/// c <= 0 takes the label count from each file header.
inline std::vector<Scene> read_dataset(const fs::path& dir, int c = 0)
{
    std::istringstream in(read_file(dir / "manifest.csv"));
    std::string line;
    std::getline(in, line);
    if (line != "path,seed,split") throw ValidationError("manifest: unexpected header in " + (dir / "manifest.csv").string());
    std::vector<Scene> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto c1 = line.find(','), c2 = line.rfind(',');
        if (c1 == std::string::npos || c1 == c2)
            throw ValidationError("manifest: malformed line " + std::to_string(lineno));
        std::uint64_t seed = 0;
        const std::string seed_text = line.substr(c1 + 1, c2 - c1 - 1);
        const auto r = std::from_chars(seed_text.data(), seed_text.data() + seed_text.size(), seed);
        if (r.ec != std::errc() || r.ptr != seed_text.data() + seed_text.size())
            throw ValidationError("manifest: bad seed on line " + std::to_string(lineno));
        out.push_back({read_label_map(dir / line.substr(0, c1), c), seed, parse_split(line.substr(c2 + 1))});
    }
    return out;
}

} // namespace sigmaflow::io
