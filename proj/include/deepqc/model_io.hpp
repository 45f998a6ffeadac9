#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "deepqc/csv.hpp"
#include "deepqc/error.hpp"
#include "deepqc/model.hpp"

namespace deepqc {

inline constexpr int kModelFormatVersion = 1;
inline constexpr std::string_view kModelMagic = "deepqc-model";

/// 64-bit FNV-1a, used to fingerprint the config text a model was trained with.
inline std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v, 16);
    std::string s(buf, end);
    return std::string(16 - s.size(), '0') + s;
}

/// Text model file:
///
///   deepqc-model
///   format_version 1
///   dims <value_features> <context_features> <embed> <hidden>
///   meta <seed> <epochs> <best_epoch> <config_hash>
///   tensor <name> <shape...>
///   <row values, space separated, one row per line>
///   ...
///   end
///
/// Values are written in shortest round-trip form, so save/load is exact.
inline void write_model(std::ostream& out, const ModelParams& p) {
    p.validate();
    out << kModelMagic << '\n';
    out << "format_version " << kModelFormatVersion << '\n';
    out << "dims " << p.dims.value_features << ' ' << p.dims.context_features << ' ' << p.dims.embed << ' '
        << p.dims.hidden << '\n';
    out << "meta " << p.meta.seed << ' ' << p.meta.epochs << ' ' << p.meta.best_epoch << ' '
        << (p.meta.config_hash.empty() ? "-" : p.meta.config_hash) << '\n';
    ModelParams::visit(p, [&](const std::string& name, const Tensor& t) {
        out << "tensor " << name;
        for (std::size_t d : t.shape()) out << ' ' << d;
        out << '\n';
        const std::size_t cols = t.cols();
        for (std::size_t i = 0; i < t.size(); ++i) {
            out << format_number(t[i]) << ((i + 1) % cols == 0 ? '\n' : ' ');
        }
    });
    out << "end\n";
}

inline ModelParams read_model(std::istream& in, const std::string& source = "<model>") {
    std::size_t line_no = 0;
    std::string line;
    auto fail = [&](const std::string& msg) {
        return DataError(source + ": line " + std::to_string(line_no) + ": " + msg);
    };
    auto next_line = [&]() -> std::istringstream {
        if (!std::getline(in, line)) throw fail("unexpected end of model file");
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return std::istringstream(line);
    };
    auto expect_word = [&](std::istringstream& ls, std::string_view word) {
        std::string w;
        if (!(ls >> w) || w != word) throw fail("expected '" + std::string(word) + "'");
    };
    auto expect_end_of_line = [&](std::istringstream& ls) {
        std::string extra;
        if (ls >> extra) throw fail("unexpected trailing field '" + extra + "'");
    };

    {
        auto ls = next_line();
        std::string magic;
        ls >> magic;
        if (magic != kModelMagic) throw fail("not a deepqc model file");
    }
    {
        auto ls = next_line();
        expect_word(ls, "format_version");
        int version = 0;
        if (!(ls >> version)) throw fail("unreadable format_version");
        if (version != kModelFormatVersion) {
            throw fail("unsupported model format version " + std::to_string(version) + " (expected " +
                       std::to_string(kModelFormatVersion) + ")");
        }
    }
    ModelDims dims;
    {
        auto ls = next_line();
        expect_word(ls, "dims");
        if (!(ls >> dims.value_features >> dims.context_features >> dims.embed >> dims.hidden)) {
            throw fail("unreadable dims");
        }
        expect_end_of_line(ls);
        if (dims.value_features != kValueFeatures || dims.context_features != kContextFeatures || dims.embed == 0 ||
            dims.hidden == 0) {
            throw fail("unsupported dims");
        }
    }
    ModelParams p = ModelParams::zeros(dims);
    {
        auto ls = next_line();
        expect_word(ls, "meta");
        if (!(ls >> p.meta.seed >> p.meta.epochs >> p.meta.best_epoch >> p.meta.config_hash)) {
            throw fail("unreadable meta");
        }
        if (p.meta.config_hash == "-") p.meta.config_hash.clear();
        expect_end_of_line(ls);
    }
    ModelParams::visit(p, [&](const std::string& name, Tensor& t) {
        auto ls = next_line();
        expect_word(ls, "tensor");
        std::string got;
        ls >> got;
        if (got != name) throw fail("expected tensor '" + name + "', found '" + got + "'");
        Tensor::Shape shape;
        std::size_t d = 0;
        while (ls >> d) shape.push_back(d);
        if (!ls.eof()) throw fail("unreadable shape for tensor '" + name + "'");
        if (shape != t.shape()) {
            throw fail("tensor '" + name + "' has shape " + Tensor::shape_string(shape) + ", expected " +
                       Tensor::shape_string(t.shape()));
        }
        std::size_t filled = 0;
        for (std::size_t r = 0; r < t.rows(); ++r) {
            auto row = next_line();
            std::string tok;
            for (std::size_t c = 0; c < t.cols(); ++c) {
                if (!(row >> tok)) throw fail("tensor '" + name + "': row too short");
                const auto v = parse_number(tok);
                if (!v) throw fail("tensor '" + name + "': bad value '" + tok + "'");
                t[filled++] = *v;
            }
            expect_end_of_line(row);
        }
    });
    {
        auto ls = next_line();
        expect_word(ls, "end");
    }
    return p;
}

inline void save_model(const std::filesystem::path& path, const ModelParams& p) {
    write_file_atomically(path, [&](std::ostream& out) { write_model(out, p); });
}

inline ModelParams load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path.string() + ": cannot open model file");
    return read_model(in, path.string());
}

}  // namespace deepqc
