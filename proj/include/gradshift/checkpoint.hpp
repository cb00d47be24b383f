#pragma once

// Binary checkpoints.
//
// Layout (little-endian):
//   8 bytes   magic "GSHIFT01"
//   u32       format version
//   u32       tensor count N
//   N x 2 u32 shapes; (rows, cols) for matrices, (length, 0) for vectors
//   f64 ...   payload, tensors back to back in row-major order
//   32 bytes  SHA-256 digest of the configuration that produced the file

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gradshift/array.hpp"
#include "gradshift/io.hpp"
#include "gradshift/objectives.hpp"

namespace gradshift {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(std::string_view bytes) {
    Digest d{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), d.data(), &len, EVP_sha256(), nullptr) != 1 || len != d.size())
        throw std::runtime_error("sha256 failed");
    return d;
}

inline std::string hex(const Digest& d) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    for (auto b : d) {
        s += digits[b >> 4];
        s += digits[b & 15];
    }
    return s;
}

inline constexpr std::string_view kCheckpointMagic = "GSHIFT01";
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { BadMagic, UnsupportedVersion, Truncated, TrailingBytes, DigestMismatch, ShapeMismatch };

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CheckpointErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    CheckpointErrorKind kind() const { return kind_; }

private:
    CheckpointErrorKind kind_;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::vector<Array> tensors;
    Digest digest{};

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace ckpt_detail {

template <class T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string_view s) : s_(s) {}
    template <class T>
    T get(const char* what) {
        if (s_.size() - i_ < sizeof(T))
            throw CheckpointError(CheckpointErrorKind::Truncated, std::string("truncated payload while reading ") + what);
        T v;
        std::memcpy(&v, s_.data() + i_, sizeof(T));
        i_ += sizeof(T);
        return v;
    }
    std::size_t remaining() const { return s_.size() - i_; }

private:
    std::string_view s_;
    std::size_t i_ = 0;
};

}  // namespace ckpt_detail

inline std::string encode_checkpoint(const Checkpoint& c) {
    std::string out(kCheckpointMagic);
    ckpt_detail::put<std::uint32_t>(out, c.version);
    ckpt_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        if (t.rank() == 2) {
            ckpt_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape()[0]));
            ckpt_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape()[1]));
        } else if (t.rank() == 1) {
            ckpt_detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape()[0]));
            ckpt_detail::put<std::uint32_t>(out, 0);
        } else {
            throw ShapeError("checkpoint: only vectors and matrices can be stored");
        }
    }
    for (const auto& t : c.tensors)
        for (double v : t.data()) ckpt_detail::put<double>(out, v);
    out.append(reinterpret_cast<const char*>(c.digest.data()), c.digest.size());
    return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
        throw CheckpointError(CheckpointErrorKind::BadMagic, "not a checkpoint (bad magic)");
    ckpt_detail::Reader r(bytes.substr(kCheckpointMagic.size()));
    Checkpoint c;
    c.version = r.get<std::uint32_t>("version");
    if (c.version != kCheckpointVersion)
        throw CheckpointError(CheckpointErrorKind::UnsupportedVersion,
                              "unsupported checkpoint version " + std::to_string(c.version) + " (this build reads " +
                                  std::to_string(kCheckpointVersion) + ")");
    const auto count = r.get<std::uint32_t>("tensor count");
    if (static_cast<std::uint64_t>(count) * 8 > r.remaining())
        throw CheckpointError(CheckpointErrorKind::Truncated, "truncated payload: shape table is incomplete");
    std::vector<Shape> shapes(count);
    for (auto& s : shapes) {
        const auto a = r.get<std::uint32_t>("shape");
        const auto b = r.get<std::uint32_t>("shape");
        s = b == 0 ? Shape{a} : Shape{a, b};
    }
    for (const auto& s : shapes) {
        std::size_t n = 1;
        for (auto e : s) n *= e;
        if (n * 8 > r.remaining()) throw CheckpointError(CheckpointErrorKind::Truncated, "truncated payload");
        std::vector<double> v(n);
        for (auto& x : v) x = r.get<double>("payload");
        c.tensors.emplace_back(s, std::move(v));
    }
    if (r.remaining() < c.digest.size()) throw CheckpointError(CheckpointErrorKind::Truncated, "truncated payload: digest is incomplete");
    for (auto& b : c.digest) b = r.get<std::uint8_t>("digest");
    if (r.remaining() != 0)
        throw CheckpointError(CheckpointErrorKind::TrailingBytes,
                              std::to_string(r.remaining()) + " unexpected bytes after the checkpoint digest");
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    atomic_write(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<Digest>& expected = std::nullopt) {
    Checkpoint c = decode_checkpoint(read_file(path));
    if (expected && c.digest != *expected)
        throw CheckpointError(CheckpointErrorKind::DigestMismatch,
                              "checkpoint '" + path.string() + "' was written for a different configuration (digest " +
                                  hex(c.digest) + ", expected " + hex(*expected) + ")");
    return c;
}

// --- training state <-> tensors -------------------------------------------------------

namespace ckpt_detail {

inline Array metrics_table(const std::vector<EpochMetrics>& rows) {
    std::vector<double> v;
    v.reserve(rows.size() * 7);
    for (const auto& m : rows) {
        for (double x : {static_cast<double>(m.t), static_cast<double>(m.epoch), m.class_loss, m.alignment, m.gp,
                         m.target_acc, m.wall_ms})
            v.push_back(x);
    }
    const std::size_t n = v.size();
    return Array({n}, std::move(v));
}

inline std::vector<EpochMetrics> metrics_rows(const Array& a) {
    if (a.rank() != 1 || a.size() % 7 != 0)
        throw CheckpointError(CheckpointErrorKind::ShapeMismatch, "checkpoint: metrics table has the wrong shape");
    std::vector<EpochMetrics> out(a.size() / 7);
    auto d = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double* r = d.data() + 7 * i;
        out[i] = {static_cast<std::size_t>(r[0]), static_cast<std::size_t>(r[1]), r[2], r[3], r[4], r[5], r[6]};
    }
    return out;
}

inline std::vector<Array*> model_arrays(AdaptationModel& m) {
    std::vector<Array*> v;
    for (auto* net : {&m.g, &m.h, &m.critic})
        for (auto& l : net->layers) {
            v.push_back(&l.weight);
            v.push_back(&l.bias);
        }
    if (m.summarizer) {
        for (Array* a : recurrent_arrays(*m.summarizer)) v.push_back(a);
        for (auto& h : m.summary.hidden) v.push_back(&h);
    }
    return v;
}

}  // namespace ckpt_detail

// Tensor order: position [next_step, total_steps, schedule, summary count],
// per-step trace, per-epoch history, then every model array.
inline Checkpoint pack_state(const ScheduleState& st, ScheduleKind kind, std::size_t total_steps, const Digest& digest) {
    Checkpoint c;
    c.digest = digest;
    c.tensors.push_back(Array({4}, {static_cast<double>(st.next_step), static_cast<double>(total_steps),
                                    static_cast<double>(static_cast<int>(kind)),
                                    static_cast<double>(st.model.summary.count)}));
    c.tensors.push_back(ckpt_detail::metrics_table(st.trace));
    c.tensors.push_back(ckpt_detail::metrics_table(st.epochs));
    auto model = st.model;
    for (Array* a : ckpt_detail::model_arrays(model)) c.tensors.push_back(*a);
    return c;
}

// `shape_template` supplies the expected architecture; every stored tensor
// must match it exactly.
inline ScheduleState unpack_state(const Checkpoint& c, ScheduleKind kind, std::size_t total_steps,
                                  AdaptationModel shape_template) {
    auto mismatch = [](const std::string& w) { return CheckpointError(CheckpointErrorKind::ShapeMismatch, w); };
    auto arrays = ckpt_detail::model_arrays(shape_template);
    if (c.tensors.size() != 3 + arrays.size())
        throw mismatch("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, the model needs " +
                       std::to_string(3 + arrays.size()));
    const Array& pos = c.tensors[0];
    if (pos.rank() != 1 || pos.size() != 4) throw mismatch("checkpoint: position record has the wrong shape");
    if (static_cast<std::size_t>(pos[1]) != total_steps || static_cast<int>(pos[2]) != static_cast<int>(kind))
        throw mismatch("checkpoint belongs to a different schedule");
    ScheduleState st;
    st.next_step = static_cast<std::size_t>(pos[0]);
    st.trace = ckpt_detail::metrics_rows(c.tensors[1]);
    st.epochs = ckpt_detail::metrics_rows(c.tensors[2]);
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        const Array& src = c.tensors[3 + i];
        if (src.shape() != arrays[i]->shape())
            throw mismatch("checkpoint tensor " + std::to_string(3 + i) + " has shape " + shape_str(src.shape()) +
                           ", expected " + shape_str(arrays[i]->shape()));
        *arrays[i] = src;
    }
    shape_template.summary.count = static_cast<std::size_t>(pos[3]);
    st.model = std::move(shape_template);
    return st;
}

}  // namespace gradshift
