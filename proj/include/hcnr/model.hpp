#pragma once

// Feedforward toy model:
//
//   x0   = [embed[subject]; embed[relation]]          (2E)
//   h_j  = tanh(W_j x_j + b_j),  x_{j+1} = h_j         (d' each, j = 0..L-1)
//   out  = W_out h_{L-1} + b_out                        (vocab logits)
//
// A "neuron" of hidden layer j is row k of W_j together with b_j[k].
// Gradients are analytic; the per-example squared row-gradient statistic
// needed by Fisher scoring falls out of the same pass because the
// per-example gradient of W_j is the outer product dz_n x_n^T.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hcnr/core_math.hpp"
#include "hcnr/errors.hpp"
#include "hcnr/synth_world.hpp"

namespace hcnr {

enum class Provenance { pretrained, sft, rait, rehearsal, restored, hcnr };

inline std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::pretrained: return "pretrained";
        case Provenance::sft: return "sft";
        case Provenance::rait: return "rait";
        case Provenance::rehearsal: return "rehearsal";
        case Provenance::restored: return "restored";
        case Provenance::hcnr: return "hcnr";
    }
    return "unknown";
}

inline Provenance provenance_from_string(const std::string& s) {
    for (Provenance p : {Provenance::pretrained, Provenance::sft, Provenance::rait, Provenance::rehearsal,
                         Provenance::restored, Provenance::hcnr})
        if (to_string(p) == s) return p;
    throw LoadError("provenance", "unknown provenance tag '" + s + "'");
}

struct Architecture {
    std::size_t vocab = 0;
    std::size_t embed_dim = 32;
    std::size_t hidden_dim = 128;
    std::size_t num_layers = 4;

    std::size_t input_dim(std::size_t layer) const noexcept { return layer == 0 ? 2 * embed_dim : hidden_dim; }
    friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct LayerParams {
    Matrix weight;  // rows x cols = out x in
    Vector bias;
    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ModelMeta {
    Provenance provenance = Provenance::pretrained;
    std::string stage = "init";
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string world_hash;
    friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

struct ModelCheckpoint {
    Architecture arch;
    Matrix embed;  // vocab x E
    std::vector<LayerParams> hidden;
    LayerParams out;  // vocab x d'
    ModelMeta meta;

    // Bitwise parameter equality (metadata excluded).
    bool same_weights(const ModelCheckpoint& o) const {
        return arch == o.arch && embed == o.embed && hidden == o.hidden && out == o.out;
    }
};

// ============================================================================
// CONSTRUCTION / TENSOR VISITATION
// ============================================================================

inline ModelCheckpoint zero_model(const Architecture& a) {
    if (a.vocab == 0 || a.embed_dim == 0 || a.hidden_dim == 0 || a.num_layers == 0)
        throw ConfigError("architecture: all dimensions must be positive");
    ModelCheckpoint m;
    m.arch = a;
    m.embed = Matrix(a.vocab, a.embed_dim);
    for (std::size_t j = 0; j < a.num_layers; ++j)
        m.hidden.push_back({Matrix(a.hidden_dim, a.input_dim(j)), Vector(a.hidden_dim, 0.0)});
    m.out = {Matrix(a.vocab, a.hidden_dim), Vector(a.vocab, 0.0)};
    return m;
}

// Embeddings ~ N(0, embed_scale^2); weights ~ N(0, 1/fan_in); biases zero.
// A small embedding scale lets token geometry be shaped by training (shared
// "unknown entity" features) rather than by the random draw.
inline constexpr double kDefaultEmbedScale = 0.1;

inline ModelCheckpoint init_model(const Architecture& a, std::uint64_t seed, double embed_scale = kDefaultEmbedScale) {
    ModelCheckpoint m = zero_model(a);
    RngStream rng = RngStream(seed).split("model-init");
    for (double& v : m.embed.data()) v = embed_scale * rng.normal();
    for (auto& layer : m.hidden) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
        for (double& v : layer.weight.data()) v = scale * rng.normal();
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(a.hidden_dim));
    for (double& v : m.out.weight.data()) v = scale * rng.normal();
    m.meta.seed = seed;
    return m;
}

struct TensorShape {
    std::size_t rows = 0;
    std::size_t cols = 0;  // 0 marks a vector
    std::size_t count() const noexcept { return cols == 0 ? rows : rows * cols; }
    friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

// Visits every tensor in serialization order: embed, hidden.j.{weight,bias},
// out.{weight,bias}. Works for models and anything else with the same layout.
template <class Params, class F>
void for_each_tensor(Params& p, F&& f) {
    f(std::string("embed"), TensorShape{p.embed.rows(), p.embed.cols()}, p.embed.data());
    for (std::size_t j = 0; j < p.hidden.size(); ++j) {
        auto& l = p.hidden[j];
        const std::string prefix = "hidden." + std::to_string(j);
        f(prefix + ".weight", TensorShape{l.weight.rows(), l.weight.cols()}, l.weight.data());
        f(prefix + ".bias", TensorShape{l.bias.size(), 0}, std::span(l.bias));
    }
    f(std::string("out.weight"), TensorShape{p.out.weight.rows(), p.out.weight.cols()}, p.out.weight.data());
    f(std::string("out.bias"), TensorShape{p.out.bias.size(), 0}, std::span(p.out.bias));
}

template <class Params>
std::vector<std::span<double>> tensor_spans(Params& p) {
    std::vector<std::span<double>> out;
    for_each_tensor(p, [&](const std::string&, TensorShape, std::span<double> d) { out.push_back(d); });
    return out;
}

inline std::vector<std::pair<std::string, TensorShape>> expected_tensors(const Architecture& a) {
    std::vector<std::pair<std::string, TensorShape>> t;
    t.emplace_back("embed", TensorShape{a.vocab, a.embed_dim});
    for (std::size_t j = 0; j < a.num_layers; ++j) {
        t.emplace_back("hidden." + std::to_string(j) + ".weight", TensorShape{a.hidden_dim, a.input_dim(j)});
        t.emplace_back("hidden." + std::to_string(j) + ".bias", TensorShape{a.hidden_dim, 0});
    }
    t.emplace_back("out.weight", TensorShape{a.vocab, a.hidden_dim});
    t.emplace_back("out.bias", TensorShape{a.vocab, 0});
    return t;
}

inline void validate_model(const ModelCheckpoint& m) {
    const ModelCheckpoint zero = zero_model(m.arch);
    if (m.hidden.size() != m.arch.num_layers)
        throw ContractViolation("model: layer count does not match architecture");
    auto check = [](const std::string& name, std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2) {
        if (r1 != r2 || c1 != c2) throw ContractViolation("model: tensor " + name + " has the wrong shape");
    };
    check("embed", m.embed.rows(), m.embed.cols(), zero.embed.rows(), zero.embed.cols());
    for (std::size_t j = 0; j < m.hidden.size(); ++j) {
        check("hidden." + std::to_string(j) + ".weight", m.hidden[j].weight.rows(), m.hidden[j].weight.cols(),
              zero.hidden[j].weight.rows(), zero.hidden[j].weight.cols());
        check("hidden." + std::to_string(j) + ".bias", m.hidden[j].bias.size(), 1, zero.hidden[j].bias.size(), 1);
    }
    check("out.weight", m.out.weight.rows(), m.out.weight.cols(), zero.out.weight.rows(), zero.out.weight.cols());
    check("out.bias", m.out.bias.size(), 1, zero.out.bias.size(), 1);
    for_each_tensor(const_cast<ModelCheckpoint&>(m), [](const std::string& name, TensorShape, std::span<double> d) {
        for (double v : d)
            if (!std::isfinite(v)) throw NumericalError("model: tensor " + name + " contains a non-finite value");
    });
}

// ============================================================================
// FORWARD
// ============================================================================

struct HiddenTrace {
    std::vector<Matrix> inputs;   // X_j: input_dim(j) x batch
    std::vector<Matrix> outputs;  // h_j: d' x batch, post-activation
};

struct ForwardResult {
    Matrix logits;  // vocab x batch
    HiddenTrace trace;
};

inline Matrix affine(const LayerParams& p, const Matrix& x) {
    Matrix z = matmul(p.weight, x);
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const double b = p.bias[i];
        for (double& v : z.row(i)) v += b;
    }
    return z;
}

inline Matrix embed_batch(const ModelCheckpoint& m, std::span<const QaExample> batch) {
    const std::size_t e = m.arch.embed_dim;
    Matrix x(2 * e, batch.size());
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const auto& ex = batch[n];
        if (ex.subject >= m.arch.vocab || ex.relation >= m.arch.vocab)
            throw InputError("token id out of range (subject=" + std::to_string(ex.subject) +
                             ", relation=" + std::to_string(ex.relation) +
                             ", vocab=" + std::to_string(m.arch.vocab) + ")");
        for (std::size_t i = 0; i < e; ++i) {
            x(i, n) = m.embed(ex.subject, i);
            x(e + i, n) = m.embed(ex.relation, i);
        }
    }
    return x;
}

inline ForwardResult forward(const ModelCheckpoint& m, std::span<const QaExample> batch) {
    ForwardResult r;
    Matrix x = embed_batch(m, batch);
    for (const auto& layer : m.hidden) {
        Matrix h = affine(layer, x);
        for (double& v : h.data()) v = std::tanh(v);
        r.trace.inputs.push_back(std::move(x));
        x = h;
        r.trace.outputs.push_back(std::move(h));
    }
    r.logits = affine(m.out, x);
    return r;
}

// Column-wise softmax with max subtraction.
inline Matrix softmax_columns(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t n = 0; n < logits.cols(); ++n) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < logits.rows(); ++v) mx = std::max(mx, logits(v, n));
        double z = 0.0;
        for (std::size_t v = 0; v < logits.rows(); ++v) {
            const double e = std::exp(logits(v, n) - mx);
            p(v, n) = e;
            z += e;
        }
        for (std::size_t v = 0; v < logits.rows(); ++v) p(v, n) /= z;
    }
    return p;
}

inline double log_softmax_at(const Matrix& logits, std::size_t col, std::size_t row) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < logits.rows(); ++v) mx = std::max(mx, logits(v, col));
    double z = 0.0;
    for (std::size_t v = 0; v < logits.rows(); ++v) z += std::exp(logits(v, col) - mx);
    return logits(row, col) - mx - std::log(z);
}

// Mean cross-entropy of the targets.
inline double mean_loss(const ModelCheckpoint& m, std::span<const QaExample> batch) {
    if (batch.empty()) return 0.0;
    const Matrix logits = forward(m, batch).logits;
    double s = 0.0;
    for (std::size_t n = 0; n < batch.size(); ++n) s -= log_softmax_at(logits, n, batch[n].target);
    return s / static_cast<double>(batch.size());
}

// argmax per column; ties resolve to the lowest token id.
inline std::vector<TokenId> predict(const ModelCheckpoint& m, std::span<const QaExample> batch) {
    std::vector<TokenId> out(batch.size());
    if (batch.empty()) return out;
    const Matrix logits = forward(m, batch).logits;
    for (std::size_t n = 0; n < batch.size(); ++n) {
        std::size_t best = 0;
        for (std::size_t v = 1; v < logits.rows(); ++v)
            if (logits(v, n) > logits(best, n)) best = v;
        out[n] = static_cast<TokenId>(best);
    }
    return out;
}

// ============================================================================
// BACKWARD
// ============================================================================

struct BatchGradients {
    Matrix embed;
    std::vector<LayerParams> hidden;
    LayerParams out;
    double loss = 0.0;
    // Per hidden layer: mean over examples of sum_c (dL_n/dW_{j,k,c})^2.
    std::vector<Vector> sq_row_grads;
};

inline BatchGradients zero_gradients(const Architecture& a) {
    ModelCheckpoint z = zero_model(a);
    BatchGradients g;
    g.embed = std::move(z.embed);
    g.hidden = std::move(z.hidden);
    g.out = std::move(z.out);
    g.sq_row_grads.assign(a.num_layers, Vector(a.hidden_dim, 0.0));
    return g;
}

inline BatchGradients backward(const ModelCheckpoint& m, std::span<const QaExample> batch) {
    if (batch.empty()) throw ContractViolation("backward: empty batch");
    const std::size_t bsz = batch.size();
    const double inv_b = 1.0 / static_cast<double>(bsz);

    ForwardResult fr = forward(m, batch);
    BatchGradients g;
    g.sq_row_grads.assign(m.arch.num_layers, Vector(m.arch.hidden_dim, 0.0));

    Matrix dz = softmax_columns(fr.logits);
    double loss = 0.0;
    for (std::size_t n = 0; n < bsz; ++n) {
        const TokenId t = batch[n].target;
        if (t >= m.arch.vocab) throw InputError("target token out of range: " + std::to_string(t));
        loss -= log_softmax_at(fr.logits, n, t);
        dz(t, n) -= 1.0;
    }
    g.loss = loss * inv_b;
    for (double& v : dz.data()) v *= inv_b;

    const Matrix& h_last = fr.trace.outputs.back();
    g.out.weight = matmul_nt(dz, h_last);
    g.out.bias.assign(dz.rows(), 0.0);
    for (std::size_t i = 0; i < dz.rows(); ++i)
        for (double v : dz.row(i)) g.out.bias[i] += v;

    Matrix dh = matmul_tn(m.out.weight, dz);
    g.hidden.resize(m.arch.num_layers);
    for (std::size_t j = m.arch.num_layers; j-- > 0;) {
        const Matrix& h = fr.trace.outputs[j];
        const Matrix& x = fr.trace.inputs[j];
        Matrix dpre = std::move(dh);
        for (std::size_t i = 0; i < dpre.size(); ++i) {
            const double hv = h.data()[i];
            dpre.data()[i] *= 1.0 - hv * hv;
        }
        g.hidden[j].weight = matmul_nt(dpre, x);
        g.hidden[j].bias.assign(dpre.rows(), 0.0);
        for (std::size_t i = 0; i < dpre.rows(); ++i)
            for (double v : dpre.row(i)) g.hidden[j].bias[i] += v;

        // Per-example gradient of row k is (B * dpre[k,n]) * x_n.
        Vector xnorm(bsz, 0.0);
        for (std::size_t c = 0; c < x.rows(); ++c)
            for (std::size_t n = 0; n < bsz; ++n) xnorm[n] += x(c, n) * x(c, n);
        auto& sq = g.sq_row_grads[j];
        const double b2 = static_cast<double>(bsz) * static_cast<double>(bsz);
        for (std::size_t k = 0; k < dpre.rows(); ++k) {
            double s = 0.0;
            for (std::size_t n = 0; n < bsz; ++n) s += dpre(k, n) * dpre(k, n) * xnorm[n];
            sq[k] = s * b2 * inv_b;
        }

        dh = matmul_tn(m.hidden[j].weight, dpre);
    }

    const std::size_t e = m.arch.embed_dim;
    g.embed = Matrix(m.arch.vocab, e);
    for (std::size_t n = 0; n < bsz; ++n) {
        auto srow = g.embed.row(batch[n].subject);
        for (std::size_t i = 0; i < e; ++i) srow[i] += dh(i, n);
        auto rrow = g.embed.row(batch[n].relation);
        for (std::size_t i = 0; i < e; ++i) rrow[i] += dh(e + i, n);
    }
    return g;
}

// ============================================================================
// CHECKPOINT I/O
// ============================================================================
//
// Layout: "HCNR" | u16 version | u32 header length | JSON header |
//         tensors as row-major little-endian f64 in for_each_tensor order.

inline constexpr std::array<char, 4> kCheckpointMagic = {'H', 'C', 'N', 'R'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(std::string_view in, std::size_t pos, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
}

inline nlohmann::json arch_json(const Architecture& a) {
    return {{"vocab", a.vocab}, {"embed_dim", a.embed_dim}, {"hidden_dim", a.hidden_dim}, {"num_layers", a.num_layers}};
}

}  // namespace detail

inline std::string checkpoint_bytes(const ModelCheckpoint& m) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, shape] : expected_tensors(m.arch)) {
        nlohmann::json s = shape.cols == 0 ? nlohmann::json::array({shape.rows})
                                           : nlohmann::json::array({shape.rows, shape.cols});
        tensors.push_back({{"name", name}, {"shape", s}});
    }
    const nlohmann::json header = {
        {"format", "hcnr-checkpoint"},
        {"provenance", to_string(m.meta.provenance)},
        {"stage", m.meta.stage},
        {"seed", m.meta.seed},
        {"config_hash", m.meta.config_hash},
        {"world_hash", m.meta.world_hash},
        {"arch", detail::arch_json(m.arch)},
        {"tensors", tensors},
    };
    const std::string hdr = header.dump();

    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_le(out, kCheckpointVersion, 2);
    detail::put_le(out, hdr.size(), 4);
    out += hdr;
    for_each_tensor(const_cast<ModelCheckpoint&>(m), [&](const std::string&, TensorShape, std::span<double> d) {
        for (double v : d) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
    });
    return out;
}

inline ModelCheckpoint checkpoint_from_bytes(std::string_view in) {
    auto need = [&](std::size_t pos, std::size_t n, const std::string& field) {
        if (pos + n > in.size())
            throw LoadError(field, "unexpected end of file while reading " + field + " (need " +
                                       std::to_string(pos + n) + " bytes, have " + std::to_string(in.size()) + ")");
    };
    need(0, 4, "magic");
    if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), in.begin()))
        throw LoadError("magic", "bad magic: not an HCNR checkpoint");
    need(4, 2, "version");
    const auto version = static_cast<std::uint16_t>(detail::get_le(in, 4, 2));
    if (version != kCheckpointVersion)
        throw LoadError("version", "unsupported checkpoint version " + std::to_string(version));
    need(6, 4, "header_length");
    const auto hlen = static_cast<std::size_t>(detail::get_le(in, 6, 4));
    need(10, hlen, "header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(in.substr(10, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("header", std::string("malformed checkpoint header: ") + e.what());
    }

    ModelCheckpoint m;
    try {
        const auto& a = header.at("arch");
        m.arch.vocab = a.at("vocab").get<std::size_t>();
        m.arch.embed_dim = a.at("embed_dim").get<std::size_t>();
        m.arch.hidden_dim = a.at("hidden_dim").get<std::size_t>();
        m.arch.num_layers = a.at("num_layers").get<std::size_t>();
        m.meta.provenance = provenance_from_string(header.at("provenance").get<std::string>());
        m.meta.stage = header.at("stage").get<std::string>();
        m.meta.seed = header.at("seed").get<std::uint64_t>();
        m.meta.config_hash = header.at("config_hash").get<std::string>();
        m.meta.world_hash = header.at("world_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("header", std::string("missing or mistyped header field: ") + e.what());
    }

    const auto expected = expected_tensors(m.arch);
    const auto& declared = header.at("tensors");
    if (!declared.is_array() || declared.size() != expected.size())
        throw LoadError("tensors", "tensor list does not match architecture");
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& [name, shape] = expected[i];
        const auto& d = declared[i];
        if (d.value("name", std::string()) != name)
            throw LoadError(name, "tensor " + std::to_string(i) + " should be '" + name + "'");
        const auto dims = d.at("shape").get<std::vector<std::size_t>>();
        const TensorShape got = dims.size() == 1   ? TensorShape{dims[0], 0}
                                : dims.size() == 2 ? TensorShape{dims[0], dims[1]}
                                                   : TensorShape{0, 0};
        if (!(got == shape))
            throw LoadError(name, "shape mismatch for tensor " + name + ": header declares [" +
                                      std::to_string(got.rows) + "," + std::to_string(got.cols) +
                                      "] but architecture implies [" + std::to_string(shape.rows) + "," +
                                      std::to_string(shape.cols) + "]");
    }

    m = [&] {
        ModelCheckpoint z = zero_model(m.arch);
        z.meta = m.meta;
        return z;
    }();
    std::size_t pos = 10 + hlen;
    std::string last = "header";
    for_each_tensor(m, [&](const std::string& name, TensorShape, std::span<double> d) {
        need(pos, d.size() * 8, "tensor " + name);
        for (double& v : d) {
            v = std::bit_cast<double>(detail::get_le(in, pos, 8));
            pos += 8;
        }
        last = name;
    });
    if (pos != in.size())
        throw LoadError("payload", "payload size mismatch: " + std::to_string(in.size() - pos) +
                                       " trailing bytes after tensor " + last);
    return m;
}

inline void save_checkpoint(const ModelCheckpoint& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open checkpoint for writing: " + path);
    const std::string bytes = checkpoint_bytes(m);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing checkpoint: " + path);
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("path", "cannot open checkpoint: " + path);
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes);
}

}  // namespace hcnr
