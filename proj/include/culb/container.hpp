#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "culb/diffusion.hpp"
#include "culb/errors.hpp"
#include "culb/io_util.hpp"
#include "culb/tensor.hpp"
#include "culb/world.hpp"

namespace culb {

// Container layout: "CULB" magic, u32 version, u64 manifest length, manifest
// JSON (block names/shapes/offsets plus kind-specific metadata), then the
// payload as little-endian 64-bit floats in manifest order. Round trips are
// bit-exact; unknown versions are rejected outright.

inline constexpr char kContainerMagic[4] = {'C', 'U', 'L', 'B'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
inline void put_f64_le(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    put_u64_le(out, bits);
}
inline double get_f64_le(const unsigned char* p) {
    const std::uint64_t bits = get_u64_le(p);
    double d;
    std::memcpy(&d, &bits, sizeof d);
    return d;
}

}  // namespace detail

class ContainerWriter {
public:
    explicit ContainerWriter(const std::string& kind) { manifest_["kind"] = kind; }

    nlohmann::json& meta() { return manifest_; }

    void add_block(const std::string& name, const Tensor& t) {
        nlohmann::json b;
        b["name"] = name;
        b["shape"] = t.shape;
        b["offset"] = payload_.size();
        manifest_["blocks"].push_back(b);
        payload_.insert(payload_.end(), t.data.begin(), t.data.end());
    }

    std::string serialize() const {
        nlohmann::json m = manifest_;
        m["payload_len"] = payload_.size();
        const std::string mjson = m.dump();
        std::string out;
        out.reserve(16 + mjson.size() + payload_.size() * 8);
        out.append(kContainerMagic, 4);
        detail::put_u32_le(out, kContainerVersion);
        detail::put_u64_le(out, mjson.size());
        out += mjson;
        for (double d : payload_) detail::put_f64_le(out, d);
        return out;
    }

    void write(const std::filesystem::path& path) const { atomic_write_file(path, serialize()); }

private:
    nlohmann::json manifest_;
    std::vector<double> payload_;
};

class ContainerReader {
public:
    explicit ContainerReader(const std::string& bytes) {
        if (bytes.size() < 16) throw ValidationError("container: truncated header");
        if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
            throw ValidationError("container: bad magic bytes");
        }
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
        const std::uint32_t version = detail::get_u32_le(p + 4);
        if (version != kContainerVersion) {
            throw ValidationError("container: unsupported format version " +
                                  std::to_string(version));
        }
        const std::uint64_t mlen = detail::get_u64_le(p + 8);
        if (16 + mlen > bytes.size()) throw ValidationError("container: manifest overruns file");
        manifest_ = nlohmann::json::parse(bytes.substr(16, mlen));

        const std::size_t payload_bytes = bytes.size() - 16 - mlen;
        if (payload_bytes % 8 != 0) throw ValidationError("container: ragged payload");
        const std::size_t n = payload_bytes / 8;
        if (manifest_.contains("payload_len") &&
            manifest_["payload_len"].get<std::size_t>() != n) {
            throw ValidationError("container: payload length disagrees with manifest");
        }
        payload_.resize(n);
        const unsigned char* q = p + 16 + mlen;
        for (std::size_t i = 0; i < n; ++i) payload_[i] = detail::get_f64_le(q + 8 * i);
    }

    static ContainerReader from_file(const std::filesystem::path& path) {
        return ContainerReader(read_file(path));
    }

    const nlohmann::json& meta() const { return manifest_; }

    std::string kind() const { return manifest_.value("kind", ""); }

    Tensor block(const std::string& name) const {
        for (const auto& b : manifest_.at("blocks")) {
            if (b.at("name").get<std::string>() != name) continue;
            const auto shape = b.at("shape").get<std::vector<std::size_t>>();
            const std::size_t offset = b.at("offset").get<std::size_t>();
            const std::size_t n = Tensor::numel_of(shape);
            if (offset + n > payload_.size()) {
                throw ValidationError("container: block " + name + " overruns payload");
            }
            return Tensor(shape, std::vector<double>(payload_.begin() + offset,
                                                     payload_.begin() + offset + n));
        }
        throw ValidationError("container: missing block " + name);
    }

private:
    nlohmann::json manifest_;
    std::vector<double> payload_;
};

// ---- model checkpoints ----

inline nlohmann::json lineage_to_json(const std::vector<LineageEntry>& lineage) {
    nlohmann::json arr = nlohmann::json::array();
    for (const LineageEntry& e : lineage) {
        arr.push_back({{"target", e.target},
                       {"anchor", e.anchor},
                       {"loss_variant", e.loss_variant},
                       {"steps", e.steps},
                       {"lr", e.lr},
                       {"batch_size", e.batch_size},
                       {"addons", e.addons}});
    }
    return arr;
}

inline std::vector<LineageEntry> lineage_from_json(const nlohmann::json& arr) {
    std::vector<LineageEntry> out;
    for (const auto& e : arr) {
        LineageEntry le;
        le.target = e.at("target").get<int>();
        le.anchor = e.at("anchor").get<int>();
        le.loss_variant = e.at("loss_variant").get<std::string>();
        le.steps = e.at("steps").get<std::size_t>();
        le.lr = e.at("lr").get<double>();
        le.batch_size = e.at("batch_size").get<std::size_t>();
        le.addons = e.at("addons").get<std::string>();
        out.push_back(std::move(le));
    }
    return out;
}

inline void write_model_checkpoint(const std::filesystem::path& path,
                                   const ModelCheckpoint& ck) {
    ContainerWriter w("model");
    auto& meta = w.meta();
    meta["world_hash"] = ck.world_hash;
    meta["sampler_id"] = ck.sampler_id;
    meta["rng_algorithm_id"] = ck.rng_id;
    meta["lineage"] = lineage_to_json(ck.lineage);
    meta["dims"] = {{"D", ck.params.dims.D}, {"e", ck.params.dims.e},
                    {"e_t", ck.params.dims.e_t}, {"h", ck.params.dims.h},
                    {"dk", ck.params.dims.dk}, {"dv", ck.params.dims.dv},
                    {"h2", ck.params.dims.h2}};
    meta["schedule_T"] = ck.schedule.T;
    auto blocks = ck.params.blocks();
    for (std::size_t b = 0; b < kNumBlocks; ++b) w.add_block(kBlockNames[b], *blocks[b]);
    w.add_block("schedule_beta", Tensor::vector(std::vector<double>(ck.schedule.beta)));
    w.add_block("schedule_alpha_bar",
                Tensor::vector(std::vector<double>(ck.schedule.alpha_bar)));
    w.write(path);
}

inline ModelCheckpoint read_model_checkpoint(const std::filesystem::path& path) {
    ContainerReader r = ContainerReader::from_file(path);
    if (r.kind() != "model") throw ValidationError("container: expected a model checkpoint");
    const auto& meta = r.meta();
    ModelCheckpoint ck;
    ModelDims d;
    d.D = meta.at("dims").at("D").get<std::size_t>();
    d.e = meta.at("dims").at("e").get<std::size_t>();
    d.e_t = meta.at("dims").at("e_t").get<std::size_t>();
    d.h = meta.at("dims").at("h").get<std::size_t>();
    d.dk = meta.at("dims").at("dk").get<std::size_t>();
    d.dv = meta.at("dims").at("dv").get<std::size_t>();
    d.h2 = meta.at("dims").at("h2").get<std::size_t>();
    ck.params = DenoiserParams::zeros(d);
    auto blocks = ck.params.blocks();
    for (std::size_t b = 0; b < kNumBlocks; ++b) {
        Tensor t = r.block(kBlockNames[b]);
        if (!t.same_shape(*blocks[b])) {
            throw ValidationError(std::string("container: block shape mismatch for ") +
                                  kBlockNames[b]);
        }
        *blocks[b] = std::move(t);
    }
    ck.schedule.T = meta.at("schedule_T").get<std::size_t>();
    ck.schedule.beta = r.block("schedule_beta").data;
    ck.schedule.alpha_bar = r.block("schedule_alpha_bar").data;
    ck.schedule.validate();
    ck.world_hash = meta.at("world_hash").get<std::string>();
    ck.sampler_id = meta.value("sampler_id", kSamplerId);
    ck.rng_id = meta.value("rng_algorithm_id", kRngAlgorithmId);
    ck.lineage = lineage_from_json(meta.value("lineage", nlohmann::json::array()));
    return ck;
}

// ---- worlds ----

inline void write_world(const std::filesystem::path& path, const World& w) {
    ContainerWriter cw("world");
    auto& meta = cw.meta();
    meta["world_hash"] = w.content_hash();
    meta["seed"] = w.seed;
    meta["noise_sigma"] = w.noise_sigma;
    meta["config"] = {{"S", w.config.S},
                      {"O", w.config.O},
                      {"e", w.config.e},
                      {"D", w.config.D},
                      {"noise_sigma", w.config.noise_sigma},
                      {"similarity_spread", w.config.similarity_spread},
                      {"seed", w.config.seed},
                      {"unlearn_domain", domain_name(w.config.unlearn_domain)},
                      {"unlearn_count", w.config.unlearn_count}};
    meta["splits"] = {{"unlearn_sequence", w.splits.unlearn_sequence},
                      {"heldout_styles", w.splits.heldout_styles},
                      {"heldout_objects", w.splits.heldout_objects}};
    nlohmann::json names = nlohmann::json::array();
    for (const Concept& c : w.styles) names.push_back(c.name);
    for (const Concept& c : w.objects) names.push_back(c.name);
    meta["names"] = names;

    for (std::size_t s = 0; s < w.num_styles(); ++s) {
        cw.add_block("style_emb_" + std::to_string(s), w.styles[s].embedding);
        cw.add_block("style_transform_" + std::to_string(s), w.style_transforms[s]);
    }
    for (std::size_t o = 0; o < w.num_objects(); ++o) {
        cw.add_block("object_emb_" + std::to_string(o), w.objects[o].embedding);
        cw.add_block("object_base_" + std::to_string(o), w.object_bases[o]);
    }
    cw.write(path);
}

inline World read_world(const std::filesystem::path& path) {
    ContainerReader r = ContainerReader::from_file(path);
    if (r.kind() != "world") throw ValidationError("container: expected a world file");
    const auto& meta = r.meta();
    World w;
    const auto& cfg = meta.at("config");
    w.config.S = cfg.at("S").get<std::size_t>();
    w.config.O = cfg.at("O").get<std::size_t>();
    w.config.e = cfg.at("e").get<std::size_t>();
    w.config.D = cfg.at("D").get<std::size_t>();
    w.config.noise_sigma = cfg.at("noise_sigma").get<double>();
    w.config.similarity_spread = cfg.at("similarity_spread").get<double>();
    w.config.seed = cfg.at("seed").get<std::uint64_t>();
    w.config.unlearn_domain =
        cfg.at("unlearn_domain").get<std::string>() == "style" ? Domain::style : Domain::object;
    w.config.unlearn_count = cfg.at("unlearn_count").get<std::size_t>();
    w.seed = meta.at("seed").get<std::uint64_t>();
    w.noise_sigma = meta.at("noise_sigma").get<double>();
    w.splits.unlearn_sequence = meta.at("splits").at("unlearn_sequence").get<std::vector<int>>();
    w.splits.heldout_styles = meta.at("splits").at("heldout_styles").get<std::vector<int>>();
    w.splits.heldout_objects = meta.at("splits").at("heldout_objects").get<std::vector<int>>();
    const auto names = meta.at("names").get<std::vector<std::string>>();

    for (std::size_t s = 0; s < w.config.S; ++s) {
        Concept c;
        c.id = static_cast<int>(s);
        c.domain = Domain::style;
        c.name = names.at(s);
        c.embedding = r.block("style_emb_" + std::to_string(s));
        w.styles.push_back(std::move(c));
        w.style_transforms.push_back(r.block("style_transform_" + std::to_string(s)));
    }
    for (std::size_t o = 0; o < w.config.O; ++o) {
        Concept c;
        c.id = static_cast<int>(w.config.S + o);
        c.domain = Domain::object;
        c.name = names.at(w.config.S + o);
        c.embedding = r.block("object_emb_" + std::to_string(o));
        w.objects.push_back(std::move(c));
        w.object_bases.push_back(r.block("object_base_" + std::to_string(o)));
    }
    if (w.content_hash() != meta.at("world_hash").get<std::string>()) {
        throw ValidationError("container: world hash mismatch after load");
    }
    validate_world(w);
    return w;
}

// ---- classifiers ----

struct ClassifierPair {
    Classifier style;
    Classifier object;
    std::string world_hash;
};

inline void write_classifiers(const std::filesystem::path& path, const ClassifierPair& cp) {
    ContainerWriter w("classifiers");
    w.meta()["world_hash"] = cp.world_hash;
    w.add_block("style_weights", cp.style.weights);
    w.add_block("style_bias", cp.style.bias);
    w.add_block("object_weights", cp.object.weights);
    w.add_block("object_bias", cp.object.bias);
    w.write(path);
}

inline ClassifierPair read_classifiers(const std::filesystem::path& path) {
    ContainerReader r = ContainerReader::from_file(path);
    if (r.kind() != "classifiers") throw ValidationError("container: expected a classifier file");
    ClassifierPair cp;
    cp.world_hash = r.meta().at("world_hash").get<std::string>();
    cp.style.domain = Domain::style;
    cp.style.weights = r.block("style_weights");
    cp.style.bias = r.block("style_bias");
    cp.object.domain = Domain::object;
    cp.object.weights = r.block("object_weights");
    cp.object.bias = r.block("object_bias");
    return cp;
}

}  // namespace culb
