#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expost/data.hpp"
#include "expost/engine.hpp"
#include "expost/model.hpp"
#include "expost/trainer.hpp"

namespace expost {

using json = nlohmann::json;

inline json to_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},     {"n_heads", c.n_heads},
            {"n_layers", c.n_layers},   {"d_ff", c.d_ff},
            {"vocab_size", c.vocab_size}, {"pos_scheme", std::string(pos_scheme_name(c.pos_scheme))},
            {"rotary_base", c.rotary_base}, {"max_position", c.max_position},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j, ModelConfig c = {}) {
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    if (j.contains("pos_scheme")) c.pos_scheme = parse_pos_scheme(j.at("pos_scheme").get<std::string>());
    c.rotary_base = j.value("rotary_base", c.rotary_base);
    c.max_position = j.value("max_position", c.max_position);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

inline json to_json(const ToyCorpusSpec& s) {
    return {{"task", toy_task_name(s.task)}, {"min_len", s.min_len}, {"max_len", s.max_len}, {"vocab_size", s.vocab_size},
            {"seed", s.seed},                {"size", s.size},       {"window", s.window}};
}

inline ToyCorpusSpec corpus_from_json(const json& j, ToyCorpusSpec s = {}) {
    if (j.contains("task")) s.task = parse_toy_task(j.at("task").get<std::string>());
    s.min_len = j.value("min_len", s.min_len);
    s.max_len = j.value("max_len", s.max_len);
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.seed = j.value("seed", s.seed);
    s.size = j.value("size", s.size);
    s.window = j.value("window", s.window);
    s.validate();
    return s;
}

inline json to_json(const TrainConfig& t) {
    return {{"steps", t.steps}, {"batch", t.batch},     {"lr", t.lr},         {"beta1", t.beta1}, {"beta2", t.beta2},
            {"eps", t.eps},     {"clip_norm", t.clip_norm}, {"warmup", t.warmup}, {"seed", t.seed}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig t = {}) {
    t.steps = j.value("steps", t.steps);
    t.batch = j.value("batch", t.batch);
    t.lr = j.value("lr", t.lr);
    t.beta1 = j.value("beta1", t.beta1);
    t.beta2 = j.value("beta2", t.beta2);
    t.eps = j.value("eps", t.eps);
    t.clip_norm = j.value("clip_norm", t.clip_norm);
    t.warmup = j.value("warmup", t.warmup);
    t.seed = j.value("seed", t.seed);
    return t;
}

inline json to_json(const RoleLengths& r) { return {{"prompt", r.prompt}, {"user", r.user}, {"assistant", r.assistant}}; }

inline RoleLengths roles_from_json(const json& j, RoleLengths r = {}) {
    r.prompt = j.value("prompt", r.prompt);
    r.user = j.value("user", r.user);
    r.assistant = j.value("assistant", r.assistant);
    return r;
}

/// One JSON object per step, newline separated.
inline std::string serialize_trace(const StreamTrace& t) {
    std::string out;
    json head = {{"strategy", t.strategy.name()}, {"slot_len", t.strategy.slot_len}, {"policy", t.policy.to_string()},
                 {"roles", to_json(t.roles)},     {"source", t.source},              {"output", t.output},
                 {"capped", t.capped}};
    out += head.dump() + '\n';
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const auto& s = t.steps[i];
        json tags = json::array();
        for (Tag g : s.tags) tags.push_back(std::string(tag_name(g)));
        json calls = json::array();
        for (const auto& c : s.calls) calls.push_back({c.cached, c.fresh});
        json j = {{"step", i},
                  {"action", action_name(s.action)},
                  {"tokens", s.tokens},
                  {"positions", s.positions},
                  {"tags", tags},
                  {"src_read", s.src_read},
                  {"cache_before", s.cache_before},
                  {"cache_after", s.cache_after},
                  {"calls", calls},
                  {"recomputed_tokens", s.recomputed_tokens},
                  {"flops", s.flops}};
        if (s.action.kind == Action::Kind::Write) {
            j["emitted"] = s.emitted;
            j["emitted_position"] = s.emitted_position;
            j["emitted_logit"] = s.logits.empty() ? 0.0 : s.logits[static_cast<std::size_t>(s.emitted)];
        }
        out += j.dump() + '\n';
    }
    return out;
}

// Checkpoint layout (all integers little-endian):
//   8 bytes  magic "EXPOSTCK"
//   u32      format version (1)
//   2 bytes  endianness tag "LE"
//   u32      config length, then that many bytes of JSON model config
//   u32      tensor count
//   per tensor: u32 name length, name bytes, u32 rows, u32 cols,
//               u8 dtype (0 = f32, 1 = f64), rows*cols values row-major
inline constexpr char kCheckpointMagic[8] = {'E', 'X', 'P', 'O', 'S', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw CheckpointError("truncated checkpoint");
    return v;
}
} // namespace detail

template <typename T>
void save_checkpoint(const Transformer<T>& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path + " for writing");
    os.write(kCheckpointMagic, 8);
    detail::put_u32(os, kCheckpointVersion);
    os.write("LE", 2);
    const std::string cfg = to_json(model.config()).dump();
    detail::put_u32(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    std::uint32_t count = 0;
    model.params().for_each([&](const std::string&, const Matrix<T>&) { ++count; });
    detail::put_u32(os, count);
    model.params().for_each([&](const std::string& name, const Matrix<T>& m) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
        detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
        const std::uint8_t dtype = sizeof(T) == 4 ? 0 : 1;
        os.put(static_cast<char>(dtype));
        os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(T)));
    });
    if (!os) throw CheckpointError("write failed for " + path);
}

template <typename T>
Transformer<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint: " + path);
    if (detail::get_u32(is) != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
    char endian[2];
    if (!is.read(endian, 2) || endian[0] != 'L' || endian[1] != 'E') throw CheckpointError("unsupported endianness tag");
    std::string cfg(detail::get_u32(is), '\0');
    if (!is.read(cfg.data(), static_cast<std::streamsize>(cfg.size()))) throw CheckpointError("truncated config");
    const ModelConfig mc = model_config_from_json(json::parse(cfg));
    auto params = Parameters<T>::zeros_like(mc);
    std::uint32_t expected = 0;
    params.for_each([&](const std::string&, Matrix<T>&) { ++expected; });
    if (detail::get_u32(is) != expected) throw CheckpointError("tensor count does not match config");
    params.for_each([&](const std::string& name, Matrix<T>& m) {
        std::string got(detail::get_u32(is), '\0');
        is.read(got.data(), static_cast<std::streamsize>(got.size()));
        if (got != name) throw CheckpointError("expected tensor " + name + ", found " + got);
        const auto rows = detail::get_u32(is);
        const auto cols = detail::get_u32(is);
        if (rows != m.rows() || cols != m.cols()) throw CheckpointError("shape mismatch for " + name);
        const int dtype = is.get();
        if (dtype == 0) {
            Matrix<float> buf(rows, cols);
            is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
            m = buf.template cast<T>();
        } else if (dtype == 1) {
            Matrix<double> buf(rows, cols);
            is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 8));
            m = buf.template cast<T>();
        } else {
            throw CheckpointError("unknown dtype for " + name);
        }
        if (!is) throw CheckpointError("truncated tensor " + name);
    });
    return Transformer<T>(mc, std::move(params));
}

} // namespace expost
