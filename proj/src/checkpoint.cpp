#include "fimode/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "fimode/config.hpp"
#include "fimode/errors.hpp"

namespace fimode {

namespace {

constexpr std::array<char, 8> kMagic{'F', 'I', 'M', 'O', 'D', 'E', 'C', 'K'};

template <class UInt>
void put_le(std::ostream& out, UInt v) {
    std::array<char, sizeof(UInt)> bytes;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
        bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    }
    out.write(bytes.data(), bytes.size());
}

template <class UInt>
UInt get_le(std::istream& in) {
    std::array<unsigned char, sizeof(UInt)> bytes;
    if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
        throw ParseError(0, "checkpoint truncated");
    }
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
        v |= static_cast<UInt>(bytes[i]) << (8 * i);
    }
    return v;
}

struct NamedTensor {
    std::string name;
    const Eigen::MatrixXd* value;
};

std::vector<NamedTensor> tensors_of(const TrainingState& s) {
    const auto& p = s.model.parameters();
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < p.size(); ++i) {
        out.push_back({"param/" + p.name(static_cast<nn::ParamId>(i)), &p.value(static_cast<nn::ParamId>(i))});
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        out.push_back({"adam_m/" + p.name(static_cast<nn::ParamId>(i)), &s.optimizer.first_moment.at(i)});
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        out.push_back({"adam_v/" + p.name(static_cast<nn::ParamId>(i)), &s.optimizer.second_moment.at(i)});
    }
    return out;
}

Eigen::MatrixXd* target_of(TrainingState& s, const std::string& name) {
    auto& p = s.model.parameters();
    const auto slash = name.find('/');
    if (slash == std::string::npos) {
        return nullptr;
    }
    const std::string kind = name.substr(0, slash);
    const nn::ParamId id = p.find(name.substr(slash + 1));
    if (id < 0) {
        return nullptr;
    }
    if (kind == "param") {
        return &p.value(id);
    }
    if (kind == "adam_m") {
        return &s.optimizer.first_moment[static_cast<std::size_t>(id)];
    }
    if (kind == "adam_v") {
        return &s.optimizer.second_moment[static_cast<std::size_t>(id)];
    }
    return nullptr;
}

} // namespace

void save_checkpoint(const TrainingState& state, const std::filesystem::path& path) {
    const auto tensors = tensors_of(state);
    Json header = {{"format_version", kCheckpointVersion},
                   {"model", to_json(state.model.config())},
                   {"train", to_json(state.config)},
                   {"step", state.step},
                   {"lr_scale", state.lr_scale},
                   {"stats",
                    {{"last", state.stats.last},
                     {"ema", state.stats.ema},
                     {"initial", state.stats.initial},
                     {"count", state.stats.count}}}};
    Json list = Json::array();
    for (const auto& t : tensors) {
        list.push_back({{"name", t.name}, {"shape", {t.value->rows(), t.value->cols()}}});
    }
    header["tensors"] = std::move(list);
    const std::string text = header.dump();

    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        }
        out.write(kMagic.data(), kMagic.size());
        put_le<std::uint32_t>(out, kCheckpointVersion);
        put_le<std::uint64_t>(out, text.size());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& t : tensors) {
            for (Eigen::Index r = 0; r < t.value->rows(); ++r) {
                for (Eigen::Index c = 0; c < t.value->cols(); ++c) {
                    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>((*t.value)(r, c)));
                }
            }
        }
        out.flush();
        if (!out) {
            throw std::runtime_error("write to " + tmp.string() + " failed");
        }
    }
    std::filesystem::rename(tmp, path);
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
        throw ParseError(0, path.string() + " is not a checkpoint");
    }
    const auto version = get_le<std::uint32_t>(in);
    if (version != kCheckpointVersion) {
        throw ParseError(0, "unsupported checkpoint format version " + std::to_string(version));
    }
    const auto length = get_le<std::uint64_t>(in);
    if (length > (std::uint64_t{1} << 30)) {
        throw ParseError(0, "checkpoint header too large");
    }
    std::string text(length, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
        throw ParseError(0, "checkpoint truncated");
    }

    Json header;
    try {
        header = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ParseError(0, std::string("checkpoint header: ") + e.what());
    }
    try {
        const ModelConfig model_cfg = model_from_json(header.at("model"));
        const TrainConfig train_cfg = train_from_json(header.at("train"));
        TrainingState state(model_cfg, train_cfg);
        state.step = header.at("step").get<long>();
        state.lr_scale = header.at("lr_scale").get<double>();
        const Json& st = header.at("stats");
        state.stats.last = st.at("last").get<double>();
        state.stats.ema = st.at("ema").get<double>();
        state.stats.initial = st.at("initial").get<double>();
        state.stats.count = st.at("count").get<long>();

        const Json& list = header.at("tensors");
        const std::size_t expected = 3 * state.model.parameters().size();
        if (list.size() != expected) {
            throw ParseError(0, "checkpoint holds " + std::to_string(list.size()) + " tensors, model config needs " +
                                    std::to_string(expected));
        }
        for (const auto& t : list) {
            const auto name = t.at("name").get<std::string>();
            const auto shape = t.at("shape").get<std::vector<long>>();
            Eigen::MatrixXd* target = target_of(state, name);
            if (!target) {
                throw ParseError(0, "unexpected tensor " + name);
            }
            if (shape.size() != 2 || shape[0] != target->rows() || shape[1] != target->cols()) {
                throw ParseError(0, "tensor " + name + " does not match the model configuration");
            }
            for (Eigen::Index r = 0; r < target->rows(); ++r) {
                for (Eigen::Index c = 0; c < target->cols(); ++c) {
                    (*target)(r, c) = std::bit_cast<double>(get_le<std::uint64_t>(in));
                }
            }
        }
        if (in.peek() != std::char_traits<char>::eof()) {
            throw ParseError(0, "trailing bytes after checkpoint payload");
        }
        return state;
    } catch (const Json::exception& e) {
        throw ParseError(0, std::string("checkpoint header: ") + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(0, std::string("checkpoint header: ") + e.what());
    }
}

TrainingState load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
    TrainingState state = load_checkpoint(path);
    if (!(state.model.config() == expected)) {
        throw std::invalid_argument("checkpoint " + path.string() + " was written for a different model configuration");
    }
    return state;
}

FimModel load_model(const std::filesystem::path& path) {
    return load_checkpoint(path).model;
}

} // namespace fimode
