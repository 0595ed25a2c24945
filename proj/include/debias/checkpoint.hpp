#pragma once

// JSON checkpoint container:
//
//   {
//     "format": "debias-checkpoint", "version": 1,
//     "architecture": {"layer_sizes": [...], "activation": "relu"},
//     "layers": [{"weight": {"shape": [out, in], "data": [...row-major...]},
//                 "bias":   {"shape": [out],     "data": [...]}}, ...],
//     "metadata": {...}
//   }
//
// Doubles are printed in shortest round-trip form, so load(save(p)) == p
// bit for bit.

#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "debias/error.hpp"
#include "debias/nn.hpp"

namespace debias {

inline constexpr const char* checkpoint_format = "debias-checkpoint";
inline constexpr int checkpoint_version = 1;

inline nlohmann::json architecture_to_json(const Architecture& arch) {
    return {{"layer_sizes", arch.layer_sizes}, {"activation", to_string(arch.activation)}};
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
    Architecture arch;
    arch.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
    arch.activation = parse_activation(j.value("activation", "relu"));
    arch.validate();
    return arch;
}

inline nlohmann::json checkpoint_to_json(const ParamVector& model, const nlohmann::json& metadata = nlohmann::json::object()) {
    nlohmann::json layers = nlohmann::json::array();
    for (const Layer& layer : model.layers()) {
        layers.push_back({
            {"weight",
             {{"shape", {layer.weight.rows(), layer.weight.cols()}},
              {"data", std::vector<double>(layer.weight.data(), layer.weight.data() + layer.weight.size())}}},
            {"bias",
             {{"shape", {layer.bias.size()}},
              {"data", std::vector<double>(layer.bias.data(), layer.bias.data() + layer.bias.size())}}},
        });
    }
    return {{"format", checkpoint_format},
            {"version", checkpoint_version},
            {"architecture", architecture_to_json(model.architecture())},
            {"layers", std::move(layers)},
            {"metadata", metadata}};
}

inline ParamVector checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != checkpoint_format) {
            throw ParseError("not a checkpoint file");
        }
        if (j.at("version").get<int>() != checkpoint_version) {
            throw ParseError("unsupported checkpoint version " + j.at("version").dump());
        }
        ParamVector model = ParamVector::zeros(architecture_from_json(j.at("architecture")));
        const auto& layers = j.at("layers");
        if (layers.size() != model.layers().size()) {
            throw ParseError("checkpoint layer count does not match its architecture");
        }
        for (std::size_t l = 0; l < layers.size(); ++l) {
            Layer& layer = model.layer(l);
            const auto wshape = layers[l].at("weight").at("shape").get<std::vector<Eigen::Index>>();
            const auto bshape = layers[l].at("bias").at("shape").get<std::vector<Eigen::Index>>();
            const auto wdata = layers[l].at("weight").at("data").get<std::vector<double>>();
            const auto bdata = layers[l].at("bias").at("data").get<std::vector<double>>();
            if (wshape != std::vector<Eigen::Index>{layer.weight.rows(), layer.weight.cols()} ||
                bshape != std::vector<Eigen::Index>{layer.bias.size()} ||
                wdata.size() != static_cast<std::size_t>(layer.weight.size()) ||
                bdata.size() != static_cast<std::size_t>(layer.bias.size())) {
                throw ParseError("checkpoint layer " + std::to_string(l) + " has inconsistent shapes");
            }
            std::copy(wdata.begin(), wdata.end(), layer.weight.data());
            std::copy(bdata.begin(), bdata.end(), layer.bias.data());
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed checkpoint: ") + e.what());
    }
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write '" + path.string() + "'");
    }
    out << j.dump(1) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingArtifactError(path.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("'" + path.string() + "': " + e.what());
    }
}

inline void save_checkpoint(const ParamVector& model, const std::filesystem::path& path,
                            const nlohmann::json& metadata = nlohmann::json::object()) {
    write_json(checkpoint_to_json(model, metadata), path);
}

inline ParamVector load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_json(read_json(path));
}

} // namespace debias
