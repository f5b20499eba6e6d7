// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "talora/errors.hpp"
#include "talora/training.hpp"

namespace talora {

using num::Tensor;

namespace {

constexpr char kMagic[4] = {'T', 'A', 'L', 'R'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
    std::uint8_t bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.insert(out.end(), bytes, bytes + sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        std::uint8_t bytes[sizeof(T)];
        std::memcpy(bytes, bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
        pos_ += sizeof(T);
        T value;
        std::memcpy(&value, bytes, sizeof(T));
        return value;
    }

    std::string string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t offset() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::string layer_name(const char* prefix, int layer) { return std::string(prefix) + ".l" + std::to_string(layer); }

std::string task_layer_name(const char* prefix, std::size_t task, int layer) {
    return std::string(prefix) + ".t" + std::to_string(task) + ".l" + std::to_string(layer);
}

void add(Checkpoint& ckpt, std::string name, const Tensor& t) { ckpt.tensors.push_back({std::move(name), t}); }

const nlohmann::json& section(const Checkpoint& ckpt, const char* key) {
    if (!ckpt.config.contains(key)) throw FormatError(std::string("checkpoint has no '") + key + "' section", 0);
    return ckpt.config.at(key);
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const NamedTensor& nt : tensors) {
        if (nt.name == name) return &nt.tensor;
    }
    return nullptr;
}

const Tensor& Checkpoint::at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw FormatError("checkpoint has no tensor '" + name + "'", 0);
    return *t;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint, DType dtype) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string config = checkpoint.config.dump();
    put<std::uint64_t>(out, config.size());
    out.insert(out.end(), config.begin(), config.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
    for (const NamedTensor& nt : checkpoint.tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(nt.name.size()));
        out.insert(out.end(), nt.name.begin(), nt.name.end());
        put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
        const num::Shape& shape = nt.tensor.shape();
        put<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
        for (std::size_t d : shape) put<std::uint64_t>(out, d);
        for (double x : nt.tensor.data()) {
            if (dtype == DType::F32) {
                put<float>(out, static_cast<float>(x));
            } else {
                put<double>(out, x);
            }
        }
    }
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader in(bytes);
    if (in.string(4, "magic") != std::string(kMagic, 4)) throw FormatError("bad checkpoint magic", 0);
    const std::uint32_t version = in.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) throw UnsupportedVersionError(version);
    Checkpoint ckpt;
    const std::uint64_t config_len = in.get<std::uint64_t>("config length");
    if (config_len > bytes.size()) throw FormatError("checkpoint truncated while reading config", in.offset());
    const std::size_t config_at = in.offset();
    const std::string config = in.string(static_cast<std::size_t>(config_len), "config");
    try {
        ckpt.config = nlohmann::json::parse(config);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("checkpoint config is not JSON: ") + e.what(), config_at + e.byte);
    }
    const std::uint32_t count = in.get<std::uint32_t>("tensor count");
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t name_len = in.get<std::uint32_t>("tensor name length");
        std::string name = in.string(name_len, "tensor name");
        const std::size_t dtype_at = in.offset();
        const std::uint8_t dtype = in.get<std::uint8_t>("dtype");
        if (dtype > static_cast<std::uint8_t>(DType::F64)) {
            throw FormatError("unknown dtype code " + std::to_string(dtype) + " for tensor '" + name + "'", dtype_at);
        }
        const std::size_t rank_at = in.offset();
        const std::uint8_t rank = in.get<std::uint8_t>("rank");
        if (rank == 0) throw FormatError("tensor '" + name + "' has rank 0", rank_at);
        num::Shape shape;
        std::size_t numel = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            const std::size_t dim_at = in.offset();
            const std::uint64_t d = in.get<std::uint64_t>("dims");
            if (d == 0 || d > bytes.size()) throw FormatError("implausible extent for tensor '" + name + "'", dim_at);
            shape.push_back(static_cast<std::size_t>(d));
            numel *= shape.back();
            if (numel > bytes.size()) throw FormatError("implausible size for tensor '" + name + "'", dim_at);
        }
        std::vector<double> data(numel);
        for (double& x : data) {
            x = dtype == static_cast<std::uint8_t>(DType::F32) ? static_cast<double>(in.get<float>("payload"))
                                                               : in.get<double>("payload");
        }
        ckpt.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    if (!in.done()) throw FormatError("trailing bytes after the tensor table", in.offset());
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint, DType dtype) {
    const std::vector<std::uint8_t> bytes = encode_checkpoint(checkpoint, dtype);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFileError("cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

Tensor round_to_f32(const Tensor& t) {
    std::vector<double> data(t.data().begin(), t.data().end());
    for (double& x : data) x = static_cast<double>(static_cast<float>(x));
    return Tensor(t.shape(), std::move(data));
}

void add_backbone(Checkpoint& ckpt, const BackboneWeights& weights) {
    ckpt.config["backbone"] = to_json(weights.config);
    for (auto& [name, t] : weights.named_tensors()) add(ckpt, name, t);
}

BackboneWeights backbone_from(const Checkpoint& ckpt) {
    const BackboneConfig config = backbone_config_from_json(section(ckpt, "backbone"));
    std::vector<std::pair<std::string, Tensor>> named;
    for (const NamedTensor& nt : ckpt.tensors) {
        if (nt.name.rfind("backbone.", 0) == 0) named.emplace_back(nt.name, nt.tensor.clone());
    }
    BackboneWeights w = BackboneWeights::from_named(config, named);
    w.freeze();
    return w;
}

void add_base_prompts(Checkpoint& ckpt, const BasePromptResult& base) {
    const PromptBank& b = base.bank;
    ckpt.config["prompt_bank"] = {{"tasks", b.tasks},
                                  {"first_layer", b.first_layer},
                                  {"layers", b.layer_count()}};
    for (std::size_t i = 0; i < b.task_count(); ++i) {
        for (std::size_t l = 0; l < b.layer_count(); ++l) {
            const int layer = b.first_layer + static_cast<int>(l);
            add(ckpt, task_layer_name("theta", i, layer), b.theta[i][l]);
            add(ckpt, task_layer_name("pt_gate", i, layer), base.gates[i][l]);
        }
    }
    for (std::size_t l = 0; l < b.layer_count(); ++l) {
        add(ckpt, layer_name("theta0", b.first_layer + static_cast<int>(l)), b.theta0[l]);
    }
}

BasePromptResult base_prompts_from(const Checkpoint& ckpt) {
    const nlohmann::json& s = section(ckpt, "prompt_bank");
    BasePromptResult out;
    PromptBank& b = out.bank;
    b.tasks = s.at("tasks").get<std::vector<std::string>>();
    b.first_layer = s.at("first_layer").get<int>();
    const std::size_t layers = s.at("layers").get<std::size_t>();
    for (std::size_t i = 0; i < b.tasks.size(); ++i) {
        std::vector<Tensor> theta, gates;
        for (std::size_t l = 0; l < layers; ++l) {
            const int layer = b.first_layer + static_cast<int>(l);
            theta.push_back(ckpt.at(task_layer_name("theta", i, layer)).clone());
            gates.push_back(ckpt.at(task_layer_name("pt_gate", i, layer)).clone());
        }
        b.theta.push_back(std::move(theta));
        out.gates.push_back(std::move(gates));
    }
    for (std::size_t l = 0; l < layers; ++l) {
        b.theta0.push_back(ckpt.at(layer_name("theta0", b.first_layer + static_cast<int>(l))).clone());
    }
    return out;
}

void add_factors(Checkpoint& ckpt, const PromptBank& bank, const LoraFactors& f) {
    ckpt.config["lora"] = {{"tasks", f.tasks},
                           {"first_layer", f.first_layer},
                           {"layers", f.layer_count()},
                           {"rank", f.rank},
                           {"scale", f.scale}};
    for (std::size_t l = 0; l < f.layer_count(); ++l) {
        const int layer = f.first_layer + static_cast<int>(l);
        add(ckpt, layer_name("theta0", layer), bank.theta0[l]);
        add(ckpt, layer_name("B", layer), f.slow[l]);
        add(ckpt, layer_name("gate", layer), f.gates[l]);
    }
    for (std::size_t i = 0; i < f.task_count(); ++i) {
        for (std::size_t l = 0; l < f.layer_count(); ++l) {
            const int layer = f.first_layer + static_cast<int>(l);
            add(ckpt, task_layer_name("u", i, layer), f.u[i][l]);
            add(ckpt, task_layer_name("v", i, layer), f.v[i][l]);
        }
    }
}

std::pair<std::vector<Tensor>, LoraFactors> factors_from(const Checkpoint& ckpt) {
    const nlohmann::json& s = section(ckpt, "lora");
    LoraFactors f;
    f.tasks = s.at("tasks").get<std::vector<std::string>>();
    f.first_layer = s.at("first_layer").get<int>();
    f.rank = s.at("rank").get<int>();
    f.scale = s.at("scale").get<double>();
    const std::size_t layers = s.at("layers").get<std::size_t>();
    std::vector<Tensor> theta0;
    for (std::size_t l = 0; l < layers; ++l) {
        const int layer = f.first_layer + static_cast<int>(l);
        theta0.push_back(ckpt.at(layer_name("theta0", layer)).clone());
        f.slow.push_back(ckpt.at(layer_name("B", layer)).clone());
        f.gates.push_back(ckpt.at(layer_name("gate", layer)).clone());
    }
    for (std::size_t i = 0; i < f.tasks.size(); ++i) {
        std::vector<Tensor> us, vs;
        for (std::size_t l = 0; l < layers; ++l) {
            const int layer = f.first_layer + static_cast<int>(l);
            us.push_back(ckpt.at(task_layer_name("u", i, layer)).clone());
            vs.push_back(ckpt.at(task_layer_name("v", i, layer)).clone());
        }
        f.u.push_back(std::move(us));
        f.v.push_back(std::move(vs));
    }
    return {std::move(theta0), std::move(f)};
}

void add_task_factors(Checkpoint& ckpt, const TaskFactors& task) {
    ckpt.config["task_factors"] = {{"layers", task.u.size()}};
    for (std::size_t l = 0; l < task.u.size(); ++l) {
        const std::string k = std::to_string(l);
        add(ckpt, "target.u.k" + k, task.u[l]);
        add(ckpt, "target.v.k" + k, task.v[l]);
        add(ckpt, "target.gate.k" + k, task.gates[l]);
    }
}

TaskFactors task_factors_from(const Checkpoint& ckpt) {
    const std::size_t layers = section(ckpt, "task_factors").at("layers").get<std::size_t>();
    TaskFactors f;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::string k = std::to_string(l);
        f.u.push_back(ckpt.at("target.u.k" + k).clone());
        f.v.push_back(ckpt.at("target.v.k" + k).clone());
        f.gates.push_back(ckpt.at("target.gate.k" + k).clone());
    }
    return f;
}

}  // namespace talora
