#include <bit>
#include <cstring>
#include <fstream>

#include "sicl/common.hpp"
#include "sicl/model.hpp"

namespace sicl {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'I', 'C', 'L', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(std::istream& is, const std::string& what) {
    V v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw ParseError("truncated tensor file reading " + what);
    return v;
}

std::string get_string(std::istream& is, std::size_t n, const std::string& what) {
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw ParseError("truncated tensor file reading " + what);
    return s;
}

}  // namespace

const TensorRecord* TensorFile::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write " + tmp);
        os.write(kMagic, sizeof kMagic);
        put<std::uint32_t>(os, kVersion);
        const std::string header = file.header.dump();
        put<std::uint64_t>(os, header.size());
        os.write(header.data(), static_cast<std::streamsize>(header.size()));
        put<std::uint64_t>(os, file.tensors.size());
        for (const auto& t : file.tensors) {
            put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
            os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
            put<std::uint8_t>(os, t.single ? 0 : 1);
            put<std::uint64_t>(os, static_cast<std::uint64_t>(t.value.rows()));
            put<std::uint64_t>(os, static_cast<std::uint64_t>(t.value.cols()));
            if (t.single) {
                const Mat<float> f = t.value.cast<float>();
                os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
            } else {
                os.write(reinterpret_cast<const char*>(t.value.data()),
                         static_cast<std::streamsize>(t.value.size() * sizeof(double)));
            }
        }
        if (!os) throw Error("failed writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw ParseError("not a tensor file: " + path.string());
    const auto version = get<std::uint32_t>(is, "version");
    if (version != kVersion) throw ParseError("unsupported tensor file version " + std::to_string(version));
    TensorFile file;
    const auto hlen = get<std::uint64_t>(is, "header length");
    try {
        file.header = nlohmann::json::parse(get_string(is, hlen, "header"));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("bad tensor file header: ") + e.what());
    }
    const auto count = get<std::uint64_t>(is, "tensor count");
    for (std::uint64_t i = 0; i < count; ++i) {
        TensorRecord t;
        const auto nlen = get<std::uint32_t>(is, "name length");
        t.name = get_string(is, nlen, "name");
        const auto dtype = get<std::uint8_t>(is, "dtype");
        if (dtype > 1) throw ParseError("unknown dtype for " + t.name);
        t.single = dtype == 0;
        const auto rows = get<std::uint64_t>(is, "rows");
        const auto cols = get<std::uint64_t>(is, "cols");
        const auto n = rows * cols;
        if (t.single) {
            Mat<float> f(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
            if (n && !is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(n * sizeof(float))))
                throw ParseError("truncated payload for " + t.name);
            t.value = f.cast<double>();
        } else {
            t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
            if (n && !is.read(reinterpret_cast<char*>(t.value.data()), static_cast<std::streamsize>(n * sizeof(double))))
                throw ParseError("truncated payload for " + t.name);
        }
        file.tensors.push_back(std::move(t));
    }
    return file;
}

namespace {

bool is_adapter(const std::string& name) {
    const auto ends = [&](std::string_view suf) {
        return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    return ends(".lora_a") || ends(".lora_b");
}

}  // namespace

template <typename T>
TensorFile checkpoint_of(const Transformer<T>& model, bool adapters_only) {
    if (adapters_only && !model.lora()) throw ValidationError("model has no adapters to save");
    TensorFile file;
    file.header["kind"] = adapters_only ? "adapters" : "model";
    file.header["model"] = model.config();
    file.header["lora"] = model.lora() ? nlohmann::json(*model.lora()) : nlohmann::json(nullptr);
    nlohmann::json names = nlohmann::json::array(), trainable = nlohmann::json::array();
    const auto& ps = model.params();
    for (const auto& [name, m] : ps.tensors()) {
        if (adapters_only && !is_adapter(name)) continue;
        names.push_back(name);
        if (ps.trainable(name)) trainable.push_back(name);
        file.tensors.push_back(TensorRecord{name, m.template cast<double>(), std::is_same_v<T, float>});
    }
    file.header["params"] = names;
    file.header["trainable"] = trainable;
    return file;
}

template <typename T>
Transformer<T> model_from_checkpoint(const TensorFile& file) {
    if (file.header.value("kind", "") != "model") throw ValidationError("tensor file is not a model checkpoint");
    Transformer<T> model(file.header.at("model").get<ModelConfig>());
    const auto& lj = file.header.at("lora");
    if (!lj.is_null()) model.set_lora_config(lj.get<LoraConfig>());
    const auto trainable = file.header.at("trainable").get<std::set<std::string>>();
    auto& ps = model.params();
    for (const auto& name : ps.names()) ps.erase(name);
    for (const auto& name : file.header.at("params").get<std::vector<std::string>>()) {
        const auto* t = file.find(name);
        if (!t) throw ParseError("checkpoint lacks tensor " + name);
        ps.add(name, t->value.template cast<T>(), trainable.contains(name));
    }
    return model;
}

template <typename T>
void load_adapters(Transformer<T>& base, const TensorFile& file) {
    if (file.header.value("kind", "") != "adapters") throw ValidationError("tensor file is not an adapter checkpoint");
    if (base.lora()) throw ValidationError("model already has adapters");
    const auto cfg = file.header.at("model").get<ModelConfig>();
    const auto& bc = base.config();
    if (cfg.d_model != bc.d_model || cfg.n_layers != bc.n_layers || cfg.d_ff != bc.d_ff || cfg.vocab != bc.vocab)
        throw ValidationError("adapter shapes do not match the base model");
    base.attach_lora(file.header.at("lora").get<LoraConfig>());
    auto& ps = base.params();
    for (const auto& name : file.header.at("params").get<std::vector<std::string>>()) {
        const auto* t = file.find(name);
        if (!t) throw ParseError("checkpoint lacks tensor " + name);
        auto& dst = ps.at(name);
        if (dst.rows() != t->value.rows() || dst.cols() != t->value.cols())
            throw ValidationError("adapter shape mismatch for " + name);
        dst = t->value.template cast<T>();
    }
}

template TensorFile checkpoint_of(const Transformer<double>&, bool);
template TensorFile checkpoint_of(const Transformer<float>&, bool);
template Transformer<double> model_from_checkpoint(const TensorFile&);
template Transformer<float> model_from_checkpoint(const TensorFile&);
template void load_adapters(Transformer<double>&, const TensorFile&);
template void load_adapters(Transformer<float>&, const TensorFile&);

}  // namespace sicl
