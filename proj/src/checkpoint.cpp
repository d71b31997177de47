#include "detok/checkpoint.hpp"

#include <torch/serialize.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace detok {

namespace {

constexpr char kMagic[8] = {'D', 'E', 'T', 'O', 'K', 'C', 'P', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

int8_t dtype_code(torch::ScalarType type) {
    switch (type) {
        case torch::kFloat32: return 0;
        case torch::kFloat64: return 1;
        case torch::kInt64: return 2;
        case torch::kInt32: return 3;
        case torch::kUInt8: return 4;
        case torch::kBool: return 5;
        default: TORCH_CHECK(false, "checkpoint: unsupported dtype ", type);
    }
}

torch::ScalarType dtype_from_code(int8_t code) {
    switch (code) {
        case 0: return torch::kFloat32;
        case 1: return torch::kFloat64;
        case 2: return torch::kInt64;
        case 3: return torch::kInt32;
        case 4: return torch::kUInt8;
        case 5: return torch::kBool;
        default: TORCH_CHECK(false, "checkpoint: unknown dtype code ", code);
    }
}

template <typename T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    TORCH_CHECK(in.good(), "checkpoint: truncated file");
    return value;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    TORCH_CHECK(out.is_open(), "checkpoint: cannot open for writing: ", path);
    out.write(kMagic, sizeof(kMagic));
    const std::string meta = ckpt.meta.dump();
    write_pod<uint64_t>(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    write_pod<uint64_t>(out, ckpt.tensors.size());
    for (const auto& [name, tensor] : ckpt.tensors) {
        auto t = tensor.detach().cpu().contiguous();
        write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<int8_t>(out, dtype_code(t.scalar_type()));
        write_pod<uint8_t>(out, static_cast<uint8_t>(t.dim()));
        for (int64_t d = 0; d < t.dim(); ++d) {
            write_pod<int64_t>(out, t.size(d));
        }
        const auto nbytes = static_cast<uint64_t>(t.numel() * t.element_size());
        write_pod<uint64_t>(out, nbytes);
        out.write(static_cast<const char*>(t.const_data_ptr()),
                  static_cast<std::streamsize>(nbytes));
    }
    TORCH_CHECK(out.good(), "checkpoint: write failed: ", path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    TORCH_CHECK(in.is_open(), "checkpoint: cannot open: ", path);
    char magic[8];
    in.read(magic, sizeof(magic));
    TORCH_CHECK(in.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
                "checkpoint: bad magic in ", path);

    Checkpoint ckpt;
    const auto meta_len = read_pod<uint64_t>(in);
    std::string meta(meta_len, '\0');
    in.read(meta.data(), static_cast<std::streamsize>(meta_len));
    TORCH_CHECK(in.good(), "checkpoint: truncated metadata in ", path);
    ckpt.meta = nlohmann::json::parse(meta);

    const auto n_tensors = read_pod<uint64_t>(in);
    for (uint64_t i = 0; i < n_tensors; ++i) {
        const auto name_len = read_pod<uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        auto dtype = dtype_from_code(read_pod<int8_t>(in));
        const auto ndim = read_pod<uint8_t>(in);
        std::vector<int64_t> sizes(ndim);
        for (auto& s : sizes) {
            s = read_pod<int64_t>(in);
        }
        const auto nbytes = read_pod<uint64_t>(in);
        auto tensor = torch::empty(sizes, torch::TensorOptions().dtype(dtype));
        TORCH_CHECK(static_cast<uint64_t>(tensor.numel() * tensor.element_size()) == nbytes,
                    "checkpoint: byte count mismatch for tensor ", name);
        in.read(static_cast<char*>(tensor.data_ptr()), static_cast<std::streamsize>(nbytes));
        TORCH_CHECK(in.good(), "checkpoint: truncated tensor ", name, " in ", path);
        ckpt.tensors.emplace(std::move(name), std::move(tensor));
    }
    return ckpt;
}

void store_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module) {
    for (const auto& p : module.named_parameters(/*recurse=*/true)) {
        ckpt.tensors[prefix + "." + p.key()] = p.value().detach().cpu().clone();
    }
    for (const auto& b : module.named_buffers(/*recurse=*/true)) {
        ckpt.tensors[prefix + "." + b.key()] = b.value().detach().cpu().clone();
    }
}

void load_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module) {
    torch::NoGradGuard no_grad;
    size_t used = 0;
    auto copy_into = [&](const std::string& key, torch::Tensor dst) {
        auto it = ckpt.tensors.find(prefix + "." + key);
        TORCH_CHECK(it != ckpt.tensors.end(), "checkpoint: missing tensor ", prefix, ".", key);
        TORCH_CHECK(it->second.sizes() == dst.sizes(), "checkpoint: shape mismatch for ",
                    prefix, ".", key, ": stored ", it->second.sizes(), " vs model ", dst.sizes());
        dst.copy_(it->second.to(dst.dtype()));
        ++used;
    };
    for (const auto& p : module.named_parameters(/*recurse=*/true)) {
        copy_into(p.key(), p.value());
    }
    for (const auto& b : module.named_buffers(/*recurse=*/true)) {
        copy_into(b.key(), b.value());
    }
    size_t present = 0;
    for (const auto& [name, _] : ckpt.tensors) {
        if (name.rfind(prefix + ".", 0) == 0) ++present;
    }
    TORCH_CHECK(present == used, "checkpoint: ", present - used,
                " unused tensors under prefix ", prefix);
}

torch::Tensor serialize_optimizer(const torch::optim::Optimizer& optimizer) {
    torch::serialize::OutputArchive archive;
    optimizer.save(archive);
    std::vector<char> buffer;
    archive.save_to([&buffer](const void* data, size_t size) -> size_t {
        const char* p = static_cast<const char*>(data);
        buffer.insert(buffer.end(), p, p + size);
        return size;
    });
    auto bytes = torch::empty({static_cast<int64_t>(buffer.size())}, torch::kUInt8);
    std::memcpy(bytes.data_ptr(), buffer.data(), buffer.size());
    return bytes;
}

void deserialize_optimizer(const torch::Tensor& bytes, torch::optim::Optimizer& optimizer) {
    auto b = bytes.contiguous();
    TORCH_CHECK(b.scalar_type() == torch::kUInt8, "deserialize_optimizer: expected byte tensor");
    torch::serialize::InputArchive archive;
    archive.load_from(static_cast<const char*>(b.const_data_ptr()),
                      static_cast<size_t>(b.numel()));
    optimizer.load(archive);
}

torch::Tensor generator_state(const torch::Generator& gen) {
    return gen.get_state();
}

void set_generator_state(torch::Generator& gen, const torch::Tensor& state) {
    gen.set_state(state);
}

}  // namespace detok
