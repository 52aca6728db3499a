#include "zsad/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace zsad::checkpoint {

namespace {

constexpr char kMagic[8] = {'Z', 'S', 'A', 'D', 'C', 'K', 'P', 'T'};

// CRC-32 (IEEE 802.3) over the payload; catches truncation and bit rot
uint32_t crc32(const unsigned char* data, size_t n, uint32_t crc = 0) {
    static uint32_t table[256];
    static bool initialized = false;
    if (!initialized) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        initialized = true;
    }
    crc = ~crc;
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return ~crc;
}

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}
void put_string(std::string& buf, const std::string& s) {
    put_u64(buf, s.size());
    buf.append(s);
}
void put_mat(std::string& buf, const Mat& m) {
    put_u64(buf, uint64_t(m.rows()));
    put_u64(buf, uint64_t(m.cols()));
    buf.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * size_t(m.size()));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated payload");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t((unsigned char)buf[pos + size_t(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t((unsigned char)buf[pos + size_t(i)]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str() {
        uint64_t n = u64();
        need(size_t(n));
        std::string s = buf.substr(pos, size_t(n));
        pos += size_t(n);
        return s;
    }
    Mat mat() {
        uint64_t r = u64(), c = u64();
        if (r > (1u << 24) || c > (1u << 24))
            throw std::runtime_error("checkpoint: implausible tensor shape");
        need(sizeof(double) * size_t(r) * size_t(c));
        Mat m;
        m.resize(Eigen::Index(r), Eigen::Index(c));
        std::memcpy(m.data(), buf.data() + pos, sizeof(double) * size_t(m.size()));
        pos += sizeof(double) * size_t(m.size());
        return m;
    }
};

}  // namespace

void write_archive(const std::string& path, const Archive& archive) {
    std::string payload;
    put_u64(payload, archive.meta.size());
    for (const auto& [k, v] : archive.meta) {
        put_string(payload, k);
        put_string(payload, v);
    }
    put_u64(payload, archive.vocab.size());
    for (const auto& w : archive.vocab) put_string(payload, w);
    put_u64(payload, archive.tensors.size());
    for (const auto& [name, m] : archive.tensors) {
        put_string(payload, name);
        put_mat(payload, m);
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(kMagic, sizeof(kMagic));
    std::string head;
    put_u32(head, archive.version);
    put_u64(head, payload.size());
    put_u32(head, crc32(reinterpret_cast<const unsigned char*>(payload.data()),
                        payload.size()));
    f.write(head.data(), std::streamsize(head.size()));
    f.write(payload.data(), std::streamsize(payload.size()));
    if (!f) throw std::runtime_error("short write on checkpoint: " + path);
}

Archive read_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    char head[16];
    f.read(head, sizeof(head));
    if (!f) throw std::runtime_error("checkpoint: truncated header: " + path);
    std::string hb(head, sizeof(head));
    Reader hr{hb};
    uint32_t version = hr.u32();
    if (version != kFormatVersion)
        throw std::runtime_error("checkpoint: unsupported format version " +
                                 std::to_string(version));
    uint64_t payload_size = hr.u64();
    uint32_t expect_crc = hr.u32();

    std::string payload(size_t(payload_size), '\0');
    f.read(payload.data(), std::streamsize(payload.size()));
    if (!f || size_t(f.gcount()) != payload.size())
        throw std::runtime_error("checkpoint: truncated payload: " + path);
    if (crc32(reinterpret_cast<const unsigned char*>(payload.data()), payload.size()) !=
        expect_crc)
        throw std::runtime_error("checkpoint: payload checksum mismatch: " + path);

    Archive a;
    a.version = version;
    Reader r{payload};
    uint64_t n_meta = r.u64();
    for (uint64_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        a.meta[k] = r.str();
    }
    uint64_t n_vocab = r.u64();
    for (uint64_t i = 0; i < n_vocab; ++i) a.vocab.push_back(r.str());
    uint64_t n_tensors = r.u64();
    for (uint64_t i = 0; i < n_tensors; ++i) {
        std::string name = r.str();
        a.tensors[name] = r.mat();
    }
    return a;
}

namespace {

std::string ints_to_csv(const std::vector<int>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::vector<int> csv_to_ints(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

int meta_int(const Archive& a, const std::string& key) {
    auto it = a.meta.find(key);
    if (it == a.meta.end()) throw std::runtime_error("checkpoint: missing meta " + key);
    return std::stoi(it->second);
}

double meta_double(const Archive& a, const std::string& key) {
    auto it = a.meta.find(key);
    if (it == a.meta.end()) throw std::runtime_error("checkpoint: missing meta " + key);
    return std::stod(it->second);
}

std::string meta_str(const Archive& a, const std::string& key) {
    auto it = a.meta.find(key);
    if (it == a.meta.end()) throw std::runtime_error("checkpoint: missing meta " + key);
    return it->second;
}

std::string dtos(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void put_adapter_meta(Archive& a, const std::string& key, const AdapterStack& stack) {
    a.meta[key + ".count"] = std::to_string(stack.cfg.count);
    a.meta[key + ".lambda"] = dtos(stack.cfg.lambda);
    a.meta[key + ".act"] = to_string(stack.cfg.act);
    a.meta[key + ".norm"] = to_string(stack.cfg.norm);
}

AdapterConfig read_adapter_meta(const Archive& a, const std::string& key) {
    AdapterConfig cfg;
    cfg.count = meta_int(a, key + ".count");
    cfg.lambda = meta_double(a, key + ".lambda");
    cfg.act = adapter_activation_from_string(meta_str(a, key + ".act"));
    cfg.norm = adapter_norm_from_string(meta_str(a, key + ".norm"));
    return cfg;
}

}  // namespace

void save_model(const std::string& path, const DualEncoder& model, Stage stage) {
    Archive a;
    a.meta["stage"] = to_string(stage);
    const auto& vs = model.vision_spec();
    a.meta["vision.image_size"] = std::to_string(vs.image_size);
    a.meta["vision.patch_size"] = std::to_string(vs.patch_size);
    a.meta["vision.depth"] = std::to_string(vs.depth);
    a.meta["vision.width"] = std::to_string(vs.width);
    a.meta["vision.heads"] = std::to_string(vs.heads);
    a.meta["vision.embed_dim"] = std::to_string(vs.embed_dim);
    a.meta["vision.mlp_ratio"] = std::to_string(vs.mlp_ratio);
    a.meta["vision.tap_layers"] = ints_to_csv(vs.tap_layers);
    const auto& ts = model.text_spec();
    a.meta["text.vocab_size"] = std::to_string(ts.vocab_size);
    a.meta["text.context_length"] = std::to_string(ts.context_length);
    a.meta["text.depth"] = std::to_string(ts.depth);
    a.meta["text.width"] = std::to_string(ts.width);
    a.meta["text.heads"] = std::to_string(ts.heads);
    a.meta["text.embed_dim"] = std::to_string(ts.embed_dim);
    a.meta["text.mlp_ratio"] = std::to_string(ts.mlp_ratio);
    a.meta["has_projectors"] = model.has_granularity_projectors() ? "1" : "0";
    if (model.text_adapted()) put_adapter_meta(a, "adapter.text", model.text_adapters());
    if (model.vision_adapted())
        put_adapter_meta(a, "adapter.vision", model.vision_adapters());
    a.vocab = model.tokenizer().words();
    model.store().for_each([&](const Param& p) { a.tensors[p.name] = p.value; });
    write_archive(path, a);
}

std::unique_ptr<DualEncoder> load_model(const std::string& path, Stage* stage_out) {
    Archive a = read_archive(path);
    Stage stage = stage_from_string(meta_str(a, "stage"));
    if (stage_out != nullptr) *stage_out = stage;

    VisionEncoderSpec vs;
    vs.image_size = meta_int(a, "vision.image_size");
    vs.patch_size = meta_int(a, "vision.patch_size");
    vs.depth = meta_int(a, "vision.depth");
    vs.width = meta_int(a, "vision.width");
    vs.heads = meta_int(a, "vision.heads");
    vs.embed_dim = meta_int(a, "vision.embed_dim");
    vs.mlp_ratio = meta_int(a, "vision.mlp_ratio");
    vs.tap_layers = csv_to_ints(meta_str(a, "vision.tap_layers"));
    TextEncoderSpec ts;
    ts.vocab_size = meta_int(a, "text.vocab_size");
    ts.context_length = meta_int(a, "text.context_length");
    ts.depth = meta_int(a, "text.depth");
    ts.width = meta_int(a, "text.width");
    ts.heads = meta_int(a, "text.heads");
    ts.embed_dim = meta_int(a, "text.embed_dim");
    ts.mlp_ratio = meta_int(a, "text.mlp_ratio");

    auto model = std::make_unique<DualEncoder>(vs, ts, Tokenizer(a.vocab), 0);
    if (a.meta.count("adapter.text.count"))
        model->attach_text_adapters(read_adapter_meta(a, "adapter.text"), 0);
    if (a.meta.count("adapter.vision.count"))
        model->attach_vision_adapters(read_adapter_meta(a, "adapter.vision"), 0);
    if (meta_str(a, "has_projectors") == "1") model->create_granularity_projectors(0);
    for (const auto& [name, m] : a.tensors) {
        if (name.rfind("anchors.", 0) == 0 && !model->store().contains(name)) {
            // anchor tensors are created lazily from the archive
            std::string cls = name.substr(8, name.size() - 10);
            if (!model->store().contains("anchors." + cls + ".n"))
                model->store_anchors(cls, Eigen::RowVectorXd::Zero(vs.embed_dim),
                                     Eigen::RowVectorXd::Zero(vs.embed_dim));
        }
    }

    // every archived tensor must land on an existing parameter, and vice versa
    auto names = model->store().names();
    if (names.size() != a.tensors.size())
        throw std::runtime_error("checkpoint: parameter set mismatch (" +
                                 std::to_string(names.size()) + " vs " +
                                 std::to_string(a.tensors.size()) + ")");
    for (const auto& name : names) {
        auto it = a.tensors.find(name);
        if (it == a.tensors.end())
            throw std::runtime_error("checkpoint: missing tensor " + name);
        Param& p = model->store().at(name);
        if (p.value.rows() != it->second.rows() || p.value.cols() != it->second.cols())
            throw std::runtime_error("checkpoint: tensor shape mismatch for " + name);
        p.value = it->second;
    }
    return model;
}

Stage peek_stage(const std::string& path) {
    Archive a = read_archive(path);
    return stage_from_string(meta_str(a, "stage"));
}

void save_adapter_export(const std::string& path, const DualEncoder& model, Stage stage) {
    if (!model.text_adapted() && !model.vision_adapted())
        throw std::logic_error("adapter export: no adapters attached");
    Archive a;
    a.meta["stage"] = to_string(stage);
    a.meta["kind"] = "adapter_export";
    if (model.text_adapted()) put_adapter_meta(a, "adapter.text", model.text_adapters());
    if (model.vision_adapted())
        put_adapter_meta(a, "adapter.vision", model.vision_adapters());
    model.store().for_each([&](const Param& p) {
        if (p.name.rfind("adapter.", 0) == 0 || p.name == "text.proj" ||
            p.name.rfind("head.proj.", 0) == 0 || p.name.rfind("anchors.", 0) == 0)
            a.tensors[p.name] = p.value;
    });
    write_archive(path, a);
}

void apply_adapter_export(const std::string& path, DualEncoder& model) {
    Archive a = read_archive(path);
    if (a.meta.count("kind") == 0 || a.meta.at("kind") != "adapter_export")
        throw std::runtime_error("not an adapter export: " + path);
    if (a.meta.count("adapter.text.count") && !model.text_adapted())
        model.attach_text_adapters(read_adapter_meta(a, "adapter.text"), 0);
    if (a.meta.count("adapter.vision.count") && !model.vision_adapted())
        model.attach_vision_adapters(read_adapter_meta(a, "adapter.vision"), 0);
    for (const auto& [name, m] : a.tensors) {
        if (name.rfind("head.proj.", 0) == 0 && !model.has_granularity_projectors())
            model.create_granularity_projectors(0);
        if (name.rfind("anchors.", 0) == 0 && !model.store().contains(name)) {
            std::string cls = name.substr(8, name.size() - 10);
            if (!model.store().contains("anchors." + cls + ".n"))
                model.store_anchors(cls,
                                    Eigen::RowVectorXd::Zero(m.cols()),
                                    Eigen::RowVectorXd::Zero(m.cols()));
        }
        Param& p = model.store().at(name);
        if (p.value.rows() != m.rows() || p.value.cols() != m.cols())
            throw std::runtime_error("adapter export: tensor shape mismatch for " + name);
        p.value = m;
    }
}

}  // namespace zsad::checkpoint
