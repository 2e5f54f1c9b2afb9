#include "mvrag/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

using json = nlohmann::json;

namespace mvrag {

namespace {

constexpr char kMagic[8] = {'M', 'V', 'R', 'A', 'G', 'C', 'K', '1'};

json config_to_json(const DenoiserConfig& c) {
    return json{{"image_size", c.image_size},
                {"base_channels", c.base_channels},
                {"channel_multipliers", c.channel_multipliers},
                {"attention_resolutions", c.attention_resolutions},
                {"heads", c.heads},
                {"d_cond", c.d_cond},
                {"n_views", c.n_views},
                {"patch_size", c.patch_size},
                {"time_embed_dim", c.time_embed_dim},
                {"norm_groups", c.norm_groups}};
}

DenoiserConfig config_from_json(const json& j) {
    DenoiserConfig c;
    c.image_size = j.at("image_size");
    c.base_channels = j.at("base_channels");
    c.channel_multipliers = j.at("channel_multipliers");
    c.attention_resolutions = j.at("attention_resolutions");
    c.heads = j.at("heads");
    c.d_cond = j.at("d_cond");
    c.n_views = j.at("n_views");
    c.patch_size = j.at("patch_size");
    c.time_embed_dim = j.at("time_embed_dim");
    c.norm_groups = j.at("norm_groups");
    return c;
}

}  // namespace

void save_checkpoint(MvRagModel& model, const std::string& path) {
    json manifest = json::array();
    std::vector<const Parameter*> params;
    uint64_t offset = 0;
    ParamVisitor v = [&](Parameter& p) {
        manifest.push_back({{"name", p.name},
                            {"shape", p.tensor.shape()},
                            {"frozen", p.frozen},
                            {"offset", offset},
                            {"checksum", p.checksum()}});
        params.push_back(&p);
        offset += p.tensor.numel() * sizeof(double);
    };
    model.visit(v);
    json header = {{"format_version", kCheckpointVersion},
                   {"config", config_to_json(model.config)},
                   {"params", manifest}};
    const std::string head_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
    out.write(kMagic, 8);
    const uint64_t hlen = head_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(head_str.data(), static_cast<std::streamsize>(head_str.size()));
    for (const Parameter* p : params) {
        const auto& d = p->tensor.data();
        out.write(reinterpret_cast<const char*>(d.data()),
                  static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

namespace {

struct LoadedFile {
    json header;
    std::string payload;
};

LoadedFile read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);
    std::string head_str(hlen, '\0');
    in.read(head_str.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);
    LoadedFile f;
    f.header = json::parse(head_str, nullptr, false);
    if (f.header.is_discarded())
        throw std::runtime_error("load_checkpoint: corrupt header in " + path);
    const int version = f.header.at("format_version");
    if (version != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: format_version " + std::to_string(version) +
                                 " unsupported (want " + std::to_string(kCheckpointVersion) + ")");
    f.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return f;
}

}  // namespace

void load_checkpoint(MvRagModel& model, const std::string& path) {
    const LoadedFile f = read_file(path);
    const DenoiserConfig file_cfg = config_from_json(f.header.at("config"));
    if (!(file_cfg == model.config))
        throw std::runtime_error("load_checkpoint: config mismatch in " + path);

    struct Entry {
        std::vector<int> shape;
        bool frozen;
        uint64_t offset;
        uint64_t checksum;
    };
    std::map<std::string, Entry> entries;
    for (const auto& e : f.header.at("params")) {
        Entry ent{e.at("shape").get<std::vector<int>>(), e.at("frozen").get<bool>(),
                  e.at("offset").get<uint64_t>(), e.at("checksum").get<uint64_t>()};
        entries[e.at("name").get<std::string>()] = ent;
    }

    std::vector<std::string> missing;
    ParamVisitor v = [&](Parameter& p) {
        auto it = entries.find(p.name);
        if (it == entries.end()) {
            missing.push_back(p.name);
            return;
        }
        const Entry& ent = it->second;
        if (ent.shape != p.tensor.shape())
            throw std::runtime_error("load_checkpoint: shape mismatch for " + p.name);
        const size_t bytes = p.tensor.numel() * sizeof(double);
        if (ent.offset + bytes > f.payload.size())
            throw std::runtime_error("load_checkpoint: manifest offset past end of payload for " +
                                     p.name);
        std::memcpy(p.tensor.data().data(), f.payload.data() + ent.offset, bytes);
        if (p.checksum() != ent.checksum)
            throw std::runtime_error("load_checkpoint: checksum mismatch for " + p.name +
                                     " (corrupt payload)");
        p.set_frozen(ent.frozen);
        entries.erase(it);
    };
    model.visit(v);

    // Parameters present in the model but absent from the file are allowed
    // only for the retrieval projections (base checkpoint -> adapter model);
    // they get their documented init.
    bool reinit_retrieval = false;
    for (const auto& name : missing) {
        if (name.find(".k_ret") != std::string::npos || name.find(".v_ret") != std::string::npos)
            reinit_retrieval = true;
        else
            throw std::runtime_error("load_checkpoint: parameter " + name + " missing from " + path);
    }
    if (reinit_retrieval) model.denoiser.init_retrieval_from_text();
    if (!entries.empty())
        throw std::runtime_error("load_checkpoint: file contains unknown parameter " +
                                 entries.begin()->first);
}

MvRagModel load_model(const std::string& path, bool with_retrieval) {
    const LoadedFile f = read_file(path);
    const DenoiserConfig cfg = config_from_json(f.header.at("config"));
    MvRagModel model(cfg, 0, with_retrieval);
    load_checkpoint(model, path);
    return model;
}

}  // namespace mvrag
