#include "hcvt/model.hpp"

namespace hcvt::model {

CheckpointData load_checkpoint(const std::filesystem::path& path) {
    using nlohmann::json;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(strfmt("cannot open checkpoint %s", path.string().c_str()));
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw io_error(strfmt("%s is not an hcvt checkpoint (bad magic)", path.string().c_str()));
    std::uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 4);
    if (!in) throw io_error("checkpoint truncated in header length");
    std::string htext(hlen, '\0');
    in.read(htext.data(), hlen);
    if (!in) throw io_error("checkpoint truncated in header");
    json header;
    try {
        header = json::parse(htext);
    } catch (const json::parse_error& e) {
        throw io_error(strfmt("checkpoint header is malformed JSON (%s)", e.what()));
    }
    if (!header.contains("format_version") || header["format_version"] != kCheckpointVersion)
        throw io_error(strfmt("checkpoint format version mismatch (want %s)", kCheckpointVersion));
    if (header.value("dtype", "") != "float64")
        throw io_error("checkpoint dtype must be float64");

    CheckpointData out;
    out.config = config_from_json_text(header.at("config").dump());
    if (header.contains("clinical_norm")) {
        const auto& cn = header["clinical_norm"];
        out.norm_stats.age_mean = cn.at("age_mean").get<double>();
        out.norm_stats.age_std = cn.at("age_std").get<double>();
        out.norm_stats.hosp_mean = cn.at("hosp_mean").get<double>();
        out.norm_stats.hosp_std = cn.at("hosp_std").get<double>();
        out.norm_stats.tumor_mean = cn.at("tumor_mean").get<double>();
        out.norm_stats.tumor_std = cn.at("tumor_std").get<double>();
        out.has_norm_stats = true;
    }

    // read the full payload, then slice per tensor directory entry
    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t n_doubles = payload.size() / 8;
    for (const auto& tj : header.at("tensors")) {
        const std::string name = tj.at("name").get<std::string>();
        const long rows = tj.at("rows").get<long>();
        const long cols = tj.at("cols").get<long>();
        const std::size_t offset = tj.at("offset").get<std::size_t>();
        const std::size_t count = std::size_t(rows) * std::size_t(cols);
        if (offset + count > n_doubles)
            throw io_error(strfmt("checkpoint tensor '%s' runs past the payload", name.c_str()));
        Eigen::MatrixXd m(rows, cols);
        std::memcpy(m.data(), payload.data() + offset * 8, count * 8);
        out.tensors.emplace(name, std::move(m));
    }
    return out;
}

}  // namespace hcvt::model
