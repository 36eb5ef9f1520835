#pragma once

// Persistence. Structured artifacts are JSON envelopes
//   {"schema": kind, "version": N, "checksum": fnv1a(payload), "payload": {...}}
// and datasets are flat record files with a checksummed header line. Doubles
// are written in shortest round-trip form, so load(persist(x)) is bit-equal.
// Loads either return a complete object or throw.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rfx/core.hpp"
#include "rfx/instances.hpp"
#include "rfx/linear_mdp.hpp"
#include "rfx/model.hpp"

namespace rfx {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes through a sibling temporary and renames, so readers never see a
/// half-written file.
inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw UsageError("cannot write " + tmp.string());
        out << bytes;
        if (!out.flush()) throw UsageError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string format_double(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    double x = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw CorruptionError("bad number: " + s);
    return x;
}

// ---------------------------------------------------------------------------
// Envelope

inline std::string payload_checksum(const json& payload) { return hex64(fnv1a(payload.dump())); }

inline std::string wrap(const std::string& kind, json payload) {
    json doc;
    doc["schema"] = kind;
    doc["version"] = kSchemaVersion;
    doc["checksum"] = payload_checksum(payload);
    doc["payload"] = std::move(payload);
    return doc.dump(1) + "\n";
}

inline json unwrap(const std::string& kind, const std::string& bytes) {
    json doc;
    try {
        doc = json::parse(bytes);
    } catch (const json::exception& e) {
        throw CorruptionError(kind + ": unreadable document (" + e.what() + ")");
    }
    if (!doc.is_object() || !doc.contains("schema") || !doc.contains("version") || !doc.contains("checksum") ||
        !doc.contains("payload"))
        throw CorruptionError(kind + ": missing envelope fields");
    if (doc["schema"] != kind) throw SchemaError("expected schema '" + kind + "', found " + doc["schema"].dump());
    if (doc["version"] != kSchemaVersion)
        throw SchemaError(kind + ": schema version " + doc["version"].dump() + " is not supported (expected " +
                          std::to_string(kSchemaVersion) + ")");
    if (doc["checksum"] != payload_checksum(doc["payload"])) throw CorruptionError(kind + ": checksum mismatch");
    return doc["payload"];
}

/// Runs `build` on the payload and turns any decoding failure into a
/// CorruptionError.
template <class F>
auto decode(const std::string& kind, const std::string& bytes, F build) {
    json p = unwrap(kind, bytes);
    try {
        return build(p);
    } catch (const json::exception& e) {
        throw CorruptionError(kind + ": malformed payload (" + e.what() + ")");
    } catch (const UsageError& e) {
        throw CorruptionError(kind + ": inconsistent payload (" + e.what() + ")");
    }
}

// ---------------------------------------------------------------------------
// Eigen helpers

inline json to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec vec_from_json(const json& j) {
    const auto x = j.get<std::vector<double>>();
    return Eigen::Map<const Vec>(x.data(), static_cast<Eigen::Index>(x.size()));
}

inline json to_json(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(to_json(Vec(m.row(i).transpose())));
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

inline Mat mat_from_json(const json& j) {
    const Eigen::Index r = j.at("rows").get<Eigen::Index>(), c = j.at("cols").get<Eigen::Index>();
    const auto& data = j.at("data");
    if (!data.is_array() || static_cast<Eigen::Index>(data.size()) != r) throw UsageError("matrix row count");
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
        const Vec row = vec_from_json(data[static_cast<std::size_t>(i)]);
        if (row.size() != c) throw UsageError("matrix column count");
        m.row(i) = row.transpose();
    }
    return m;
}

inline std::string seed_string(std::uint64_t s) { return std::to_string(s); }

inline std::uint64_t seed_from_json(const json& j) {
    if (j.is_number_unsigned()) return j.get<std::uint64_t>();
    return std::stoull(j.get<std::string>());
}

// ---------------------------------------------------------------------------
// Mixture instances

inline json instance_payload(const MixtureInstance& inst) {
    json basis = json::array();
    for (const auto& b : inst.basis) basis.push_back(to_json(b));
    json theta = json::array();
    for (const auto& t : inst.theta) theta.push_back(to_json(t));
    return json{{"S", inst.S},         {"A", inst.A},       {"H", inst.H},
                {"d", inst.d},         {"family", inst.family}, {"seed", seed_string(inst.seed)},
                {"basis", basis},      {"theta", theta},    {"init", to_json(inst.init)}};
}

inline MixtureInstance instance_from_payload(const json& p) {
    std::vector<Mat> basis;
    for (const auto& b : p.at("basis")) basis.push_back(mat_from_json(b));
    std::vector<Vec> theta;
    for (const auto& t : p.at("theta")) theta.push_back(vec_from_json(t));
    MixtureInstance inst(p.at("S").get<int>(), p.at("A").get<int>(), p.at("H").get<int>(), std::move(basis),
                         std::move(theta), vec_from_json(p.at("init")), p.at("family").get<std::string>(),
                         seed_from_json(p.at("seed")));
    if (inst.d != p.at("d").get<int>()) throw UsageError("basis count does not match d");
    return inst;
}

inline std::string serialize_instance(const MixtureInstance& inst) { return wrap("rfx.instance", instance_payload(inst)); }

inline MixtureInstance deserialize_instance(const std::string& bytes) {
    return decode("rfx.instance", bytes, instance_from_payload);
}

inline void persist_instance(const MixtureInstance& inst, const std::filesystem::path& path) {
    write_file(path, serialize_instance(inst));
}

inline MixtureInstance load_instance(const std::filesystem::path& path) { return deserialize_instance(read_file(path)); }

// ---------------------------------------------------------------------------
// Linear MDP instances

inline json linear_instance_payload(const LinearMDPInstance& inst) {
    json mu = json::array(), eta = json::array();
    for (const auto& m : inst.mu) mu.push_back(to_json(m));
    for (const auto& e : inst.eta) eta.push_back(to_json(e));
    return json{{"S", inst.S},     {"A", inst.A},   {"H", inst.H},
                {"d", inst.d},     {"family", inst.family}, {"seed", seed_string(inst.seed)},
                {"phi", to_json(inst.phi)}, {"mu", mu}, {"eta", eta}, {"init", to_json(inst.init)}};
}

inline LinearMDPInstance linear_instance_from_payload(const json& p) {
    LinearMDPInstance inst;
    inst.S = p.at("S").get<int>();
    inst.A = p.at("A").get<int>();
    inst.H = p.at("H").get<int>();
    inst.d = p.at("d").get<int>();
    inst.family = p.at("family").get<std::string>();
    inst.seed = seed_from_json(p.at("seed"));
    inst.phi = mat_from_json(p.at("phi"));
    for (const auto& m : p.at("mu")) inst.mu.push_back(mat_from_json(m));
    for (const auto& e : p.at("eta")) inst.eta.push_back(vec_from_json(e));
    inst.init = vec_from_json(p.at("init"));
    if (inst.phi.rows() != inst.S * inst.A || inst.phi.cols() != inst.d ||
        static_cast<int>(inst.mu.size()) != inst.H || static_cast<int>(inst.eta.size()) != inst.H ||
        inst.init.size() != inst.S)
        throw UsageError("linear instance shapes disagree");
    for (int h = 0; h < inst.H; ++h)
        if (inst.mu[h].rows() != inst.d || inst.mu[h].cols() != inst.S || inst.eta[h].size() != inst.d)
            throw UsageError("linear instance shapes disagree");
    return inst;
}

inline std::string serialize_linear_instance(const LinearMDPInstance& inst) {
    return wrap("rfx.linear-instance", linear_instance_payload(inst));
}

inline LinearMDPInstance deserialize_linear_instance(const std::string& bytes) {
    return decode("rfx.linear-instance", bytes, linear_instance_from_payload);
}

inline void persist_linear_instance(const LinearMDPInstance& inst, const std::filesystem::path& path) {
    write_file(path, serialize_linear_instance(inst));
}

inline LinearMDPInstance load_linear_instance(const std::filesystem::path& path) {
    return deserialize_linear_instance(read_file(path));
}

// ---------------------------------------------------------------------------
// Estimated models

inline json model_payload(const EstimatedModel& m) {
    json theta = json::array();
    for (const auto& t : m.theta) theta.push_back(to_json(t));
    return json{{"algorithm", m.algorithm}, {"K", m.K},       {"config_digest", m.config_digest},
                {"theta", theta},           {"slack", m.slack}, {"beta", m.beta},
                {"flags", m.flags}};
}

inline EstimatedModel model_from_payload(const json& p) {
    EstimatedModel m;
    m.algorithm = p.at("algorithm").get<std::string>();
    m.K = p.at("K").get<int>();
    m.config_digest = p.at("config_digest").get<std::string>();
    for (const auto& t : p.at("theta")) m.theta.push_back(vec_from_json(t));
    m.slack = p.at("slack").get<std::vector<double>>();
    m.beta = p.at("beta").get<double>();
    m.flags = p.at("flags").get<std::vector<std::string>>();
    return m;
}

inline std::string serialize_model(const EstimatedModel& m) { return wrap("rfx.model", model_payload(m)); }

inline EstimatedModel deserialize_model(const std::string& bytes) { return decode("rfx.model", bytes, model_from_payload); }

inline void persist_model(const EstimatedModel& m, const std::filesystem::path& path) {
    write_file(path, serialize_model(m));
}

inline EstimatedModel load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

// ---------------------------------------------------------------------------
// Datasets: one header line, then "episode step s a next" per record.
//   rfx-dataset <version> <checksum> <S> <A> <H> <K> <beta> <digest> <count>
// The checksum covers every byte after the header line.

inline std::string serialize_dataset(const ExplorationDataset& ds) {
    std::string body;
    body.reserve(ds.records.size() * 16);
    for (const auto& r : ds.records) {
        body += std::to_string(r.episode);
        body += ' ';
        body += std::to_string(r.step);
        body += ' ';
        body += std::to_string(r.s);
        body += ' ';
        body += std::to_string(r.a);
        body += ' ';
        body += std::to_string(r.next);
        body += '\n';
    }
    const std::string digest = ds.config_digest.empty() ? "-" : ds.config_digest;
    std::string header = "rfx-dataset " + std::to_string(kSchemaVersion) + " " + hex64(fnv1a(body)) + " " +
                         std::to_string(ds.S) + " " + std::to_string(ds.A) + " " + std::to_string(ds.H) + " " +
                         std::to_string(ds.K) + " " + format_double(ds.beta) + " " + digest + " " +
                         std::to_string(ds.records.size()) + "\n";
    return header + body;
}

inline ExplorationDataset deserialize_dataset(const std::string& bytes) {
    const auto eol = bytes.find('\n');
    if (eol == std::string::npos) throw CorruptionError("dataset: missing header");
    std::istringstream head(bytes.substr(0, eol));
    std::string magic, checksum, beta, digest;
    int version = 0;
    std::size_t count = 0;
    ExplorationDataset ds;
    if (!(head >> magic >> version) || magic != "rfx-dataset") throw CorruptionError("dataset: bad magic");
    if (version != kSchemaVersion)
        throw SchemaError("dataset: schema version " + std::to_string(version) + " is not supported");
    if (!(head >> checksum >> ds.S >> ds.A >> ds.H >> ds.K >> beta >> digest >> count))
        throw CorruptionError("dataset: truncated header");
    const std::string body = bytes.substr(eol + 1);
    if (hex64(fnv1a(body)) != checksum) throw CorruptionError("dataset: checksum mismatch");
    ds.beta = parse_double(beta);
    ds.config_digest = digest == "-" ? "" : digest;
    ds.records.reserve(count);
    std::istringstream in(body);
    LinearRecord r;
    while (in >> r.episode >> r.step >> r.s >> r.a >> r.next) ds.records.push_back(r);
    if (!in.eof() || ds.records.size() != count) throw CorruptionError("dataset: record count mismatch");
    return ds;
}

inline void persist_dataset(const ExplorationDataset& ds, const std::filesystem::path& path) {
    write_file(path, serialize_dataset(ds));
}

inline ExplorationDataset load_dataset(const std::filesystem::path& path) {
    return deserialize_dataset(read_file(path));
}

}  // namespace rfx
