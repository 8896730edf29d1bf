#include "minmax/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mm {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'R', 'N', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ofstream& f, T v)
{
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& f)
{
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!f) throw ShapeError("checkpoint: truncated file");
    return v;
}

}  // namespace

nlohmann::json dims_to_json(const Dims& d)
{
    return {{"d_in", d.d_in},         {"d_out", d.d_out},     {"d_model", d.d_model},
            {"d_state", d.d_state},   {"n_units", d.n_units}, {"n_layers", d.n_layers},
            {"d_mlp", d.d_mlp},       {"n_mlp", d.n_mlp},     {"prenorm", d.prenorm},
            {"residual", d.residual}};
}

Dims dims_from_json(const nlohmann::json& j)
{
    Dims d;
    d.d_in = j.at("d_in").get<int>();
    d.d_out = j.at("d_out").get<int>();
    d.d_model = j.at("d_model").get<int>();
    d.d_state = j.at("d_state").get<int>();
    d.n_units = j.at("n_units").get<int>();
    d.n_layers = j.at("n_layers").get<int>();
    d.d_mlp = j.at("d_mlp").get<int>();
    d.n_mlp = j.at("n_mlp").get<int>();
    d.prenorm = j.value("prenorm", true);
    d.residual = j.value("residual", true);
    validate(d);
    return d;
}

void save_checkpoint(const std::string& path, const CascadeWeights& w, const CheckpointExtra& extra)
{
    nlohmann::json h;
    h["dims"] = dims_to_json(w.dims);
    h["seed"] = w.seed;
    h["meta"] = extra.meta;
    auto& arrays = h["arrays"] = nlohmann::json::array();
    visit_params(w, [&](const std::string& name, const double*, Eigen::Index n) {
        arrays.push_back({{"name", name}, {"size", n}});
    });
    auto& ex = h["extra"] = nlohmann::json::array();
    for (const auto& [name, m] : extra.arrays) ex.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    const std::string hs = h.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
    f.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(f, kCheckpointVersion);
    put<std::uint64_t>(f, hs.size());
    f.write(hs.data(), std::streamsize(hs.size()));
    visit_params(w, [&](const std::string&, const double* p, Eigen::Index n) {
        f.write(reinterpret_cast<const char*>(p), std::streamsize(n * sizeof(double)));
    });
    for (const auto& [name, m] : extra.arrays) {
        MatrixXd c = m;  // column-major storage on disk
        f.write(reinterpret_cast<const char*>(c.data()), std::streamsize(c.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

CascadeWeights load_checkpoint(const std::string& path, CheckpointExtra* extra)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof magic);
    if (!f || std::memcmp(magic, kMagic, sizeof magic) != 0) throw ShapeError("checkpoint: bad magic in " + path);
    const auto version = get<std::uint32_t>(f);
    if (version != kCheckpointVersion) throw ShapeError("checkpoint: unsupported version " + std::to_string(version));
    const auto hlen = get<std::uint64_t>(f);
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    if (!f) throw ShapeError("checkpoint: truncated header");
    const auto h = nlohmann::json::parse(hs);

    CascadeWeights w = init_weights(dims_from_json(h.at("dims")), h.at("seed").get<std::uint64_t>());
    const auto& arrays = h.at("arrays");
    std::size_t idx = 0;
    visit_params(w, [&](const std::string& name, double* p, Eigen::Index n) {
        if (idx >= arrays.size() || arrays[idx].at("name") != name || arrays[idx].at("size").get<Eigen::Index>() != n)
            throw ShapeError("checkpoint: array layout differs at " + name);
        f.read(reinterpret_cast<char*>(p), std::streamsize(n * sizeof(double)));
        if (!f) throw ShapeError("checkpoint: truncated array " + name);
        ++idx;
    });
    if (idx != arrays.size()) throw ShapeError("checkpoint: unexpected extra weight arrays");
    for (const auto& e : h.at("extra")) {
        MatrixXd m(e.at("rows").get<Eigen::Index>(), e.at("cols").get<Eigen::Index>());
        f.read(reinterpret_cast<char*>(m.data()), std::streamsize(m.size() * sizeof(double)));
        if (!f) throw ShapeError("checkpoint: truncated extra array");
        if (extra) extra->arrays[e.at("name").get<std::string>()] = std::move(m);
    }
    if (extra) extra->meta = h.value("meta", nlohmann::json::object());
    return w;
}

}  // namespace mm
