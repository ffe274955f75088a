#include "cgp/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>

#include "cgp/binary_io.hpp"
#include "cgp/errors.hpp"

namespace cgp::config {
namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view expected) {
    throw ConfigError(std::string(key) + ": cannot read '" + std::string(value) + "' as " + std::string(expected));
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
    v = trim(v);
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad(key, v, "a non-negative integer");
    return out;
}

std::size_t to_size(std::string_view key, std::string_view v) { return static_cast<std::size_t>(to_u64(key, v)); }

double to_double(std::string_view key, std::string_view v) {
    v = trim(v);
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) bad(key, v, "a number");
    return out;
}

bool to_bool(std::string_view key, std::string_view v) {
    v = trim(v);
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    bad(key, v, "on/off");
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto at = s.find(sep, start);
        out.push_back(trim(s.substr(start, at - start)));
        if (at == std::string_view::npos) break;
        start = at + 1;
    }
    return out;
}

std::string fmt(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

template <typename List>
std::string join(const List& xs) {
    std::string out;
    for (const auto& x : xs) out += (out.empty() ? "" : ",") + std::to_string(x);
    return out;
}

struct Field {
    std::function<void(ExperimentConfig&, std::string_view)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

using Entry = std::pair<std::string, Field>;

// `ref` is a generic accessor `[](auto& c) -> auto& { return c.member; }`.
template <typename Ref>
Entry size_field(std::string key, Ref ref) {
    return {key, {[=](ExperimentConfig& c, std::string_view v) { ref(c) = to_size(key, v); },
                  [=](const ExperimentConfig& c) { return std::to_string(ref(c)); }}};
}

template <typename Ref>
Entry double_field(std::string key, Ref ref) {
    return {key, {[=](ExperimentConfig& c, std::string_view v) { ref(c) = to_double(key, v); },
                  [=](const ExperimentConfig& c) { return fmt(ref(c)); }}};
}

template <typename Ref>
Entry bool_field(std::string key, Ref ref) {
    return {key, {[=](ExperimentConfig& c, std::string_view v) { ref(c) = to_bool(key, v); },
                  [=](const ExperimentConfig& c) { return std::string(ref(c) ? "on" : "off"); }}};
}

#define CGP_REF(member) [](auto& c) -> auto& { return c.member; }

const std::vector<Entry>& fields() {
    static const std::vector<Entry> table{
        {"dataset",
         {[](ExperimentConfig& c, std::string_view v) { c.dataset = std::string(trim(v)); },
          [](const ExperimentConfig& c) { return c.dataset; }}},
        size_field("per_domain", CGP_REF(per_domain)),
        double_field("rho_train", CGP_REF(rho_train)),
        double_field("rho_ood", CGP_REF(rho_ood)),
        {"data_seed",
         {[](ExperimentConfig& c, std::string_view v) { c.data_seed = to_u64("data_seed", v); },
          [](const ExperimentConfig& c) { return std::to_string(c.data_seed); }}},
        {"objective",
         {[](ExperimentConfig& c, std::string_view v) { c.objective.kind = objectives::parse_objective(trim(v)); },
          [](const ExperimentConfig& c) { return std::string(objectives::objective_name(c.objective.kind)); }}},
        bool_field("cgp", CGP_REF(cgp)),
        bool_field("augment", CGP_REF(augment)),
        double_field("sigma_noise", CGP_REF(hyper.sigma_noise)),
        double_field("tau", CGP_REF(hyper.tau)),
        double_field("steepness", CGP_REF(hyper.steepness)),
        double_field("lambda_vit", CGP_REF(hyper.lambda_vit)),
        size_field("stage1_epochs", CGP_REF(hyper.stage1_epochs)),
        size_field("stage2_epochs", CGP_REF(hyper.stage2_epochs)),
        double_field("learning_rate", CGP_REF(hyper.learning_rate)),
        double_field("momentum", CGP_REF(hyper.momentum)),
        size_field("batch_size", CGP_REF(hyper.batch_size)),
        double_field("irm_weight", CGP_REF(objective.irm_weight)),
        size_field("irm_anneal_epochs", CGP_REF(objective.irm_anneal_epochs)),
        double_field("vrex_weight", CGP_REF(objective.vrex_weight)),
        double_field("irmx_alpha", CGP_REF(objective.irmx_alpha)),
        double_field("irmx_beta", CGP_REF(objective.irmx_beta)),
        double_field("groupdro_eta", CGP_REF(objective.groupdro_eta)),
        size_field("vit.patch_size", CGP_REF(vit.patch_size)),
        size_field("vit.embed_dim", CGP_REF(vit.embed_dim)),
        size_field("vit.depth", CGP_REF(vit.depth)),
        size_field("vit.heads", CGP_REF(vit.heads)),
        size_field("vit.mlp_ratio", CGP_REF(vit.mlp_ratio)),
        {"cnn.channels",
         {[](ExperimentConfig& c, std::string_view v) {
              c.cnn.channels.clear();
              for (auto part : split(v, ',')) c.cnn.channels.push_back(to_size("cnn.channels", part));
          },
          [](const ExperimentConfig& c) { return join(c.cnn.channels); }}},
        size_field("cnn.kernel", CGP_REF(cnn.kernel)),
        {"seeds",
         {[](ExperimentConfig& c, std::string_view v) { c.seeds = parse_seeds(v); },
          [](const ExperimentConfig& c) { return join(c.seeds); }}},
        {"output_dir",
         {[](ExperimentConfig& c, std::string_view v) { c.output_dir = std::string(trim(v)); },
          [](const ExperimentConfig& c) { return c.output_dir; }}},
    };
    return table;
}

#undef CGP_REF

const Field* find(std::string_view key) {
    for (const auto& [k, f] : fields())
        if (k == key) return &f;
    return nullptr;
}

}  // namespace

std::string ExperimentConfig::label() const {
    return std::string(objectives::objective_name(objective.kind)) + (cgp ? "+cgp" : "");
}

train::TrainOptions ExperimentConfig::train_options(std::uint64_t seed) const {
    train::TrainOptions o;
    o.hyper = hyper;
    o.hyper.seed = seed;
    o.objective = objective;
    o.use_cgp = cgp;
    o.augment = augment;
    return o;
}

train::ModelConfig ExperimentConfig::model_config() const { return {vit, cnn}; }

const std::vector<std::string>& keys() {
    static const std::vector<std::string> out = [] {
        std::vector<std::string> k;
        for (const auto& [name, f] : fields()) k.push_back(name);
        return k;
    }();
    return out;
}

void apply(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
    const Field* f = find(trim(key));
    if (f == nullptr) throw ConfigError("unknown config key '" + std::string(trim(key)) + "'");
    f->set(cfg, value);
}

std::vector<std::uint64_t> parse_seeds(std::string_view text) {
    auto t = trim(text);
    if (t.size() >= 2 && t.front() == '[' && t.back() == ']') t = trim(t.substr(1, t.size() - 2));
    std::vector<std::uint64_t> out;
    if (const auto dots = t.find(".."); dots != std::string_view::npos) {
        const auto lo = to_u64("seeds", t.substr(0, dots));
        const auto hi = to_u64("seeds", t.substr(dots + 2));
        if (hi < lo) throw ConfigError("seeds: empty range '" + std::string(t) + "'");
        if (hi - lo >= 10000) throw ConfigError("seeds: range longer than 10000");
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
    } else {
        for (auto part : split(t, ',')) out.push_back(to_u64("seeds", part));
    }
    std::set<std::uint64_t> seen;
    for (auto s : out)
        if (!seen.insert(s).second) throw ConfigError("seeds: duplicate seed " + std::to_string(s));
    return out;
}

void validate(const ExperimentConfig& c) {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (c.dataset.empty()) fail("dataset: must be 'synthetic' or a file path");
    if (c.per_domain == 0) fail("per_domain: must be positive");
    if (!(c.rho_train >= 0.0 && c.rho_train <= 1.0)) fail("rho_train: must lie in [0, 1], got " + fmt(c.rho_train));
    if (!(c.rho_ood >= 0.0 && c.rho_ood <= 1.0)) fail("rho_ood: must lie in [0, 1], got " + fmt(c.rho_ood));
    c.hyper.validate();
    if (c.hyper.stage1_epochs == 0) fail("stage1_epochs: must be positive");
    const auto& o = c.objective;
    if (!(o.irm_weight >= 0.0)) fail("irm_weight: must be >= 0");
    if (!(o.vrex_weight >= 0.0)) fail("vrex_weight: must be >= 0");
    if (!(o.irmx_alpha >= 0.0)) fail("irmx_alpha: must be >= 0");
    if (!(o.irmx_beta >= 0.0)) fail("irmx_beta: must be >= 0");
    if (!(o.groupdro_eta >= 0.0)) fail("groupdro_eta: must be >= 0");
    const auto& v = c.vit;
    if (v.patch_size == 0 || v.image_size % v.patch_size != 0)
        fail("vit.patch_size: must divide the image size " + std::to_string(v.image_size));
    if (v.embed_dim == 0) fail("vit.embed_dim: must be positive");
    if (v.depth == 0) fail("vit.depth: must be positive");
    if (v.heads == 0 || v.embed_dim % v.heads != 0) fail("vit.heads: must divide vit.embed_dim");
    if (v.mlp_ratio == 0) fail("vit.mlp_ratio: must be positive");
    if (c.cnn.channels.empty()) fail("cnn.channels: needs at least one block");
    for (auto ch : c.cnn.channels)
        if (ch == 0) fail("cnn.channels: every width must be positive");
    if (c.cnn.kernel == 0 || c.cnn.kernel % 2 == 0) fail("cnn.kernel: must be odd");
    std::size_t side = c.cnn.image_size;
    for (std::size_t i = 0; i < c.cnn.channels.size(); ++i) {
        if (side % c.cnn.pool != 0 || side < c.cnn.pool) fail("cnn.channels: too many blocks for the image size");
        side /= c.cnn.pool;
    }
    if (c.seeds.empty()) fail("seeds: at least one seed required");
    if (c.output_dir.empty()) fail("output_dir: must not be empty");
}

ExperimentConfig parse(std::string_view text, std::string_view source) {
    ExperimentConfig cfg;
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    for (auto raw : split(text, '\n')) {
        ++line_no;
        auto line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        const auto where = std::string(source) + ":" + std::to_string(line_no) + ": ";
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
        const auto key = trim(line.substr(0, eq));
        if (!seen.insert(std::string(key)).second) throw ConfigError(where + "duplicate key '" + std::string(key) + "'");
        try {
            apply(cfg, key, line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    try {
        validate(cfg);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(source) + ": " + e.what());
    }
    return cfg;
}

ExperimentConfig load(const std::string& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::read_file(path);
    } catch (const std::runtime_error& e) {
        throw ConfigError(e.what());
    }
    return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path);
}

ExperimentConfig resolve(const std::string& path, const std::vector<Override>& overrides) {
    ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load(path);
    for (const auto& [k, v] : overrides) apply(cfg, k, v);
    validate(cfg);
    return cfg;
}

std::string resolved_text(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& [k, f] : fields()) out += k + " = " + f.get(cfg) + "\n";
    return out;
}

std::string fingerprint(const ExperimentConfig& cfg) {
    // FNV-1a, 64 bit
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](std::string_view s) {
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 1099511628211ULL;
        }
    };
    // where the results go is not part of what the experiment is
    auto keyed = cfg;
    keyed.output_dir = "-";
    feed(resolved_text(keyed));
    feed("cgp-version=");
    feed(CGP_VERSION);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

data::Dataset load_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset == "synthetic")
        return data::generate(data::default_domains(cfg.per_domain, cfg.rho_train, cfg.rho_ood), cfg.data_seed);
    return data::read_dataset(cfg.dataset);
}

}  // namespace cgp::config
