#include "qagg/bench.hpp"

#include "qagg/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

namespace qagg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Names and small specs

const char* method_name(Method m) {
    switch (m) {
        case Method::QAgg: return "q_agg";
        case Method::CpSelect: return "cp_select";
        case Method::Gcv: return "gcv";
        case Method::ExpWeights: return "exp_weights";
        case Method::Oracle: return "oracle";
    }
    return "unknown";
}

Method parse_method(const std::string& name) {
    for (Method m : {Method::QAgg, Method::CpSelect, Method::Gcv, Method::ExpWeights, Method::Oracle}) {
        if (name == method_name(m)) return m;
    }
    throw InputError("unknown method '" + name + "'");
}

std::vector<double> GridSpec::resolve(double scale) const {
    std::vector<double> out;
    if (kind == Kind::Explicit) {
        out = values;
    } else {
        if (count == 0) throw InputError("geometric grid needs at least one point");
        if (!(min > 0.0) || !(max >= min)) throw InputError("geometric grid needs 0 < min <= max");
        if (count > 1 && max == min) throw InputError("geometric grid with several points needs min < max");
        out.resize(count);
        const double ratio = std::log(max / min);
        for (std::size_t j = 0; j < count; ++j) {
            const double t = count == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(count - 1);
            out[j] = j + 1 == count && count > 1 ? max : min * std::exp(ratio * t);
        }
    }
    if (relative) {
        for (double& l : out) l *= scale;
    }
    return out;
}

GridSpec parse_grid_spec(const std::string& text) {
    GridSpec spec;
    spec.relative = false;
    auto to_double = [&](const std::string& s) {
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw InputError("lambdas: cannot parse '" + s + "' as a number");
        }
    };
    if (text.rfind("geom:", 0) == 0) {
        std::vector<std::string> parts;
        std::stringstream ss(text.substr(5));
        std::string item;
        while (std::getline(ss, item, ':')) parts.push_back(item);
        if (parts.size() != 3) throw InputError("lambdas: expected geom:min:max:M, got '" + text + "'");
        spec.kind = GridSpec::Kind::Geometric;
        spec.min = to_double(parts[0]);
        spec.max = to_double(parts[1]);
        const double count = to_double(parts[2]);
        if (count < 1 || count != std::floor(count)) throw InputError("lambdas: M must be a positive integer");
        spec.count = static_cast<std::size_t>(count);
        return spec;
    }
    spec.kind = GridSpec::Kind::Explicit;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (item.empty()) continue;
        spec.values.push_back(to_double(item));
    }
    if (spec.values.empty()) throw InputError("lambdas: empty grid");
    return spec;
}

void ExperimentConfig::validate() const {
    if (n == 0) throw InputError("scenario.n: must be positive");
    if (!(sigma > 0.0)) throw InputError("scenario.sigma: must be positive");
    if (replicates == 0) throw InputError("replicates: must be at least 1");
    if (families.empty()) throw InputError("families: at least one family is required");
    if (methods.empty()) throw InputError("methods: at least one method is required");
    if (threads == 0) throw InputError("threads: must be at least 1");
    if (design.kind == DesignSpec::Kind::Gaussian && design.p == 0) throw InputError("design.p: must be positive");
    if (design.kind == DesignSpec::Kind::Explicit && static_cast<std::size_t>(design.matrix.rows()) != n) {
        throw InputError("design.rows: row count must equal scenario.n");
    }
    if (mean.shape == MeanSpec::Shape::Explicit && static_cast<std::size_t>(mean.values.size()) != n) {
        throw InputError("scenario.mean.values: length must equal scenario.n");
    }
    if (mean.target_oracle_risk && !(*mean.target_oracle_risk > 0.0)) {
        throw InputError("scenario.mean.target_oracle_risk: must be positive");
    }
    for (std::size_t f = 0; f < families.size(); ++f) {
        const std::string where = "families[" + std::to_string(f) + "]";
        const auto& g = families[f].grid;
        try {
            canonicalize_lambdas(g.resolve(1.0));
        } catch (const InputError& e) {
            throw InputError(where + ".lambdas: " + e.what());
        }
    }
    if (exp_weights_temperature && !(*exp_weights_temperature > 0.0)) {
        throw InputError("exp_weights_temperature: must be positive");
    }
    if (solver.max_iters < 1) throw InputError("solver.max_iters: must be positive");
    if (!(solver.kkt_tol > 0.0)) throw InputError("solver.kkt_tol: must be positive");
}

// ---------------------------------------------------------------------------
// JSON config

namespace {

[[noreturn]] void bad_key(const std::string& path, const std::string& what) {
    throw InputError(path + ": " + what);
}

const json& require(const json& obj, const std::string& key, const std::string& path) {
    if (!obj.is_object()) bad_key(path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) bad_key(path + "." + key, "missing required key");
    return *it;
}

double as_double(const json& v, const std::string& path) {
    if (!v.is_number()) bad_key(path, "expected a number");
    return v.get<double>();
}

std::size_t as_count(const json& v, const std::string& path) {
    if (!v.is_number_integer() || v.get<long long>() < 0) bad_key(path, "expected a nonnegative integer");
    return v.get<std::size_t>();
}

std::vector<double> as_doubles(const json& v, const std::string& path) {
    if (!v.is_array()) bad_key(path, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_double(v[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

std::vector<std::size_t> as_counts(const json& v, const std::string& path) {
    if (!v.is_array()) bad_key(path, "expected an array of integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_count(v[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return it.key() == k; })) {
            bad_key(path.empty() ? it.key() : path + "." + it.key(), "unknown key");
        }
    }
}

Eigen::VectorXd to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

MeanSpec parse_mean(const json& j, const std::string& path) {
    MeanSpec m;
    if (!j.is_object()) bad_key(path, "expected an object");
    reject_unknown(j, {"shape", "rate", "coordinate", "amplitude", "target_oracle_risk", "values"}, path);
    const json& shape = require(j, "shape", path);
    if (!shape.is_string()) bad_key(path + ".shape", "expected a string");
    const std::string s = shape.get<std::string>();
    if (s == "zero") m.shape = MeanSpec::Shape::Zero;
    else if (s == "spectral-decay") m.shape = MeanSpec::Shape::SpectralDecay;
    else if (s == "single-spike") m.shape = MeanSpec::Shape::SingleSpike;
    else if (s == "explicit") m.shape = MeanSpec::Shape::Explicit;
    else bad_key(path + ".shape", "expected zero | spectral-decay | single-spike | explicit");
    if (j.contains("rate")) m.rate = as_double(j["rate"], path + ".rate");
    if (j.contains("coordinate")) m.coordinate = as_count(j["coordinate"], path + ".coordinate");
    if (j.contains("amplitude")) m.amplitude = as_double(j["amplitude"], path + ".amplitude");
    if (j.contains("target_oracle_risk") && !j["target_oracle_risk"].is_null()) {
        m.target_oracle_risk = as_double(j["target_oracle_risk"], path + ".target_oracle_risk");
    }
    if (m.shape == MeanSpec::Shape::Explicit) {
        m.values = to_vector(as_doubles(require(j, "values", path), path + ".values"));
    }
    return m;
}

PenaltySpec parse_penalty(const json& j, const std::string& path) {
    PenaltySpec p;
    if (j.is_string()) {
        if (j.get<std::string>() != "identity") bad_key(path, "expected \"identity\" or an object");
        return p;
    }
    if (!j.is_object()) bad_key(path, "expected \"identity\" or an object");
    reject_unknown(j, {"kind", "power", "values"}, path);
    const json& kind = require(j, "kind", path);
    const std::string k = kind.is_string() ? kind.get<std::string>() : "";
    if (k == "identity") {
        p.kind = PenaltySpec::Kind::Identity;
    } else if (k == "diag-power") {
        p.kind = PenaltySpec::Kind::DiagPower;
        p.power = as_double(require(j, "power", path), path + ".power");
    } else if (k == "diagonal") {
        p.kind = PenaltySpec::Kind::Diagonal;
        p.diagonal = to_vector(as_doubles(require(j, "values", path), path + ".values"));
    } else {
        bad_key(path + ".kind", "expected identity | diag-power | diagonal");
    }
    return p;
}

GridSpec parse_grid(const json& j, const std::string& path) {
    if (j.is_string()) {
        try {
            return parse_grid_spec(j.get<std::string>());
        } catch (const InputError& e) {
            bad_key(path, e.what());
        }
    }
    GridSpec g;
    if (j.is_array()) {
        g.kind = GridSpec::Kind::Explicit;
        g.relative = false;
        g.values = as_doubles(j, path);
        return g;
    }
    if (!j.is_object()) bad_key(path, "expected a grid object, array or string");
    reject_unknown(j, {"kind", "min", "max", "count", "relative", "values"}, path);
    const std::string kind = j.value("kind", std::string("geometric"));
    if (kind == "geometric") {
        g.kind = GridSpec::Kind::Geometric;
        if (j.contains("min")) g.min = as_double(j["min"], path + ".min");
        if (j.contains("max")) g.max = as_double(j["max"], path + ".max");
        if (j.contains("count")) g.count = as_count(j["count"], path + ".count");
    } else if (kind == "explicit") {
        g.kind = GridSpec::Kind::Explicit;
        g.values = as_doubles(require(j, "values", path), path + ".values");
        g.relative = false;
    } else {
        bad_key(path + ".kind", "expected geometric | explicit");
    }
    if (j.contains("relative")) {
        if (!j["relative"].is_boolean()) bad_key(path + ".relative", "expected a boolean");
        g.relative = j["relative"].get<bool>();
    }
    return g;
}

json grid_to_json(const GridSpec& g) {
    json j;
    if (g.kind == GridSpec::Kind::Geometric) {
        j = {{"kind", "geometric"}, {"min", g.min}, {"max", g.max}, {"count", g.count}};
    } else {
        j = {{"kind", "explicit"}, {"values", g.values}};
    }
    j["relative"] = g.relative;
    return j;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j) {
    if (!j.is_object()) throw InputError("config: expected a JSON object at top level");
    reject_unknown(j, {"label", "seed", "replicates", "threads", "methods", "scenario", "design", "families",
                       "solver", "exp_weights_temperature", "lemma_check", "sweep"},
                   "");
    ExperimentConfig c;
    if (j.contains("label")) {
        if (!j["label"].is_string()) bad_key("label", "expected a string");
        c.label = j["label"].get<std::string>();
    }
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned() && !(j["seed"].is_number_integer() && j["seed"].get<long long>() >= 0)) {
            bad_key("seed", "expected a nonnegative integer");
        }
        c.seed = j["seed"].get<std::uint64_t>();
    }
    if (j.contains("replicates")) c.replicates = as_count(j["replicates"], "replicates");
    if (j.contains("threads")) c.threads = static_cast<unsigned>(as_count(j["threads"], "threads"));
    if (j.contains("methods")) {
        const json& ms = j["methods"];
        if (!ms.is_array()) bad_key("methods", "expected an array of method names");
        c.methods.clear();
        for (std::size_t i = 0; i < ms.size(); ++i) {
            const std::string path = "methods[" + std::to_string(i) + "]";
            if (!ms[i].is_string()) bad_key(path, "expected a string");
            try {
                c.methods.push_back(parse_method(ms[i].get<std::string>()));
            } catch (const InputError& e) {
                bad_key(path, e.what());
            }
        }
    }

    const json& sc = require(j, "scenario", "config");
    reject_unknown(sc, {"n", "sigma", "mean"}, "scenario");
    c.n = as_count(require(sc, "n", "scenario"), "scenario.n");
    c.sigma = as_double(require(sc, "sigma", "scenario"), "scenario.sigma");
    c.mean = sc.contains("mean") ? parse_mean(sc["mean"], "scenario.mean") : MeanSpec{};

    if (j.contains("design")) {
        const json& d = j["design"];
        if (!d.is_object()) bad_key("design", "expected an object");
        reject_unknown(d, {"kind", "p", "rows"}, "design");
        const std::string kind = d.value("kind", std::string("gaussian"));
        if (kind == "gaussian") {
            c.design.kind = DesignSpec::Kind::Gaussian;
            c.design.p = as_count(require(d, "p", "design"), "design.p");
        } else if (kind == "explicit") {
            c.design.kind = DesignSpec::Kind::Explicit;
            const json& rows = require(d, "rows", "design");
            if (!rows.is_array() || rows.empty()) bad_key("design.rows", "expected a nonempty array of rows");
            const auto first = as_doubles(rows[0], "design.rows[0]");
            c.design.matrix.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(first.size()));
            for (std::size_t r = 0; r < rows.size(); ++r) {
                const std::string path = "design.rows[" + std::to_string(r) + "]";
                const auto row = as_doubles(rows[r], path);
                if (row.size() != first.size()) bad_key(path, "ragged row");
                for (std::size_t k = 0; k < row.size(); ++k) {
                    c.design.matrix(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = row[k];
                }
            }
            c.design.p = first.size();
        } else {
            bad_key("design.kind", "expected gaussian | explicit");
        }
    }

    const json& fams = require(j, "families", "config");
    if (!fams.is_array() || fams.empty()) bad_key("families", "expected a nonempty array");
    for (std::size_t f = 0; f < fams.size(); ++f) {
        const std::string path = "families[" + std::to_string(f) + "]";
        if (!fams[f].is_object()) bad_key(path, "expected an object");
        reject_unknown(fams[f], {"penalty", "lambdas"}, path);
        FamilySpec spec;
        if (fams[f].contains("penalty")) spec.penalty = parse_penalty(fams[f]["penalty"], path + ".penalty");
        spec.grid = parse_grid(require(fams[f], "lambdas", path), path + ".lambdas");
        c.families.push_back(std::move(spec));
    }

    if (j.contains("solver")) {
        const json& s = j["solver"];
        if (!s.is_object()) bad_key("solver", "expected an object");
        reject_unknown(s, {"max_iters", "kkt_tol", "gradient_budget"}, "solver");
        if (s.contains("max_iters")) c.solver.max_iters = static_cast<int>(as_count(s["max_iters"], "solver.max_iters"));
        if (s.contains("kkt_tol")) c.solver.kkt_tol = as_double(s["kkt_tol"], "solver.kkt_tol");
        if (s.contains("gradient_budget")) {
            c.solver.gradient_budget = static_cast<int>(as_count(s["gradient_budget"], "solver.gradient_budget"));
        }
    }
    if (j.contains("exp_weights_temperature") && !j["exp_weights_temperature"].is_null()) {
        c.exp_weights_temperature = as_double(j["exp_weights_temperature"], "exp_weights_temperature");
    }
    if (j.contains("lemma_check")) {
        if (!j["lemma_check"].is_boolean()) bad_key("lemma_check", "expected a boolean");
        c.lemma_check = j["lemma_check"].get<bool>();
    }
    if (j.contains("sweep")) {
        const json& s = j["sweep"];
        if (!s.is_object()) bad_key("sweep", "expected an object");
        reject_unknown(s, {"M_values", "q_values", "penalty_spread"}, "sweep");
        if (s.contains("M_values")) c.sweep.m_values = as_counts(s["M_values"], "sweep.M_values");
        if (s.contains("q_values")) c.sweep.q_values = as_counts(s["q_values"], "sweep.q_values");
        if (s.contains("penalty_spread")) c.sweep.penalty_spread = as_double(s["penalty_spread"], "sweep.penalty_spread");
    }
    c.validate();
    return c;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1;
        std::size_t col = 1;
        const std::size_t upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        for (std::size_t i = 0; i < upto; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        std::ostringstream os;
        os << "line " << line << ", column " << col << ": invalid JSON";
        throw InputError(os.str());
    }
    return experiment_config_from_json(j);
}

json experiment_config_to_json(const ExperimentConfig& c) {
    json j;
    j["label"] = c.label;
    j["seed"] = c.seed;
    j["replicates"] = c.replicates;
    j["threads"] = c.threads;
    j["methods"] = json::array();
    for (Method m : c.methods) j["methods"].push_back(method_name(m));
    json mean;
    switch (c.mean.shape) {
        case MeanSpec::Shape::Zero: mean["shape"] = "zero"; break;
        case MeanSpec::Shape::SpectralDecay: mean["shape"] = "spectral-decay"; break;
        case MeanSpec::Shape::SingleSpike: mean["shape"] = "single-spike"; break;
        case MeanSpec::Shape::Explicit:
            mean["shape"] = "explicit";
            mean["values"] = to_std(c.mean.values);
            break;
    }
    mean["rate"] = c.mean.rate;
    mean["coordinate"] = c.mean.coordinate;
    mean["amplitude"] = c.mean.amplitude;
    if (c.mean.target_oracle_risk) mean["target_oracle_risk"] = *c.mean.target_oracle_risk;
    j["scenario"] = {{"n", c.n}, {"sigma", c.sigma}, {"mean", mean}};
    if (c.design.kind == DesignSpec::Kind::Gaussian) {
        j["design"] = {{"kind", "gaussian"}, {"p", c.design.p}};
    } else {
        json rows = json::array();
        for (Eigen::Index r = 0; r < c.design.matrix.rows(); ++r) {
            rows.push_back(to_std(c.design.matrix.row(r).transpose()));
        }
        j["design"] = {{"kind", "explicit"}, {"rows", rows}};
    }
    j["families"] = json::array();
    for (const auto& f : c.families) {
        json pen;
        switch (f.penalty.kind) {
            case PenaltySpec::Kind::Identity: pen = "identity"; break;
            case PenaltySpec::Kind::DiagPower: pen = {{"kind", "diag-power"}, {"power", f.penalty.power}}; break;
            case PenaltySpec::Kind::Diagonal: pen = {{"kind", "diagonal"}, {"values", to_std(f.penalty.diagonal)}}; break;
        }
        j["families"].push_back({{"penalty", pen}, {"lambdas", grid_to_json(f.grid)}});
    }
    j["solver"] = {{"max_iters", c.solver.max_iters}, {"kkt_tol", c.solver.kkt_tol},
                   {"gradient_budget", c.solver.gradient_budget}};
    j["exp_weights_temperature"] = c.exp_weights_temperature ? json(*c.exp_weights_temperature) : json(nullptr);
    j["lemma_check"] = c.lemma_check;
    j["sweep"] = {{"M_values", c.sweep.m_values}, {"q_values", c.sweep.q_values},
                  {"penalty_spread", c.sweep.penalty_spread}};
    return j;
}

// ---------------------------------------------------------------------------
// Instance construction

namespace {

constexpr std::uint64_t kDesignStream = 0x44455349474eULL;  // "DESIGN"
constexpr std::uint64_t kNoiseStream = 0x4e4f495345ULL;     // "NOISE"

std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

Eigen::MatrixXd make_penalty(const PenaltySpec& spec, std::size_t p) {
    const auto pp = static_cast<Eigen::Index>(p);
    switch (spec.kind) {
        case PenaltySpec::Kind::Identity: return Eigen::MatrixXd::Identity(pp, pp);
        case PenaltySpec::Kind::DiagPower: {
            Eigen::VectorXd d(pp);
            for (Eigen::Index i = 0; i < pp; ++i) d(i) = std::pow(static_cast<double>(i + 1), spec.power);
            return d.asDiagonal();
        }
        case PenaltySpec::Kind::Diagonal:
            if (spec.diagonal.size() != pp) throw InputError("penalty.values: length must equal p");
            return spec.diagonal.asDiagonal();
    }
    throw InputError("unknown penalty kind");
}

Eigen::VectorXd mean_shape(const MeanSpec& spec, const SpectralFamily& family, std::size_t n) {
    const auto r = static_cast<Eigen::Index>(family.rank());
    switch (spec.shape) {
        case MeanSpec::Shape::Zero: return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
        case MeanSpec::Shape::Explicit: return spec.values;
        case MeanSpec::Shape::SpectralDecay: {
            Eigen::VectorXd c(r);
            for (Eigen::Index i = 0; i < r; ++i) c(i) = std::pow(static_cast<double>(i + 1), -spec.rate);
            return family.basis() * c;
        }
        case MeanSpec::Shape::SingleSpike:
            if (static_cast<Eigen::Index>(spec.coordinate) >= r) {
                throw InputError("scenario.mean.coordinate: exceeds the rank of the first family");
            }
            return family.basis().col(static_cast<Eigen::Index>(spec.coordinate));
    }
    throw InputError("unknown mean shape");
}

double calibrate_scale(const FamilyUnion& candidates, const Eigen::VectorXd& shape, double sigma, double target) {
    auto risk_at = [&](double s) { return oracle_index(candidates, GroundTruth{s * shape, sigma}).risk; };
    if (shape.squaredNorm() == 0.0) throw InputError("scenario.mean: cannot rescale a zero mean");
    const double floor = risk_at(0.0);
    if (target < floor) {
        std::ostringstream os;
        os << "scenario.mean.target_oracle_risk: " << target << " is below the pure-variance floor " << floor;
        throw InputError(os.str());
    }
    double lo = 0.0;
    double hi = 1.0;
    int doublings = 0;
    while (risk_at(hi) < target) {
        lo = hi;
        hi *= 2.0;
        if (++doublings > 200) throw InputError("scenario.mean.target_oracle_risk: target not attainable");
    }
    for (int it = 0; it < 200 && hi - lo > 1e-14 * hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (risk_at(mid) < target) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace

Instance build_instance(const ExperimentConfig& config) {
    config.validate();
    const auto n = static_cast<Eigen::Index>(config.n);
    Eigen::MatrixXd x;
    if (config.design.kind == DesignSpec::Kind::Explicit) {
        x = config.design.matrix;
    } else {
        auto gen = make_stream(config.seed, kDesignStream, 0);
        std::normal_distribution<double> normal;
        x.resize(n, static_cast<Eigen::Index>(config.design.p));
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            for (Eigen::Index k = 0; k < x.cols(); ++k) x(i, k) = normal(gen);
        }
    }
    const auto p = static_cast<std::size_t>(x.cols());

    std::vector<DesignProblem> problems;
    std::vector<FamilyUnion::FamilyPtr> families;
    for (std::size_t f = 0; f < config.families.size(); ++f) {
        const FamilySpec& spec = config.families[f];
        Eigen::MatrixXd k;
        try {
            k = make_penalty(spec.penalty, p);
        } catch (const InputError& e) {
            throw InputError("families[" + std::to_string(f) + "]." + e.what());
        }
        double scale = 1.0;
        if (spec.grid.relative) {
            const Eigen::MatrixXd b = x * inverse_sqrt_spd(k);
            scale = b.squaredNorm() / static_cast<double>(p);
        }
        DesignProblem problem{x, k, spec.grid.resolve(scale)};
        families.push_back(std::make_shared<const SpectralFamily>(build_tikhonov_family(problem, static_cast<int>(f))));
        problems.push_back(std::move(problem));
    }
    FamilyUnion candidates(std::move(families));

    Eigen::VectorXd mu = mean_shape(config.mean, *candidates.families().front(), config.n);
    if (config.mean.shape != MeanSpec::Shape::Zero && config.mean.shape != MeanSpec::Shape::Explicit) {
        const double scale = config.mean.target_oracle_risk
                                 ? calibrate_scale(candidates, mu, config.sigma, *config.mean.target_oracle_risk)
                                 : config.mean.amplitude;
        mu *= scale;
    }
    GroundTruth truth{std::move(mu), config.sigma};
    truth.validate();
    return Instance{std::move(x), std::move(problems), std::move(candidates), std::move(truth)};
}

ExperimentConfig with_resolved_mean(const ExperimentConfig& config) {
    const Instance inst = build_instance(config);
    ExperimentConfig out = config;
    out.mean = MeanSpec{};
    out.mean.shape = MeanSpec::Shape::Explicit;
    out.mean.values = inst.truth.mu;
    return out;
}

// ---------------------------------------------------------------------------
// Experiment

const MethodSummary* RegretReport::find(Method m) const {
    for (const auto& s : methods) {
        if (s.method == m) return &s;
    }
    return nullptr;
}

double empirical_quantile(std::vector<double> data, double level) {
    if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(data.begin(), data.end());
    const double pos = level * static_cast<double>(data.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, data.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return data[lo] + frac * (data[hi] - data[lo]);
}

namespace {

ReplicateRecord run_replicate(const ExperimentConfig& config, const Instance& inst, const OracleChoice& oracle,
                              std::size_t r) {
    const auto n = static_cast<Eigen::Index>(config.n);
    auto gen = make_stream(config.seed, kNoiseStream, r);
    std::normal_distribution<double> normal(0.0, config.sigma);
    Eigen::VectorXd eps(n);
    for (Eigen::Index i = 0; i < n; ++i) eps(i) = normal(gen);
    const Eigen::VectorXd y = inst.truth.mu + eps;

    const CandidateFits fits(inst.candidates, y);
    const Eigen::VectorXd m = fits.coords(inst.truth.mu);
    const double m_perp = fits.perp_sq(inst.truth.mu, m);
    auto loss_of_coords = [&](const Eigen::VectorXd& c) { return (c - m).squaredNorm() + m_perp; };
    auto loss_of_member = [&](std::size_t j) {
        return loss_of_coords(fits.fits().col(static_cast<Eigen::Index>(j)));
    };

    ReplicateRecord rec;
    rec.oracle_loss = loss_of_member(oracle.index);
    rec.loss.reserve(config.methods.size());
    for (Method method : config.methods) {
        switch (method) {
            case Method::QAgg: {
                const SolveReport sol = solve_q_aggregation(fits, config.sigma, config.solver);
                rec.converged = sol.converged;
                rec.iterations = sol.iterations;
                rec.loss.push_back(loss_of_coords(fits.fits() * sol.weights.theta));
                if (config.lemma_check) {
                    const LemmaCheck chk = lemma_check(fits, sol.weights.theta, config.sigma, inst.truth.mu, eps,
                                                       oracle.index);
                    rec.lemma_checked = true;
                    rec.lemma_excess = chk.lhs - chk.rhs - chk.slack;
                }
                break;
            }
            case Method::CpSelect: rec.loss.push_back(loss_of_member(select_cp(fits, config.sigma))); break;
            case Method::Gcv: rec.loss.push_back(loss_of_member(select_gcv(fits).index)); break;
            case Method::ExpWeights: {
                const double temp = config.exp_weights_temperature.value_or(4.0 * config.sigma * config.sigma);
                const SimplexWeights w = exponential_weights(fits, config.sigma, temp);
                rec.loss.push_back(loss_of_coords(fits.fits() * w.theta));
                break;
            }
            case Method::Oracle: rec.loss.push_back(rec.oracle_loss); break;
        }
    }
    return rec;
}

// Tolerance for floating-point noise in the per-draw inequality.
double lemma_tolerance(const Instance& inst) {
    const double scale = inst.truth.mu.squaredNorm() +
                         static_cast<double>(inst.truth.n()) * inst.truth.sigma * inst.truth.sigma;
    return 1e-9 * (1.0 + scale);
}

}  // namespace

ExperimentRun run_experiment_detailed(const ExperimentConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    const Instance inst = build_instance(config);
    const OracleChoice oracle = oracle_index(inst.candidates, inst.truth);

    std::vector<ReplicateRecord> records(config.replicates);
    const unsigned workers = std::max(1u, std::min<unsigned>(config.threads, static_cast<unsigned>(config.replicates)));
    if (workers == 1) {
        for (std::size_t r = 0; r < config.replicates; ++r) records[r] = run_replicate(config, inst, oracle, r);
    } else {
        std::vector<std::thread> pool;
        std::exception_ptr failure;
        std::mutex failure_mutex;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t r = w; r < config.replicates; r += workers) {
                        records[r] = run_replicate(config, inst, oracle, r);
                    }
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    RegretReport rep;
    rep.label = config.label;
    rep.n = config.n;
    rep.members = inst.candidates.size();
    rep.families = inst.candidates.q();
    rep.sigma = config.sigma;
    rep.seed = config.seed;
    rep.replicates = config.replicates;
    rep.r_star = oracle.risk;
    rep.oracle_index = oracle.index;

    const double lemma_tol = lemma_tolerance(inst);
    double iteration_sum = 0.0;
    std::vector<std::size_t> included;
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& rec = records[r];
        iteration_sum += rec.iterations;
        if (!rec.converged) {
            ++rep.nonconverged;
            rep.excluded_replicates.push_back(r);
            continue;
        }
        included.push_back(r);
        if (rec.lemma_checked) {
            ++rep.lemma_checks;
            rep.max_lemma_excess = rep.lemma_checks == 1 ? rec.lemma_excess : std::max(rep.max_lemma_excess, rec.lemma_excess);
            if (rec.lemma_excess > lemma_tol) ++rep.lemma_violations;
        }
    }
    rep.mean_solver_iterations = iteration_sum / static_cast<double>(records.size());

    for (std::size_t k = 0; k < config.methods.size(); ++k) {
        MethodSummary s;
        s.method = config.methods[k];
        s.count = included.size();
        std::vector<double> excess;
        excess.reserve(included.size());
        double sum = 0.0;
        for (std::size_t r : included) {
            sum += records[r].loss[k];
            excess.push_back(records[r].loss[k] - records[r].oracle_loss);
        }
        if (s.count > 0) {
            s.mean_risk = sum / static_cast<double>(s.count);
            double ss = 0.0;
            for (std::size_t r : included) {
                const double d = records[r].loss[k] - s.mean_risk;
                ss += d * d;
            }
            const double var = s.count > 1 ? ss / static_cast<double>(s.count - 1) : 0.0;
            s.std_error = std::sqrt(var / static_cast<double>(s.count));
        }
        s.regret = s.mean_risk - rep.r_star;
        s.ci_half_width = kCiZ * s.std_error;
        for (std::size_t q = 0; q < kExcessLevels.size(); ++q) {
            s.excess_quantiles[q] = empirical_quantile(excess, kExcessLevels[q]);
        }
        rep.methods.push_back(s);
    }
    rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return ExperimentRun{std::move(rep), std::move(records)};
}

RegretReport run_experiment(const ExperimentConfig& config) { return run_experiment_detailed(config).report; }

std::vector<RegretReport> regret_vs_m_sweep(const ExperimentConfig& base, const std::vector<std::size_t>& m_values) {
    if (m_values.empty()) throw InputError("sweep.M_values: empty");
    if (!std::is_sorted(m_values.begin(), m_values.end()) ||
        std::adjacent_find(m_values.begin(), m_values.end()) != m_values.end()) {
        throw InputError("sweep.M_values: must be strictly ascending");
    }
    for (const auto& f : base.families) {
        if (f.grid.kind != GridSpec::Kind::Geometric) {
            throw InputError("sweep.M_values: every family needs a geometric grid on a fixed range");
        }
    }
    const ExperimentConfig fixed = with_resolved_mean(base);
    std::vector<RegretReport> out;
    for (std::size_t m : m_values) {
        if (m == 0) throw InputError("sweep.M_values: M must be positive");
        ExperimentConfig cfg = fixed;
        for (auto& f : cfg.families) f.grid.count = m;
        cfg.label = base.label + "/M=" + std::to_string(m);
        out.push_back(run_experiment(cfg));
    }
    return out;
}

double sweep_penalty_power(std::size_t m, double spread) {
    if (m == 0) return 0.0;
    if (m == 1) return spread;
    if (m == 2) return -spread;
    std::size_t idx = m - 3;
    std::size_t level = 1;
    std::size_t block = 2;
    while (idx >= block) {
        idx -= block;
        ++level;
        block *= 2;
    }
    const double numerator = 2.0 * static_cast<double>(idx / 2) + 1.0;
    const double value = numerator / std::ldexp(1.0, static_cast<int>(level));
    return spread * (idx % 2 == 0 ? value : -value);
}

std::vector<RegretReport> regret_vs_q_sweep(const ExperimentConfig& base, const std::vector<std::size_t>& q_values) {
    if (q_values.empty()) throw InputError("sweep.q_values: empty");
    if (!std::is_sorted(q_values.begin(), q_values.end())) throw InputError("sweep.q_values: must be ascending");
    const ExperimentConfig fixed = with_resolved_mean(base);
    const FamilySpec templ = base.families.front();
    std::vector<RegretReport> out;
    for (std::size_t q : q_values) {
        if (q == 0) throw InputError("sweep.q_values: q must be positive");
        ExperimentConfig cfg = fixed;
        cfg.families.clear();
        for (std::size_t m = 0; m < q; ++m) {
            FamilySpec f = templ;
            f.penalty.kind = PenaltySpec::Kind::DiagPower;
            f.penalty.power = sweep_penalty_power(m, base.sweep.penalty_spread);
            cfg.families.push_back(f);
        }
        cfg.label = base.label + "/q=" + std::to_string(q);
        out.push_back(run_experiment(cfg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

json report_to_json(const RegretReport& r) {
    json j;
    j["label"] = r.label;
    j["n"] = r.n;
    j["M"] = r.members;
    j["q"] = r.families;
    j["sigma"] = r.sigma;
    j["seed"] = r.seed;
    j["replicates"] = r.replicates;
    j["R_star"] = r.r_star;
    j["oracle_index"] = r.oracle_index;
    j["nonconverged"] = r.nonconverged;
    j["excluded_replicates"] = r.excluded_replicates;
    j["lemma_checks"] = r.lemma_checks;
    j["lemma_violations"] = r.lemma_violations;
    j["max_lemma_excess"] = r.max_lemma_excess;
    j["mean_solver_iterations"] = r.mean_solver_iterations;
    j["runtime_seconds"] = r.runtime_seconds;
    j["methods"] = json::array();
    for (const auto& s : r.methods) {
        json q = json::object();
        for (std::size_t k = 0; k < kExcessLevels.size(); ++k) {
            std::ostringstream key;
            key << kExcessLevels[k];
            q[key.str()] = s.excess_quantiles[k];
        }
        j["methods"].push_back({{"method", method_name(s.method)},
                                {"count", s.count},
                                {"mean_risk", s.mean_risk},
                                {"std_error", s.std_error},
                                {"regret", s.regret},
                                {"ci_half_width", s.ci_half_width},
                                {"excess_quantiles", q}});
    }
    return j;
}

RegretReport report_from_json(const json& j) {
    try {
        RegretReport r;
        r.label = j.at("label").get<std::string>();
        r.n = j.at("n").get<std::size_t>();
        r.members = j.at("M").get<std::size_t>();
        r.families = j.at("q").get<std::size_t>();
        r.sigma = j.at("sigma").get<double>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.replicates = j.at("replicates").get<std::size_t>();
        r.r_star = j.at("R_star").get<double>();
        r.oracle_index = j.at("oracle_index").get<std::size_t>();
        r.nonconverged = j.at("nonconverged").get<std::size_t>();
        r.excluded_replicates = j.at("excluded_replicates").get<std::vector<std::size_t>>();
        r.lemma_checks = j.at("lemma_checks").get<std::size_t>();
        r.lemma_violations = j.at("lemma_violations").get<std::size_t>();
        r.max_lemma_excess = j.at("max_lemma_excess").get<double>();
        r.mean_solver_iterations = j.at("mean_solver_iterations").get<double>();
        r.runtime_seconds = j.at("runtime_seconds").get<double>();
        for (const auto& m : j.at("methods")) {
            MethodSummary s;
            s.method = parse_method(m.at("method").get<std::string>());
            s.count = m.at("count").get<std::size_t>();
            s.mean_risk = m.at("mean_risk").get<double>();
            s.std_error = m.at("std_error").get<double>();
            s.regret = m.at("regret").get<double>();
            s.ci_half_width = m.at("ci_half_width").get<double>();
            const json& q = m.at("excess_quantiles");
            for (std::size_t k = 0; k < kExcessLevels.size(); ++k) {
                std::ostringstream key;
                key << kExcessLevels[k];
                s.excess_quantiles[k] = q.at(key.str()).get<double>();
            }
            r.methods.push_back(s);
        }
        return r;
    } catch (const json::exception& e) {
        throw InputError(std::string("report: ") + e.what());
    }
}

void write_reports_csv(std::ostream& os, const std::vector<RegretReport>& reports) {
    os << "label,n,M,q,sigma,seed,replicates,R_star,method,count,mean_risk,std_error,regret,ci_half_width,"
          "excess_q50,excess_q90,excess_q99,nonconverged,lemma_violations\n";
    std::ostringstream line;
    line << std::setprecision(17);
    for (const auto& r : reports) {
        for (const auto& s : r.methods) {
            line.str("");
            line << r.label << ',' << r.n << ',' << r.members << ',' << r.families << ',' << r.sigma << ','
                 << r.seed << ',' << r.replicates << ',' << r.r_star << ',' << method_name(s.method) << ','
                 << s.count << ',' << s.mean_risk << ',' << s.std_error << ',' << s.regret << ','
                 << s.ci_half_width << ',' << s.excess_quantiles[0] << ',' << s.excess_quantiles[1] << ','
                 << s.excess_quantiles[2] << ',' << r.nonconverged << ',' << r.lemma_violations << '\n';
            os << line.str();
        }
    }
}

}  // namespace qagg
