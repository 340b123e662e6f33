#include "specs/instance.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "specs/errors.hpp"

namespace specs {

using nlohmann::json;

std::vector<std::string> ToyInstance::responses() const {
    std::vector<std::string> out{""};
    for (int d = 0; d < horizon; ++d) {
        std::vector<std::string> next;
        next.reserve(out.size() * alphabet.size());
        for (const auto& p : out)
            for (const auto& s : alphabet) next.push_back(p + s);
        out = std::move(next);
    }
    return out;
}

std::vector<std::string> ToyInstance::prefixes() const {
    std::vector<std::string> out{""};
    std::vector<std::string> layer{""};
    for (int d = 1; d < horizon; ++d) {
        std::vector<std::string> next;
        for (const auto& p : layer)
            for (const auto& s : alphabet) next.push_back(p + s);
        out.insert(out.end(), next.begin(), next.end());
        layer = std::move(next);
    }
    return out;
}

double ToyInstance::reward_of(const std::string& response) const {
    auto it = response_reward.find(response);
    if (it == response_reward.end())
        throw InvalidPrefix("ToyInstance: no reward for response '" + response + "'");
    return it->second;
}

void ToyInstance::validate() const {
    if (horizon < 1) throw std::invalid_argument("ToyInstance: horizon must be >= 1");
    target.validate();
    draft.validate();
    if (!response_reward.empty())
        for (const auto& r : responses()) reward_of(r);
    if (!prm.entries().empty()) prm.validate();
}

namespace {

TabularPolicy parse_policy(const json& rows_json, const std::vector<std::string>& alphabet,
                           int horizon) {
    std::map<std::string, Eigen::VectorXd> rows;
    for (auto it = rows_json.begin(); it != rows_json.end(); ++it) {
        const auto& arr = it.value();
        Eigen::VectorXd row(static_cast<Eigen::Index>(arr.size()));
        for (std::size_t i = 0; i < arr.size(); ++i)
            row[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
        rows[it.key()] = row;
    }
    return TabularPolicy(alphabet, horizon, std::move(rows));
}

} // namespace

ToyInstance parse_instance(const json& j) {
    try {
        ToyInstance inst;
        inst.name = j.value("name", "instance");
        inst.prompt = j.value("prompt", inst.name);
        inst.alphabet = j.at("alphabet").get<std::vector<std::string>>();
        inst.horizon = j.at("horizon").get<int>();
        inst.beta = j.value("beta", 1.0);
        inst.target = parse_policy(j.at("target"), inst.alphabet, inst.horizon);
        inst.draft = j.contains("draft") ? parse_policy(j.at("draft"), inst.alphabet, inst.horizon)
                                         : inst.target;
        if (j.contains("response_reward"))
            inst.response_reward = j.at("response_reward").get<std::map<std::string, double>>();
        if (j.contains("prm")) {
            const auto& p = j.at("prm");
            StepTable entries = p.at("entries").get<StepTable>();
            std::pair<double, double> range{0.0, 1.0};
            if (p.contains("reward_range")) {
                range.first = p.at("reward_range").at(0).get<double>();
                range.second = p.at("reward_range").at(1).get<double>();
            }
            inst.prm = TabularPRM(std::move(entries), range);
        }
        inst.validate();
        return inst;
    } catch (const json::exception& e) {
        throw ConfigParse(std::string("instance parse: ") + e.what());
    }
}

ToyInstance load_instance(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigParse("instance file not readable: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigParse("instance file '" + path + "': " + e.what());
    }
    return parse_instance(j);
}

json instance_to_json(const ToyInstance& inst) {
    json j;
    j["name"] = inst.name;
    j["prompt"] = inst.prompt;
    j["alphabet"] = inst.alphabet;
    j["horizon"] = inst.horizon;
    j["beta"] = inst.beta;
    auto rows_to_json = [](const TabularPolicy& p) {
        json rows = json::object();
        for (const auto& [prefix, row] : p.rows()) {
            json arr = json::array();
            for (Eigen::Index i = 0; i < row.size(); ++i) arr.push_back(row[i]);
            rows[prefix] = arr;
        }
        return rows;
    };
    j["target"] = rows_to_json(inst.target);
    j["draft"] = rows_to_json(inst.draft);
    if (!inst.response_reward.empty()) j["response_reward"] = inst.response_reward;
    if (!inst.prm.entries().empty()) {
        j["prm"]["entries"] = inst.prm.entries();
        j["prm"]["reward_range"] = {inst.prm.reward_range().first, inst.prm.reward_range().second};
    }
    return j;
}

namespace fixtures {

namespace {

TabularPolicy binary_policy(int horizon, std::map<std::string, Eigen::VectorXd> rows) {
    return TabularPolicy({"0", "1"}, horizon, std::move(rows));
}

Eigen::VectorXd vec2(double a, double b) {
    Eigen::VectorXd v(2);
    v << a, b;
    return v;
}

} // namespace

ToyInstance t1() {
    const double ln4 = std::log(4.0);
    ToyInstance inst;
    inst.name = "t1";
    inst.prompt = "t1";
    inst.alphabet = {"0", "1"};
    inst.horizon = 1;
    inst.beta = 1.0;
    inst.target = binary_policy(1, {{"", vec2(0.8, 0.2)}});
    inst.draft = binary_policy(1, {{"", vec2(0.6, 0.4)}});
    inst.response_reward = {{"0", 0.0}, {"1", ln4}};
    inst.prm = TabularPRM({{"|0", 0.0}, {"|1", ln4}}, {0.0, ln4});
    return inst;
}

ToyInstance t2() {
    ToyInstance inst;
    inst.name = "t2";
    inst.prompt = "t2";
    inst.alphabet = {"0", "1"};
    inst.horizon = 2;
    inst.beta = 2.0;
    inst.target = binary_policy(2, {{"", vec2(0.7, 0.3)},
                                    {"0", vec2(0.6, 0.4)},
                                    {"1", vec2(0.25, 0.75)}});
    inst.draft = binary_policy(2, {{"", vec2(0.5, 0.5)},
                                   {"0", vec2(0.8, 0.2)},
                                   {"1", vec2(0.4, 0.6)}});
    inst.response_reward = {{"00", 0.1}, {"01", 0.9}, {"10", 0.3}, {"11", 0.6}};
    inst.prm = TabularPRM({{"|0", 0.4},
                           {"|1", 0.7},
                           {"0|0", 0.2},
                           {"0|1", 0.8},
                           {"1|0", 0.5},
                           {"1|1", 0.9}},
                          {0.0, 1.0});
    return inst;
}

ToyInstance lb(double theta, double beta) {
    if (theta <= 1.0) throw std::invalid_argument("lb: theta must be > 1");
    const double reward_top = std::log(theta) / beta;
    ToyInstance inst;
    inst.name = "lb_theta" + std::to_string(theta);
    inst.prompt = inst.name;
    inst.alphabet = {"0", "1"};
    inst.horizon = 1;
    inst.beta = beta;
    inst.target = binary_policy(1, {{"", vec2(theta / (1.0 + theta), 1.0 / (1.0 + theta))}});
    inst.draft = inst.target;
    inst.response_reward = {{"0", 0.0}, {"1", reward_top}};
    inst.prm = TabularPRM({{"|0", 0.0}, {"|1", reward_top}}, {0.0, reward_top});
    return inst;
}

ToyInstance random_instance(int alphabet_size, int horizon, std::uint64_t seed) {
    ToyInstance inst;
    inst.name = "random_k" + std::to_string(alphabet_size) + "_h" + std::to_string(horizon);
    inst.prompt = inst.name;
    for (int i = 0; i < alphabet_size; ++i) inst.alphabet.push_back(std::string(1, char('a' + i)));
    inst.horizon = horizon;
    inst.beta = 1.0;

    RngStream rng = derive_stream(seed, 0, StreamPurpose::Episode, 0);
    auto random_rows = [&]() {
        std::map<std::string, Eigen::VectorXd> rows;
        std::vector<std::string> layer{""};
        for (int d = 0; d < horizon; ++d) {
            std::vector<std::string> next;
            for (const auto& p : layer) {
                Eigen::VectorXd row(alphabet_size);
                for (int i = 0; i < alphabet_size; ++i) row[i] = 0.05 + rng.uniform01();
                row /= row.sum();
                rows[p] = row;
                for (const auto& s : inst.alphabet) next.push_back(p + s);
            }
            layer = std::move(next);
        }
        return rows;
    };
    inst.target = TabularPolicy(inst.alphabet, horizon, random_rows());
    inst.draft = TabularPolicy(inst.alphabet, horizon, random_rows());
    for (const auto& r : inst.responses()) inst.response_reward[r] = rng.uniform01();
    StepTable entries;
    for (const auto& p : inst.prefixes())
        for (const auto& s : inst.alphabet) entries[step_key(p, s)] = rng.uniform01();
    inst.prm = TabularPRM(std::move(entries), {0.0, 1.0});
    return inst;
}

} // namespace fixtures

} // namespace specs
