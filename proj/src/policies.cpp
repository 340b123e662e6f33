#include "specs/policies.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "specs/errors.hpp"
#include "specs/numerics.hpp"

namespace specs {

TabularPolicy::TabularPolicy(std::vector<std::string> alphabet, int horizon,
                             std::map<std::string, Eigen::VectorXd> rows)
    : alphabet_(std::move(alphabet)), horizon_(horizon), rows_(std::move(rows)) {
    for (std::size_t i = 0; i < alphabet_.size(); ++i)
        symbol_index_[alphabet_[i]] = static_cast<int>(i);
}

std::string TabularPolicy::prefix_key(const BlockTrace& trace) {
    std::string key;
    for (const auto& b : trace.blocks) key += b.text();
    return key;
}

const Eigen::VectorXd& TabularPolicy::row(const std::string& prefix) const {
    auto it = rows_.find(prefix);
    if (it == rows_.end())
        throw InvalidPrefix("TabularPolicy: no distribution for prefix '" + prefix + "'");
    return it->second;
}

int TabularPolicy::symbol_index(const std::string& symbol) const {
    auto it = symbol_index_.find(symbol);
    return it == symbol_index_.end() ? -1 : it->second;
}

Block TabularPolicy::sample_block(const BlockTrace& trace, int gamma, RngStream& rng) const {
    (void)gamma; // toy blocks are single symbols
    const Eigen::VectorXd& probs = row(prefix_key(trace));
    Eigen::Index i = rng.categorical(probs);
    return Block{{alphabet_[static_cast<std::size_t>(i)]}, false};
}

double TabularPolicy::block_logprob(const BlockTrace& trace, const Block& block) const {
    const Eigen::VectorXd& probs = row(prefix_key(trace));
    int idx = block.tokens.size() == 1 ? symbol_index(block.tokens.front()) : -1;
    if (idx < 0)
        throw InvalidPrefix("TabularPolicy: block '" + block.text() + "' is not a single alphabet symbol");
    double p = probs[idx];
    return p > 0.0 ? std::log(p) : kNegInf;
}

std::optional<std::vector<std::pair<Block, double>>>
TabularPolicy::enumerate_blocks(const BlockTrace& trace) const {
    const Eigen::VectorXd& probs = row(prefix_key(trace));
    std::vector<std::pair<Block, double>> out;
    out.reserve(alphabet_.size());
    for (std::size_t i = 0; i < alphabet_.size(); ++i)
        out.emplace_back(Block{{alphabet_[i]}, false}, probs[static_cast<Eigen::Index>(i)]);
    return out;
}

double TabularPolicy::path_probability(const std::string& path) const {
    double p = 1.0;
    std::string prefix;
    for (char c : path) {
        std::string sym(1, c);
        int idx = symbol_index(sym);
        if (idx < 0) throw InvalidPrefix("TabularPolicy: unknown symbol '" + sym + "'");
        p *= row(prefix)[idx];
        prefix += sym;
    }
    return p;
}

void TabularPolicy::validate() const {
    if (alphabet_.empty()) throw std::invalid_argument("TabularPolicy: empty alphabet");
    for (const auto& s : alphabet_)
        if (s.size() != 1)
            throw std::invalid_argument("TabularPolicy: alphabet symbols must be single characters");
    for (const auto& [prefix, probs] : rows_) {
        if (probs.size() != static_cast<Eigen::Index>(alphabet_.size()))
            throw std::invalid_argument("TabularPolicy: row '" + prefix + "' has wrong arity");
        if (probs.minCoeff() < 0.0)
            throw std::invalid_argument("TabularPolicy: negative probability in row '" + prefix + "'");
        if (std::abs(probs.sum() - 1.0) > 1e-10)
            throw std::invalid_argument("TabularPolicy: row '" + prefix + "' does not sum to 1");
    }
    // every prefix reachable with positive probability needs a row
    std::deque<std::string> frontier{""};
    while (!frontier.empty()) {
        std::string prefix = frontier.front();
        frontier.pop_front();
        if (static_cast<int>(prefix.size()) >= horizon_) continue;
        auto it = rows_.find(prefix);
        if (it == rows_.end())
            throw std::invalid_argument("TabularPolicy: missing row for reachable prefix '" + prefix + "'");
        for (std::size_t i = 0; i < alphabet_.size(); ++i)
            if (it->second[static_cast<Eigen::Index>(i)] > 0.0)
                frontier.push_back(prefix + alphabet_[i]);
    }
}

TabularPRM::TabularPRM(StepTable entries, std::pair<double, double> range)
    : entries_(std::move(entries)), range_(range) {}

double TabularPRM::score(const BlockTrace& trace, const Block& candidate) const {
    std::string key = step_key(TabularPolicy::prefix_key(trace), candidate.text());
    auto it = entries_.find(key);
    if (it == entries_.end())
        throw InvalidPrefix("TabularPRM: no entry for '" + key + "'");
    return it->second;
}

void TabularPRM::validate() const {
    for (const auto& [key, value] : entries_)
        if (value < range_.first - 1e-12 || value > range_.second + 1e-12)
            throw std::invalid_argument("TabularPRM: entry '" + key + "' outside declared range");
}

StepTable perturb_table(const StepTable& table, const PerturbationConfig& cfg, RngStream& rng) {
    if (cfg.epsilon < 0.0) throw std::invalid_argument("perturb: epsilon must be >= 0");
    StepTable out;
    for (const auto& [key, value] : table) {
        double noise = cfg.kind == NoiseKind::UniformBounded
                           ? rng.uniform(-cfg.epsilon, cfg.epsilon)
                           : cfg.sigma * rng.normal();
        out[key] = value + noise;
    }
    return out;
}

TabularPRM perturb_prm(const TabularPRM& prm, const PerturbationConfig& cfg, RngStream& rng) {
    StepTable noisy = perturb_table(prm.entries(), cfg, rng);
    auto range = prm.reward_range();
    for (const auto& [key, value] : noisy) {
        range.first = std::min(range.first, value);
        range.second = std::max(range.second, value);
    }
    return TabularPRM(std::move(noisy), range);
}

} // namespace specs
