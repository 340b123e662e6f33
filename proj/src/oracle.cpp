#include "specs/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "specs/errors.hpp"
#include "specs/numerics.hpp"
#include "specs/quadrature.hpp"

namespace specs {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

double reward_at(const ResponseReward& reward, const std::string& response) {
    auto it = reward.find(response);
    if (it == reward.end())
        throw InvalidPrefix("oracle: no reward for response '" + response + "'");
    return it->second;
}
} // namespace

std::vector<std::string> enumerate_responses(const TabularPolicy& policy) {
    std::vector<std::string> out{""};
    for (int d = 0; d < policy.horizon(); ++d) {
        std::vector<std::string> next;
        next.reserve(out.size() * policy.alphabet().size());
        for (const auto& p : out)
            for (const auto& s : policy.alphabet()) next.push_back(p + s);
        out = std::move(next);
    }
    return out;
}

std::vector<std::string> enumerate_prefixes(const TabularPolicy& policy) {
    std::vector<std::string> out{""};
    std::vector<std::string> layer{""};
    for (int d = 1; d < policy.horizon(); ++d) {
        std::vector<std::string> next;
        for (const auto& p : layer)
            for (const auto& s : policy.alphabet()) next.push_back(p + s);
        out.insert(out.end(), next.begin(), next.end());
        layer = std::move(next);
    }
    return out;
}

Eigen::VectorXd response_distribution(const TabularPolicy& policy) {
    auto responses = enumerate_responses(policy);
    Eigen::VectorXd out(static_cast<Eigen::Index>(responses.size()));
    for (std::size_t i = 0; i < responses.size(); ++i)
        out[static_cast<Eigen::Index>(i)] = policy.path_probability(responses[i]);
    return out;
}

double ValueTable::at(const std::string& prefix) const {
    auto it = values.find(prefix);
    if (it == values.end()) throw InvalidPrefix("ValueTable: no value for prefix '" + prefix + "'");
    return it->second;
}

double AdvantageTable::sup_distance(const AdvantageTable& other) const {
    double sup = 0.0;
    for (const auto& [key, value] : entries) {
        auto it = other.entries.find(key);
        if (it == other.entries.end())
            throw InvalidPrefix("AdvantageTable: mismatched key '" + key + "'");
        sup = std::max(sup, std::abs(value - it->second));
    }
    return sup;
}

TabularPRM AdvantageTable::as_prm() const {
    double lo = kInf, hi = -kInf;
    for (const auto& [key, value] : entries) {
        lo = std::min(lo, value);
        hi = std::max(hi, value);
    }
    if (entries.empty()) lo = hi = 0.0;
    return TabularPRM(entries, {lo, hi});
}

TiltedPolicy tilted_policy(const TabularPolicy& target, const ResponseReward& reward, double beta) {
    if (beta < 0) throw std::invalid_argument("tilted_policy: beta must be >= 0");
    TiltedPolicy out;
    out.responses = enumerate_responses(target);
    const auto n = static_cast<Eigen::Index>(out.responses.size());
    Eigen::VectorXd logits(n);
    bool any_support = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        double p = target.path_probability(out.responses[static_cast<std::size_t>(i)]);
        if (p > 0.0) {
            any_support = true;
            logits[i] = std::log(p) + beta * reward_at(reward, out.responses[static_cast<std::size_t>(i)]);
        } else {
            logits[i] = kNegInf;
        }
    }
    if (!any_support) throw DegenerateSupport("tilted_policy: target has zero mass everywhere");
    out.log_partition = log_sum_exp(logits);
    out.partition = std::exp(out.log_partition);
    out.probs = softmax_logs(logits);
    return out;
}

ValueTable kl_value_function(const TabularPolicy& policy, const ResponseReward& reward, double beta) {
    if (beta < 0) throw BetaZero("kl_value_function: beta must be >= 0");
    ValueTable table;
    table.beta = beta;
    // boundary: full responses carry their reward
    for (const auto& y : enumerate_responses(policy)) table.values[y] = reward_at(reward, y);
    // backward induction over prefix depth
    auto prefixes = enumerate_prefixes(policy);
    std::stable_sort(prefixes.begin(), prefixes.end(),
                     [](const auto& a, const auto& b) { return a.size() > b.size(); });
    const auto& alphabet = policy.alphabet();
    for (const auto& prefix : prefixes) {
        const Eigen::VectorXd& row = policy.row(prefix);
        if (beta == 0.0) {
            double v = 0.0;
            for (std::size_t i = 0; i < alphabet.size(); ++i)
                if (row[static_cast<Eigen::Index>(i)] > 0.0)
                    v += row[static_cast<Eigen::Index>(i)] * table.at(prefix + alphabet[i]);
            table.values[prefix] = v;
        } else {
            Eigen::VectorXd logs(row.size());
            for (std::size_t i = 0; i < alphabet.size(); ++i) {
                double p = row[static_cast<Eigen::Index>(i)];
                logs[static_cast<Eigen::Index>(i)] =
                    p > 0.0 ? std::log(p) + beta * table.at(prefix + alphabet[i]) : kNegInf;
            }
            table.values[prefix] = log_sum_exp(logs) / beta;
        }
    }
    return table;
}

AdvantageTable idealized_prm(const TabularPolicy& target, const ResponseReward& reward, double beta) {
    ValueTable values = kl_value_function(target, reward, beta);
    AdvantageTable adv;
    for (const auto& prefix : enumerate_prefixes(target))
        for (const auto& s : target.alphabet())
            adv.entries[step_key(prefix, s)] = values.at(prefix + s) - values.at(prefix);
    return adv;
}

namespace {

/// log pi*(b | prefix) for a per-block tilt of `target` by beta * step_score.
Eigen::VectorXd block_tilt_logprobs(const TabularPolicy& target, const std::string& prefix,
                                    const StepTable& step_scores, double beta) {
    const auto& alphabet = target.alphabet();
    const Eigen::VectorXd& row = target.row(prefix);
    Eigen::VectorXd logits(row.size());
    for (std::size_t i = 0; i < alphabet.size(); ++i) {
        double p = row[static_cast<Eigen::Index>(i)];
        if (p <= 0.0) {
            logits[static_cast<Eigen::Index>(i)] = kNegInf;
            continue;
        }
        auto it = step_scores.find(step_key(prefix, alphabet[i]));
        if (it == step_scores.end())
            throw InvalidPrefix("block tilt: no step score for '" + step_key(prefix, alphabet[i]) + "'");
        logits[static_cast<Eigen::Index>(i)] = std::log(p) + beta * it->second;
    }
    double lse = log_sum_exp(logits);
    return logits.array() - lse;
}

} // namespace

double product_decomposition_check(const TabularPolicy& target, const ResponseReward& reward,
                                   double beta) {
    TiltedPolicy full = tilted_policy(target, reward, beta);
    AdvantageTable adv = idealized_prm(target, reward, beta);

    std::map<std::string, Eigen::VectorXd> block_logs;
    for (const auto& prefix : enumerate_prefixes(target))
        block_logs[prefix] = block_tilt_logprobs(target, prefix, adv.entries, beta);

    double max_err = 0.0;
    for (std::size_t i = 0; i < full.responses.size(); ++i) {
        const std::string& y = full.responses[i];
        double log_prod = 0.0;
        std::string prefix;
        for (char c : y) {
            std::string sym(1, c);
            int idx = target.symbol_index(sym);
            log_prod += block_logs.at(prefix)[idx];
            prefix += sym;
        }
        double prod = std::isfinite(log_prod) ? std::exp(log_prod) : 0.0;
        max_err = std::max(max_err, std::abs(full.probs[static_cast<Eigen::Index>(i)] - prod));
    }
    return max_err;
}

double TiltFunction::laplace(double s) const {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < gen_probs.size(); ++i)
        if (gen_probs[i] > 0.0) acc += gen_probs[i] * std::exp(-s * phi[i]);
    return acc;
}

double TiltFunction::laplace_neg_deriv(double s) const {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < gen_probs.size(); ++i)
        if (gen_probs[i] > 0.0) acc += gen_probs[i] * phi[i] * std::exp(-s * phi[i]);
    return acc;
}

Eigen::VectorXd TiltFunction::tilted() const {
    Eigen::VectorXd out = gen_probs.cwiseProduct(phi);
    double z = out.sum();
    if (z <= 0.0) throw DegenerateSupport("TiltFunction: zero partition");
    return out / z;
}

namespace {

TiltFunction make_tilt(Eigen::VectorXd gen, Eigen::VectorXd numer_logits) {
    // numer_logits[i] = log(pi_target) + beta*r; phi = exp(numer - log gen)
    TiltFunction t;
    t.gen_probs = std::move(gen);
    t.phi = Eigen::VectorXd::Zero(t.gen_probs.size());
    t.phi_max = 0.0;
    t.phi_min = kInf;
    for (Eigen::Index i = 0; i < t.gen_probs.size(); ++i) {
        if (t.gen_probs[i] > 0.0) {
            t.phi[i] = std::exp(numer_logits[i] - std::log(t.gen_probs[i]));
            t.phi_max = std::max(t.phi_max, t.phi[i]);
            t.phi_min = std::min(t.phi_min, t.phi[i]);
        } else if (std::isfinite(numer_logits[i])) {
            throw DegenerateSupport("tilt: target mass outside generator support");
        }
    }
    if (!std::isfinite(t.phi_min)) throw DegenerateSupport("tilt: empty generator support");
    return t;
}

} // namespace

TiltFunction sequence_tilt(const TabularPolicy& gen, const TabularPolicy& target,
                           const ResponseReward& reward, double beta) {
    auto responses = enumerate_responses(target);
    const auto n = static_cast<Eigen::Index>(responses.size());
    Eigen::VectorXd g(n), numer(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const std::string& y = responses[static_cast<std::size_t>(i)];
        g[i] = gen.path_probability(y);
        double p = target.path_probability(y);
        numer[i] = p > 0.0 ? std::log(p) + beta * reward_at(reward, y) : kNegInf;
    }
    return make_tilt(std::move(g), std::move(numer));
}

TiltFunction block_tilt(const Eigen::Ref<const Eigen::VectorXd>& gen_row,
                        const Eigen::Ref<const Eigen::VectorXd>& target_row,
                        const Eigen::Ref<const Eigen::VectorXd>& prm_row, double beta) {
    Eigen::VectorXd numer(target_row.size());
    for (Eigen::Index i = 0; i < target_row.size(); ++i)
        numer[i] = target_row[i] > 0.0 ? std::log(target_row[i]) + beta * prm_row[i] : kNegInf;
    return make_tilt(gen_row, std::move(numer));
}

Eigen::VectorXd exact_smc_fixed_n(const TiltFunction& tilt, int n, std::size_t multiset_guard) {
    if (n < 1) throw std::invalid_argument("exact_smc_fixed_n: n must be >= 1");
    std::vector<Eigen::Index> support;
    for (Eigen::Index i = 0; i < tilt.gen_probs.size(); ++i)
        if (tilt.gen_probs[i] > 0.0) support.push_back(i);
    const std::size_t k = support.size();

    // multiset count C(n+k-1, k-1)
    double count = 1.0;
    for (std::size_t j = 1; j < k; ++j) count *= static_cast<double>(n + j) / static_cast<double>(j);
    if (count > static_cast<double>(multiset_guard))
        throw EnumerationTooLarge("exact_smc_fixed_n: " + std::to_string(count) +
                                  " multisets exceeds guard");

    Eigen::VectorXd out = Eigen::VectorXd::Zero(tilt.gen_probs.size());
    std::vector<int> counts(k, 0);
    const double lgn = std::lgamma(static_cast<double>(n) + 1.0);

    std::function<void(std::size_t, int)> recurse = [&](std::size_t pos, int remaining) {
        if (pos + 1 == k) {
            counts[pos] = remaining;
            double logw = lgn;
            double denom = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                if (counts[j] > 0)
                    logw += counts[j] * std::log(tilt.gen_probs[support[j]]) -
                            std::lgamma(static_cast<double>(counts[j]) + 1.0);
                denom += counts[j] * tilt.phi[support[j]];
            }
            double w = std::exp(logw);
            if (w > 0.0 && denom > 0.0)
                for (std::size_t j = 0; j < k; ++j)
                    if (counts[j] > 0)
                        out[support[j]] += w * counts[j] * tilt.phi[support[j]] / denom;
            return;
        }
        for (int c = 0; c <= remaining; ++c) {
            counts[pos] = c;
            recurse(pos + 1, remaining - c);
        }
    };
    recurse(0, n);
    return out;
}

namespace {

double poisson_tail_cut(double prefactor, double rate, double floor_tol = 1e-13) {
    // S with prefactor * e^{-S*rate} / rate < floor_tol
    double s = std::log(std::max(prefactor, 1.0) / (rate * floor_tol)) / rate;
    return std::max(s, 1.0);
}

} // namespace

Eigen::VectorXd exact_smc_poisson(const TiltFunction& tilt, double n, double abs_tol) {
    if (n < 1) throw std::invalid_argument("exact_smc_poisson: n must be >= 1");
    const double trunc = 1.0 - std::exp(-n);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(tilt.gen_probs.size());
    for (Eigen::Index i = 0; i < tilt.gen_probs.size(); ++i) {
        if (tilt.gen_probs[i] <= 0.0) continue;
        const double phi_y = tilt.phi[i];
        const double pref = n * tilt.gen_probs[i] * phi_y / trunc;
        const double s_max = poisson_tail_cut(pref, phi_y);
        auto integrand = [&](double s) {
            return pref * std::exp(n * (tilt.laplace(s) - 1.0) - s * phi_y);
        };
        out[i] = integrate_adaptive(integrand, 0.0, s_max, abs_tol).value;
    }
    return out;
}

SecondMomentReport exact_smc_second_moment(const TiltFunction& tilt, double n, double abs_tol) {
    if (n < 1) throw std::invalid_argument("exact_smc_second_moment: n must be >= 1");
    const double trunc = 1.0 - std::exp(-n);
    SecondMomentReport report;
    report.second_moments = Eigen::VectorXd::Zero(tilt.gen_probs.size());
    Eigen::VectorXd pi_star = tilt.tilted();

    for (Eigen::Index i = 0; i < tilt.gen_probs.size(); ++i) {
        if (tilt.gen_probs[i] <= 0.0) continue;
        const double phi_y = tilt.phi[i];
        const double g_y = tilt.gen_probs[i];
        const double pref = phi_y * phi_y * g_y * g_y / trunc;
        const double s_max = poisson_tail_cut(pref * n * (n + 1.0), phi_y);
        auto integrand = [&](double s1, double s2) {
            const double l1 = tilt.laplace(s1);
            const double l2 = tilt.laplace(s2);
            return pref * (n + n * n * l1 * l2) *
                   std::exp(n * (l1 * l2 - 1.0) - (s1 + s2) * phi_y);
        };
        report.second_moments[i] =
            integrate_adaptive_2d(integrand, 0.0, s_max, 0.0, s_max, abs_tol).value;
    }

    double sum = 0.0;
    for (Eigen::Index i = 0; i < pi_star.size(); ++i)
        if (pi_star[i] > 0.0) sum += report.second_moments[i] / pi_star[i];
    report.one_plus_chi2 = sum;
    return report;
}

Eigen::VectorXd smc_poisson_mixture(const TiltFunction& tilt, double n, int n_max,
                                    std::size_t multiset_guard) {
    const double trunc = 1.0 - std::exp(-n);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(tilt.gen_probs.size());
    double pk = std::exp(-n); // P(N = 0)
    for (int N = 1; N <= n_max; ++N) {
        pk *= n / N;
        out += (pk / trunc) * exact_smc_fixed_n(tilt, N, multiset_guard);
    }
    return out;
}

DivergenceReport divergences(const Eigen::Ref<const Eigen::VectorXd>& p,
                             const Eigen::Ref<const Eigen::VectorXd>& q) {
    DivergenceReport r;
    r.kl = kl_divergence(p, q);
    r.chi2 = chi2_divergence(p, q);
    r.tv = total_variation(p, q);
    return r;
}

CoverageReport coverage_coefficients(const TabularPolicy& draft, const TabularPolicy& target) {
    CoverageReport report;

    auto ratio_bound = [](double num, double den) {
        if (num <= 0.0) return 0.0;
        if (den <= 0.0) return kInf;
        return num / den;
    };

    double max_t_over_d = 0.0, max_d_over_t = 0.0;
    for (const auto& y : enumerate_responses(target)) {
        double pt = target.path_probability(y);
        double pd = draft.path_probability(y);
        if (pt == 0.0 && pd == 0.0) continue;
        max_t_over_d = std::max(max_t_over_d, ratio_bound(pt, pd));
        max_d_over_t = std::max(max_d_over_t, ratio_bound(pd, pt));
    }
    report.c_seq = max_t_over_d * max_d_over_t;

    report.c_block = 1.0;
    for (const auto& prefix : enumerate_prefixes(target)) {
        if (target.path_probability(prefix) == 0.0 && draft.path_probability(prefix) == 0.0)
            continue;
        const Eigen::VectorXd& t_row = target.row(prefix);
        const Eigen::VectorXd& d_row = draft.row(prefix);
        double m1 = 0.0, m2 = 0.0;
        for (Eigen::Index i = 0; i < t_row.size(); ++i) {
            if (t_row[i] == 0.0 && d_row[i] == 0.0) continue;
            m1 = std::max(m1, ratio_bound(t_row[i], d_row[i]));
            m2 = std::max(m2, ratio_bound(d_row[i], t_row[i]));
        }
        report.c_block = std::max(report.c_block, m1 * m2);
    }
    return report;
}

double kl_objective(const Eigen::Ref<const Eigen::VectorXd>& pi, const TabularPolicy& target,
                    const ResponseReward& reward, double beta) {
    if (beta <= 0.0) throw BetaZero("kl_objective: beta must be > 0");
    auto responses = enumerate_responses(target);
    Eigen::VectorXd target_probs = response_distribution(target);
    double expected_reward = 0.0;
    for (std::size_t i = 0; i < responses.size(); ++i)
        expected_reward += pi[static_cast<Eigen::Index>(i)] * reward_at(reward, responses[i]);
    return expected_reward - kl_divergence(pi, target_probs) / beta;
}

MisspecReport misspecification_bound_check(const TabularPolicy& target, double beta,
                                           const AdvantageTable& prm_exact,
                                           const AdvantageTable& prm_noisy) {
    MisspecReport report;
    report.epsilon = prm_exact.sup_distance(prm_noisy);
    report.block_bound = 2.0 * beta * report.epsilon;
    report.response_bound = report.block_bound * target.horizon();

    std::map<std::string, Eigen::VectorXd> delta; // log pi*_exact - log pi*_noisy per prefix
    for (const auto& prefix : enumerate_prefixes(target)) {
        Eigen::VectorXd le = block_tilt_logprobs(target, prefix, prm_exact.entries, beta);
        Eigen::VectorXd ln = block_tilt_logprobs(target, prefix, prm_noisy.entries, beta);
        Eigen::VectorXd d = le - ln;
        const Eigen::VectorXd& row = target.row(prefix);
        for (Eigen::Index i = 0; i < d.size(); ++i) {
            if (row[i] <= 0.0) {
                d[i] = 0.0;
                continue;
            }
            report.sup_block_log_ratio = std::max(report.sup_block_log_ratio, std::abs(d[i]));
        }
        delta[prefix] = d;
    }

    for (const auto& y : enumerate_responses(target)) {
        if (target.path_probability(y) <= 0.0) continue;
        double acc = 0.0;
        std::string prefix;
        for (char c : y) {
            std::string sym(1, c);
            acc += delta.at(prefix)[target.symbol_index(sym)];
            prefix += sym;
        }
        report.sup_response_log_ratio = std::max(report.sup_response_log_ratio, std::abs(acc));
    }
    return report;
}

} // namespace specs
