#include <cmath>

#include <doctest.h>

#include "specs/instance.hpp"
#include "specs/numerics.hpp"
#include "specs/oracle.hpp"

using namespace specs;

TEST_CASE("tilted_policy: zero tilt, T1 hand values, lower-bound instance") {
    ToyInstance t1 = fixtures::t1();
    TiltedPolicy zero = tilted_policy(t1.target, t1.response_reward, 0.0);
    CHECK((zero.probs - response_distribution(t1.target)).cwiseAbs().maxCoeff() <= 1e-15);

    TiltedPolicy star = tilted_policy(t1.target, t1.response_reward, 1.0);
    CHECK(std::abs(star.probs[0] - 0.5) <= 1e-12);
    CHECK(std::abs(star.probs[1] - 0.5) <= 1e-12);
    CHECK(std::abs(star.partition - 1.6) <= 1e-12);

    ToyInstance lb4 = fixtures::lb(4.0);
    TiltedPolicy lb_star = tilted_policy(lb4.target, lb4.response_reward, lb4.beta);
    CHECK(std::abs(lb_star.probs[0] - 0.5) <= 1e-12);
    CHECK(std::abs(lb_star.probs[1] - 0.5) <= 1e-12);
}

TEST_CASE("value function: boundary, T1 root, deterministic policy") {
    ToyInstance t1 = fixtures::t1();
    ValueTable v = kl_value_function(t1.target, t1.response_reward, 1.0);
    CHECK(v.at("0") == 0.0);
    CHECK(v.at("1") == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    CHECK(v.at("") == doctest::Approx(std::log(1.6)).epsilon(1e-13)); // ln(0.8*1 + 0.2*4)

    Eigen::VectorXd sure(2);
    sure << 0.0, 1.0;
    TabularPolicy forced({"0", "1"}, 1, {{"", sure}});
    ValueTable vf = kl_value_function(forced, t1.response_reward, 2.5);
    CHECK(vf.at("") == doctest::Approx(std::log(4.0)).epsilon(1e-13));

    ValueTable v0 = kl_value_function(t1.target, t1.response_reward, 0.0);
    CHECK(v0.at("") == doctest::Approx(0.2 * std::log(4.0)).epsilon(1e-13)); // plain E[r]
}

TEST_CASE("idealized PRM: two-term telescope at H=1 and exact telescoping") {
    ToyInstance t1 = fixtures::t1();
    ValueTable v = kl_value_function(t1.target, t1.response_reward, 1.0);
    AdvantageTable adv = idealized_prm(t1.target, t1.response_reward, 1.0);
    CHECK(adv.entries.at("|0") == doctest::Approx(0.0 - v.at("")).epsilon(1e-13));
    CHECK(adv.entries.at("|1") == doctest::Approx(std::log(4.0) - v.at("")).epsilon(1e-13));

    for (const ToyInstance& inst : {fixtures::t2(), fixtures::random_instance(3, 3, 42)}) {
        ValueTable values = kl_value_function(inst.target, inst.response_reward, inst.beta);
        AdvantageTable table = idealized_prm(inst.target, inst.response_reward, inst.beta);
        for (const auto& y : inst.responses()) {
            double acc = 0.0;
            std::string prefix;
            for (char c : y) {
                acc += table.entries.at(step_key(prefix, std::string(1, c)));
                prefix += c;
            }
            CHECK(std::abs(acc - (inst.reward_of(y) - values.at(""))) <= 1e-10);
        }
    }
}

TEST_CASE("idealized PRM on T2 matches a hand-rolled two-step enumeration") {
    // independent oracle: direct sums over the four responses, no recursion
    ToyInstance t2 = fixtures::t2();
    const double b = t2.beta;
    auto r = [&](const std::string& y) { return t2.reward_of(y); };
    double v0_ = std::log(0.6 * std::exp(b * r("00")) + 0.4 * std::exp(b * r("01"))) / b;
    double v1_ = std::log(0.25 * std::exp(b * r("10")) + 0.75 * std::exp(b * r("11"))) / b;
    double vroot = std::log(0.7 * std::exp(b * v0_) + 0.3 * std::exp(b * v1_)) / b;

    AdvantageTable adv = idealized_prm(t2.target, t2.response_reward, b);
    CHECK(adv.entries.at("|0") == doctest::Approx(v0_ - vroot).epsilon(1e-12));
    CHECK(adv.entries.at("|1") == doctest::Approx(v1_ - vroot).epsilon(1e-12));
    CHECK(adv.entries.at("0|1") == doctest::Approx(r("01") - v0_).epsilon(1e-12));
    CHECK(adv.entries.at("1|0") == doctest::Approx(r("10") - v1_).epsilon(1e-12));
}

TEST_CASE("product decomposition: T2, H=1, zero beta") {
    ToyInstance t2 = fixtures::t2();
    CHECK(product_decomposition_check(t2.target, t2.response_reward, t2.beta) <= 1e-10);

    ToyInstance t1 = fixtures::t1();
    CHECK(product_decomposition_check(t1.target, t1.response_reward, 1.0) <= 1e-14);
    CHECK(product_decomposition_check(t2.target, t2.response_reward, 0.0) <= 1e-12);
}

TEST_CASE("tilt function: normalization and monotone Laplace transform") {
    ToyInstance t1 = fixtures::t1();
    TiltFunction tilt = sequence_tilt(t1.draft, t1.target, t1.response_reward, 1.0);
    CHECK(tilt.laplace(0.0) == doctest::Approx(1.0).epsilon(1e-14));
    double prev = 1.0;
    for (double s : {0.1, 0.5, 1.0, 3.0, 10.0}) {
        double cur = tilt.laplace(s);
        CHECK(cur < prev);
        prev = cur;
    }
    CHECK(tilt.phi_max >= tilt.phi_min);
    CHECK((tilt.tilted() - tilted_policy(t1.target, t1.response_reward, 1.0).probs)
              .cwiseAbs()
              .maxCoeff() <= 1e-12);
}

TEST_CASE("exact SMC fixed n: identity at n=1, T1 hand enumeration, monotone TV") {
    ToyInstance t1 = fixtures::t1();
    TiltFunction tilt = sequence_tilt(t1.target, t1.target, t1.response_reward, 1.0);

    CHECK((exact_smc_fixed_n(tilt, 1) - tilt.gen_probs).cwiseAbs().maxCoeff() <= 1e-12);

    // (y0,y0) p=.64 -> y0; (y0,y1) p=.32 -> y1 w.p. 4/5; (y1,y1) p=.04 -> y1
    Eigen::VectorXd pi2 = exact_smc_fixed_n(tilt, 2);
    CHECK(pi2[0] == doctest::Approx(0.704).epsilon(1e-12));
    CHECK(pi2[1] == doctest::Approx(0.296).epsilon(1e-12));

    Eigen::VectorXd star = tilt.tilted();
    CHECK(total_variation(exact_smc_fixed_n(tilt, 64), star) <=
          total_variation(pi2, star));
}

TEST_CASE("exact SMC fixed n: enumeration guard") {
    Eigen::VectorXd gen(3), tgt(3), prm(3);
    gen << 0.3, 0.3, 0.4;
    tgt << 0.2, 0.5, 0.3;
    prm << 0.1, 0.2, 0.3;
    TiltFunction tilt = block_tilt(gen, tgt, prm, 1.0);
    CHECK_THROWS_AS(exact_smc_fixed_n(tilt, 2000, 1000), EnumerationTooLarge);
}

TEST_CASE("poisson SMC: degenerate generator gives a point mass") {
    Eigen::VectorXd gen(2), tgt(2), prm(2);
    gen << 1.0, 0.0;
    tgt << 1.0, 0.0;
    prm << 0.7, 0.2;
    TiltFunction tilt = block_tilt(gen, tgt, prm, 2.0);
    Eigen::VectorXd bar = exact_smc_poisson(tilt, 8);
    CHECK(bar[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(bar[1] == 0.0);
}

TEST_CASE("poisson SMC lower-bound margin at theta=4, n=16") {
    ToyInstance lb4 = fixtures::lb(4.0);
    TiltFunction tilt = sequence_tilt(lb4.target, lb4.target, lb4.response_reward, lb4.beta);
    Eigen::VectorXd bar = exact_smc_poisson(tilt, 16);
    CHECK(bar[0] - 0.5 >= 4.0 / (50.0 * 16.0)); // = 0.005
}

TEST_CASE("poisson SMC matches a Monte Carlo oracle on T1 at n=8") {
    ToyInstance t1 = fixtures::t1();
    TiltFunction tilt = sequence_tilt(t1.target, t1.target, t1.response_reward, 1.0);
    Eigen::VectorXd bar = exact_smc_poisson(tilt, 8);

    // MC: Poisson-truncated width, categorical draws, phi-weighted selection
    const int episodes = 1000000;
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(2);
    for (int e = 0; e < episodes; ++e) {
        RngStream width_rng = derive_stream(31, static_cast<std::uint64_t>(e),
                                            StreamPurpose::BeamWidth);
        int n = width_rng.poisson_truncated(8.0);
        RngStream draw = derive_stream(31, static_cast<std::uint64_t>(e), StreamPurpose::Candidate);
        int n1 = 0;
        for (int i = 0; i < n; ++i)
            if (draw.uniform01() >= 0.8) ++n1;
        double w0 = (n - n1) * tilt.phi[0];
        double w1 = n1 * tilt.phi[1];
        RngStream sel = derive_stream(31, static_cast<std::uint64_t>(e), StreamPurpose::Selection);
        counts[sel.uniform01() * (w0 + w1) < w0 ? 0 : 1] += 1.0;
    }
    CHECK(total_variation(counts / episodes, bar) <= 0.005);
}

TEST_CASE("poisson SMC agrees with the truncated mixture of fixed-n oracles") {
    ToyInstance t1 = fixtures::t1();
    for (const TabularPolicy* gen : {&t1.draft, &t1.target}) {
        TiltFunction tilt = sequence_tilt(*gen, t1.target, t1.response_reward, 1.0);
        for (int n : {4, 8}) {
            int n_max = n + static_cast<int>(std::ceil(10.0 * std::sqrt(n)));
            Eigen::VectorXd quad = exact_smc_poisson(tilt, n);
            Eigen::VectorXd mix = smc_poisson_mixture(tilt, n, n_max);
            CHECK(total_variation(quad, mix) <= 1e-4);
        }
    }
}

TEST_CASE("second moments: point mass, decreasing chi2, KL cross-check") {
    Eigen::VectorXd gen(2), tgt(2), prm(2);
    gen << 1.0, 0.0;
    tgt << 1.0, 0.0;
    prm << 0.3, 0.9;
    TiltFunction point = block_tilt(gen, tgt, prm, 1.0);
    SecondMomentReport point_rep = exact_smc_second_moment(point, 8);
    CHECK(std::abs(point_rep.one_plus_chi2 - 1.0) <= 1e-8);

    ToyInstance t1 = fixtures::t1();
    TiltFunction tilt = sequence_tilt(t1.target, t1.target, t1.response_reward, 1.0);
    double prev = std::numeric_limits<double>::infinity();
    for (int n : {4, 8, 16, 32}) {
        double chi2 = exact_smc_second_moment(tilt, n).one_plus_chi2 - 1.0;
        CHECK(chi2 < prev);
        CHECK(chi2 > 0.0);
        prev = chi2;
    }

    // ln(1 + E[chi2]) >= E_N[KL] assembled from the fixed-n enumeration
    double one_plus = exact_smc_second_moment(tilt, 8).one_plus_chi2;
    Eigen::VectorXd star = tilt.tilted();
    double expected_kl = 0.0;
    double pk = std::exp(-8.0);
    for (int N = 1; N <= 40; ++N) {
        pk *= 8.0 / N;
        expected_kl += pk / (1.0 - std::exp(-8.0)) * kl_divergence(exact_smc_fixed_n(tilt, N), star);
    }
    CHECK(std::log(one_plus) >= expected_kl);
}

TEST_CASE("divergences: identity, frozen T1 KL, Pinsker") {
    Eigen::VectorXd p(2), q(2);
    p << 0.704, 0.296;
    q << 0.5, 0.5;
    DivergenceReport same = divergences(p, p);
    CHECK(same.kl == 0.0);
    CHECK(same.chi2 == 0.0);
    CHECK(same.tv == 0.0);

    DivergenceReport d = divergences(p, q);
    double frozen = 0.704 * std::log(1.408) + 0.296 * std::log(0.592);
    CHECK(d.kl == doctest::Approx(frozen).epsilon(1e-14));
    CHECK(d.tv * d.tv <= d.kl / 2.0);
    CHECK(d.kl <= std::log1p(d.chi2));

    Eigen::VectorXd bad(2);
    bad << 1.0, 0.0;
    CHECK_THROWS_AS(divergences(p, bad), SupportViolation);
}

TEST_CASE("coverage coefficients: identical models, T1 ratios, support mismatch") {
    ToyInstance t1 = fixtures::t1();
    CoverageReport self = coverage_coefficients(t1.target, t1.target);
    CHECK(self.c_seq == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(self.c_block == doctest::Approx(1.0).epsilon(1e-12));

    CoverageReport cov = coverage_coefficients(t1.draft, t1.target);
    CHECK(cov.c_seq == doctest::Approx(8.0 / 3.0).epsilon(1e-12)); // (0.8/0.6)*(0.4/0.2)
    CHECK(cov.c_block == doctest::Approx(8.0 / 3.0).epsilon(1e-12));

    Eigen::VectorXd sure(2);
    sure << 1.0, 0.0;
    TabularPolicy narrow({"0", "1"}, 1, {{"", sure}});
    CoverageReport inf_cov = coverage_coefficients(narrow, t1.target);
    CHECK(std::isinf(inf_cov.c_seq));
}

TEST_CASE("kl objective: optimality gap identity and reward/beta rescaling") {
    ToyInstance t1 = fixtures::t1();
    TiltedPolicy star = tilted_policy(t1.target, t1.response_reward, 1.0);
    double l_star = kl_objective(star.probs, t1.target, t1.response_reward, 1.0);
    CHECK(l_star - kl_objective(star.probs, t1.target, t1.response_reward, 1.0) == 0.0);

    // gap at pi_target: ln 1.6 - 0.2 ln 4 = KL(pi_target || pi*)
    Eigen::VectorXd pt = response_distribution(t1.target);
    double gap = l_star - kl_objective(pt, t1.target, t1.response_reward, 1.0);
    double expect = std::log(1.6) - 0.2 * std::log(4.0);
    CHECK(gap == doctest::Approx(expect).epsilon(1e-12));
    CHECK(gap == doctest::Approx(kl_divergence(pt, star.probs)).epsilon(1e-12));

    // scaling r by c and beta by 1/c leaves pi* unchanged
    const double c = 7.3;
    ResponseReward scaled;
    for (const auto& [y, r] : t1.response_reward) scaled[y] = c * r;
    TiltedPolicy rescaled = tilted_policy(t1.target, scaled, 1.0 / c);
    CHECK((rescaled.probs - star.probs).cwiseAbs().maxCoeff() <= 1e-12);

    CHECK_THROWS_AS(kl_objective(pt, t1.target, t1.response_reward, 0.0), BetaZero);
}

TEST_CASE("misspecification bound: zero noise, uniform noise, random instance") {
    ToyInstance t2 = fixtures::t2();
    AdvantageTable adv = idealized_prm(t2.target, t2.response_reward, 2.0);
    MisspecReport zero = misspecification_bound_check(t2.target, 2.0, adv, adv);
    CHECK(zero.sup_block_log_ratio == 0.0);
    CHECK(zero.sup_response_log_ratio == 0.0);

    RngStream rng(6);
    PerturbationConfig pc{0.05, NoiseKind::UniformBounded, 0.0};
    AdvantageTable noisy;
    noisy.entries = perturb_table(adv.entries, pc, rng);
    MisspecReport rep = misspecification_bound_check(t2.target, 2.0, adv, noisy);
    CHECK(rep.epsilon <= 0.05);
    CHECK(rep.sup_block_log_ratio <= rep.block_bound + 1e-12);
    CHECK(rep.sup_response_log_ratio <= rep.response_bound + 1e-12);
    CHECK(rep.block_bound <= 2.0 * 2.0 * 0.05 + 1e-12);

    ToyInstance rnd = fixtures::random_instance(3, 3, 9);
    AdvantageTable radv = idealized_prm(rnd.target, rnd.response_reward, rnd.beta);
    RngStream rng2(7);
    AdvantageTable rnoisy;
    rnoisy.entries = perturb_table(radv.entries, PerturbationConfig{0.1, NoiseKind::UniformBounded, 0.0},
                                   rng2);
    MisspecReport rrep = misspecification_bound_check(rnd.target, rnd.beta, radv, rnoisy);
    CHECK(rrep.sup_block_log_ratio <= rrep.block_bound + 1e-12);
    CHECK(rrep.sup_response_log_ratio <= rrep.response_bound + 1e-12);
}
