#include "specs/selection.hpp"

#include <chrono>
#include <cmath>
#include <future>

#include "specs/errors.hpp"
#include "specs/numerics.hpp"

namespace specs {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

} // namespace

CandidateSet compute_scores(const BlockTrace& context, const std::vector<Block>& blocks,
                            const GeneratorModel& gen, const GeneratorModel& target,
                            const RewardModel& prm, double beta,
                            ScoreMode mode, const ScoringOptions& opts) {
    if (blocks.empty()) throw EmptyCandidateSet("compute_scores: no candidate blocks");

    const bool gen_is_target = (&gen == &target);
    const std::size_t n = blocks.size();

    CandidateSet set;
    set.context = context;
    set.generator = gen_is_target ? GenerationSource::Target : GenerationSource::Draft;
    set.beta = beta;
    set.candidates.resize(n);
    for (std::size_t i = 0; i < n; ++i) set.candidates[i].block = blocks[i];

    const bool need_target_pass = (mode == ScoreMode::Full) && !gen_is_target;

    // the scoring wall spans the model-facing phases only; set construction
    // above and score assembly below are engine bookkeeping
    auto span0 = Clock::now();

    // Generator log-probabilities come with generation (sampled-token logprobs
    // for remote models, a table lookup here), so their cost is attributed to
    // the generate component.
    {
        auto t0 = Clock::now();
        for (std::size_t i = 0; i < n; ++i)
            set.candidates[i].logp_gen = gen.block_logprob(context, blocks[i]);
        if (opts.latency) {
            double dt = seconds_since(t0);
            if (gen_is_target)
                opts.latency->target_generate += dt;
            else
                opts.latency->draft_generate += dt;
        }
    }

    if (opts.threads > 1) {
        // Target scoring and PRM scoring fan out concurrently per candidate
        // and land in indexed slots; totals are per-call durations summed.
        std::vector<double> tgt_time(n, 0.0), prm_time(n, 0.0);
        std::vector<std::future<void>> tasks;
        tasks.reserve(2 * n);
        for (std::size_t i = 0; i < n; ++i) {
            if (need_target_pass)
                tasks.push_back(std::async(std::launch::async, [&, i] {
                    auto t0 = Clock::now();
                    set.candidates[i].logp_target = target.block_logprob(context, blocks[i]);
                    tgt_time[i] = seconds_since(t0);
                }));
            tasks.push_back(std::async(std::launch::async, [&, i] {
                auto t0 = Clock::now();
                set.candidates[i].prm_score = prm.score(context, blocks[i]);
                prm_time[i] = seconds_since(t0);
            }));
        }
        for (auto& t : tasks) t.get();
        if (opts.latency)
            for (std::size_t i = 0; i < n; ++i) {
                opts.latency->target_score += tgt_time[i];
                opts.latency->prm_score += prm_time[i];
            }
    } else {
        if (need_target_pass) {
            auto t0 = Clock::now();
            for (std::size_t i = 0; i < n; ++i)
                set.candidates[i].logp_target = target.block_logprob(context, blocks[i]);
            if (opts.latency) opts.latency->target_score += seconds_since(t0);
        }
        auto t0 = Clock::now();
        for (std::size_t i = 0; i < n; ++i)
            set.candidates[i].prm_score = prm.score(context, blocks[i]);
        if (opts.latency) opts.latency->prm_score += seconds_since(t0);
    }

    if (opts.scoring_wall) *opts.scoring_wall += seconds_since(span0);

    for (std::size_t i = 0; i < n; ++i) {
        ScoredCandidate& c = set.candidates[i];
        if (!need_target_pass) c.logp_target = c.logp_gen;
        if (mode == ScoreMode::RewardOnly) {
            c.score = beta * c.prm_score;
        } else {
            double ratio = c.logp_target - c.logp_gen;
            if (std::isinf(c.logp_target) && std::isinf(c.logp_gen)) ratio = 0.0;
            c.score = ratio + beta * c.prm_score;
        }
    }
    return set;
}

Eigen::VectorXd selection_distribution(const CandidateSet& set) {
    if (set.candidates.empty()) throw EmptyCandidateSet("selection_distribution: empty set");
    return softmax_logs(set.scores());
}

SelectionOutcome subsample(const CandidateSet& set, RngStream& rng) {
    if (set.candidates.empty()) throw EmptyCandidateSet("subsample: empty set");
    SelectionOutcome out;
    out.selection_probabilities = selection_distribution(set);
    out.chosen_index = rng.categorical(out.selection_probabilities);
    out.max_prm = set.candidates.front().prm_score;
    for (const auto& c : set.candidates) out.max_prm = std::max(out.max_prm, c.prm_score);
    return out;
}

} // namespace specs
