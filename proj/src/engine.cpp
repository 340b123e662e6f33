#include "specs/engine.hpp"

#include <algorithm>
#include <chrono>

#include "specs/errors.hpp"

namespace specs {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<RngStream> candidate_streams(std::uint64_t seed, std::uint64_t step, int width,
                                         StreamPurpose purpose) {
    std::vector<RngStream> streams;
    streams.reserve(static_cast<std::size_t>(width));
    for (int i = 0; i < width; ++i)
        streams.push_back(derive_stream(seed, step, purpose, static_cast<std::uint64_t>(i)));
    return streams;
}

int step_width(const RunConfig& cfg, std::uint64_t step) {
    if (cfg.beam_mode == BeamMode::Fixed) return cfg.n;
    RngStream rng = derive_stream(cfg.seed, step, StreamPurpose::BeamWidth);
    return rng.poisson_truncated(static_cast<double>(cfg.n));
}

/// Best-of-n by PRM with ties broken toward the lowest index.
std::size_t argmax_prm(const std::vector<double>& prm_scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < prm_scores.size(); ++i)
        if (prm_scores[i] > prm_scores[best]) best = i;
    return best;
}

struct PrmBatch {
    std::vector<double> scores;
    double max_score;
};

PrmBatch score_prm_batch(const RewardModel& prm, const BlockTrace& trace,
                         const std::vector<Block>& blocks, StepLatency& lat) {
    PrmBatch batch;
    auto t0 = Clock::now();
    batch.scores.reserve(blocks.size());
    for (const auto& b : blocks) batch.scores.push_back(prm.score(trace, b));
    double dt = seconds_since(t0);
    lat.prm_score += dt;
    lat.wall_step += dt;
    batch.max_score = *std::max_element(batch.scores.begin(), batch.scores.end());
    return batch;
}

} // namespace

const char* MethodSpec::name() const {
    switch (kind) {
        case Kind::Specs: return "specs";
        case Kind::SpecsDraftStart: return "specs_draft_start";
        case Kind::SpecsNoLL: return "specs_no_ll";
        case Kind::BeamSearch:
            return beam_source == GenerationSource::Target ? "beam_target" : "beam_draft";
        case Kind::RsdPlusPlus: return "rsd_plus_plus";
        case Kind::RandomSwitch: return "random_switch";
        case Kind::OnlySmallGen: return "only_small_gen";
    }
    return "unknown";
}

EpisodeResult run_episode(const MethodSpec& method, const std::string& prompt,
                          const GeneratorModel& draft, const GeneratorModel& target,
                          const RewardModel& prm, const RunConfig& cfg,
                          const ExecutionOptions& exec) {
    cfg.validate();
    using Kind = MethodSpec::Kind;

    EpisodeResult result;
    result.trace.prompt = prompt;

    // current generator for the switch-based methods
    GenerationSource gen_source = GenerationSource::Target;
    if (method.kind == Kind::SpecsDraftStart || method.kind == Kind::OnlySmallGen)
        gen_source = GenerationSource::Draft;
    if (method.kind == Kind::BeamSearch) gen_source = method.beam_source;
    bool switched = false;

    const ScoreMode mode =
        method.kind == Kind::SpecsNoLL ? ScoreMode::RewardOnly : ScoreMode::Full;

    for (std::uint64_t step = 0; !is_complete(result.trace, cfg); ++step) {
        const int width = step_width(cfg, step);
        StepLatency lat;
        // wall_step accumulates the model-facing phase spans of the step;
        // selection arithmetic and trace bookkeeping stay outside it (but
        // inside the episode wall time)
        if (method.kind == Kind::BeamSearch || method.kind == Kind::RsdPlusPlus) {
            // hard best-of-n selection; only the PRM is consulted
            const bool rsd = method.kind == Kind::RsdPlusPlus;
            const GenerationSource first_source =
                rsd ? GenerationSource::Draft : method.beam_source;
            const GeneratorModel& first_model =
                first_source == GenerationSource::Target ? target : draft;

            auto streams = candidate_streams(cfg.seed, step, width, StreamPurpose::Candidate);
            auto t0 = Clock::now();
            std::vector<Block> blocks = first_model.sample_block_batch(
                result.trace, width, cfg.gamma, std::span<RngStream>(streams));
            double dt = seconds_since(t0);
            (first_source == GenerationSource::Target ? lat.target_generate
                                                      : lat.draft_generate) += dt;
            lat.wall_step += dt;

            PrmBatch batch = score_prm_batch(prm, result.trace, blocks, lat);
            std::size_t best = argmax_prm(batch.scores);
            GenerationSource chosen_source = first_source;
            Block chosen = blocks[best];
            std::vector<double> step_scores = batch.scores;

            // deferral: the draft block survives only at or above threshold
            if (rsd && batch.scores[best] < cfg.rsd_threshold) {
                auto redraw =
                    candidate_streams(cfg.seed, step, width, StreamPurpose::TargetRedraw);
                auto t1 = Clock::now();
                std::vector<Block> target_blocks = target.sample_block_batch(
                    result.trace, width, cfg.gamma, std::span<RngStream>(redraw));
                double redraw_dt = seconds_since(t1);
                lat.target_generate += redraw_dt;
                lat.wall_step += redraw_dt;
                PrmBatch target_batch = score_prm_batch(prm, result.trace, target_blocks, lat);
                std::size_t tbest = argmax_prm(target_batch.scores);
                chosen = target_blocks[tbest];
                chosen_source = GenerationSource::Target;
                step_scores.insert(step_scores.end(), target_batch.scores.begin(),
                                   target_batch.scores.end());
            }

            result.trace = append_block(result.trace, chosen, chosen_source);
            result.selected_scores.push_back(std::move(step_scores));
            result.per_step_latency.push_back(lat);
            continue;
        }

        // soft-selection methods
        GenerationSource source = gen_source;
        if (method.kind == Kind::RandomSwitch) {
            RngStream sw = derive_stream(cfg.seed, step, StreamPurpose::Switch);
            source = sw.uniform01() < method.p_big ? GenerationSource::Target
                                                   : GenerationSource::Draft;
        }
        const GeneratorModel& gen_model =
            source == GenerationSource::Target ? target : draft;

        auto streams = candidate_streams(cfg.seed, step, width, StreamPurpose::Candidate);
        auto t0 = Clock::now();
        std::vector<Block> blocks = gen_model.sample_block_batch(
            result.trace, width, cfg.gamma, std::span<RngStream>(streams));
        double gen_dt = seconds_since(t0);
        (source == GenerationSource::Target ? lat.target_generate : lat.draft_generate) += gen_dt;
        lat.wall_step += gen_dt;

        ScoringOptions opts;
        opts.threads = exec.scoring_threads;
        opts.latency = &lat;
        opts.scoring_wall = &lat.wall_step;
        CandidateSet set =
            compute_scores(result.trace, blocks, gen_model, target, prm, cfg.beta, mode, opts);

        RngStream sel = derive_stream(cfg.seed, step, StreamPurpose::Selection);
        SelectionOutcome outcome = subsample(set, sel);

        result.trace = append_block(result.trace,
                                    set.candidates[static_cast<std::size_t>(outcome.chosen_index)].block,
                                    source);
        std::vector<double> step_scores(set.candidates.size());
        for (std::size_t i = 0; i < set.candidates.size(); ++i)
            step_scores[i] = set.candidates[i].score;
        result.selected_scores.push_back(std::move(step_scores));
        result.per_step_latency.push_back(lat);

        // Step III: one-way dynamic switching on the max candidate PRM score
        if (!switched) {
            if ((method.kind == Kind::Specs || method.kind == Kind::SpecsNoLL) &&
                gen_source == GenerationSource::Target && outcome.max_prm > cfg.tau) {
                gen_source = GenerationSource::Draft;
                switched = true;
            } else if (method.kind == Kind::SpecsDraftStart &&
                       gen_source == GenerationSource::Draft && !(outcome.max_prm > cfg.tau)) {
                gen_source = GenerationSource::Target;
                switched = true;
            }
        }
    }

    result.percent_big = percent_big_of(result.trace);
    return result;
}

EpisodeResult run_specs(const std::string& prompt, const GeneratorModel& draft,
                        const GeneratorModel& target, const RewardModel& prm,
                        const RunConfig& cfg, const ExecutionOptions& exec) {
    return run_episode(MethodSpec::specs(), prompt, draft, target, prm, cfg, exec);
}

EpisodeResult run_beam_search(const std::string& prompt, const GeneratorModel& model,
                              const RewardModel& prm, const RunConfig& cfg,
                              GenerationSource source_tag, const ExecutionOptions& exec) {
    MethodSpec m = MethodSpec::beam_search(source_tag);
    // the single beam model plays both roles; the source tag records which it is
    return run_episode(m, prompt, model, model, prm, cfg, exec);
}

EpisodeResult run_rsd_plus_plus(const std::string& prompt, const GeneratorModel& draft,
                                const GeneratorModel& target, const RewardModel& prm,
                                const RunConfig& cfg, const ExecutionOptions& exec) {
    return run_episode(MethodSpec::rsd_plus_plus(), prompt, draft, target, prm, cfg, exec);
}

EpisodeResult run_variant(const MethodSpec& method, const std::string& prompt,
                          const GeneratorModel& draft, const GeneratorModel& target,
                          const RewardModel& prm, const RunConfig& cfg,
                          const ExecutionOptions& exec) {
    return run_episode(method, prompt, draft, target, prm, cfg, exec);
}

} // namespace specs
