#include "specs/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <regex>
#include <thread>

#include "specs/errors.hpp"

namespace specs {

using nlohmann::json;
using nlohmann::ordered_json;

Dataset load_dataset_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigParse("dataset not readable: " + path);
    Dataset ds;
    ds.name = std::filesystem::path(path).stem().string();
    std::string line;
    std::size_t idx = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ConfigParse("dataset '" + path + "' line " + std::to_string(idx + 1) + ": " +
                              e.what());
        }
        DatasetRecord rec;
        rec.id = j.value("id", std::to_string(idx));
        rec.prompt = j.at("prompt").get<std::string>();
        if (rec.prompt.empty())
            throw ConfigParse("dataset '" + path + "': empty prompt at line " +
                              std::to_string(idx + 1));
        if (j.contains("answer") && !j.at("answer").is_null())
            rec.answer = j.at("answer").get<std::string>();
        ds.records.push_back(std::move(rec));
        ++idx;
    }
    return ds;
}

namespace {

MethodConfig parse_method(const json& j) {
    std::string name;
    json params = json::object();
    if (j.is_string()) {
        name = j.get<std::string>();
    } else if (j.is_object()) {
        name = j.at("method").get<std::string>();
        params = j;
    } else {
        throw ConfigParse("method entries must be strings or objects");
    }
    MethodConfig mc;
    if (name == "specs") mc.spec = MethodSpec::specs();
    else if (name == "specs_draft_start") mc.spec = MethodSpec::specs_draft_start();
    else if (name == "specs_no_ll") mc.spec = MethodSpec::specs_no_ll();
    else if (name == "beam_target") mc.spec = MethodSpec::beam_search(GenerationSource::Target);
    else if (name == "beam_draft") mc.spec = MethodSpec::beam_search(GenerationSource::Draft);
    else if (name == "beam_search")
        mc.spec = MethodSpec::beam_search(params.value("source", "target") == "draft"
                                              ? GenerationSource::Draft
                                              : GenerationSource::Target);
    else if (name == "rsd_plus_plus" || name == "rsd++") mc.spec = MethodSpec::rsd_plus_plus();
    else if (name == "only_small_gen") mc.spec = MethodSpec::only_small_gen();
    else if (name == "random_switch") {
        if (params.contains("p_big")) {
            mc.spec = MethodSpec::random_switch(params.at("p_big").get<double>());
            mc.p_big_explicit = true;
        } else {
            mc.spec = MethodSpec::random_switch(0.5); // filled from the matched specs run
            mc.p_big_explicit = false;
        }
    } else {
        throw ConfigParse("unknown method '" + name + "'");
    }
    mc.label = params.is_object() ? params.value("label", mc.spec.name()) : mc.spec.name();
    return mc;
}

EndpointConfig parse_endpoint(const json& j) {
    EndpointConfig e;
    e.base_url = j.at("base_url").get<std::string>();
    e.model = j.value("model", "");
    e.api_key_env = j.value("api_key_env", "");
    e.timeout_seconds = j.value("timeout_seconds", 30.0);
    e.max_retries = j.value("max_retries", 2);
    e.echo_logprobs = j.value("echo_logprobs", true);
    e.validate();
    return e;
}

} // namespace

ExperimentConfig parse_experiment_config(const json& j) {
    try {
        ExperimentConfig cfg;
        cfg.name = j.value("name", "experiment");
        if (j.contains("instance")) cfg.instance_path = j.at("instance").get<std::string>();
        if (j.contains("dataset")) cfg.dataset_path = j.at("dataset").get<std::string>();
        if (j.contains("models")) {
            const json& m = j.at("models");
            if (m.contains("draft")) cfg.draft_endpoint = parse_endpoint(m.at("draft"));
            if (m.contains("target")) cfg.target_endpoint = parse_endpoint(m.at("target"));
            if (m.contains("prm")) cfg.prm_endpoint = parse_endpoint(m.at("prm"));
        }

        if (!j.contains("methods") || j.at("methods").empty())
            throw ConfigParse("config needs a non-empty 'methods' list");
        for (const auto& mj : j.at("methods")) cfg.methods.push_back(parse_method(mj));
        bool has_specs = false;
        for (const auto& m : cfg.methods)
            if (m.spec.kind == MethodSpec::Kind::Specs) has_specs = true;
        for (const auto& m : cfg.methods)
            if (m.spec.kind == MethodSpec::Kind::RandomSwitch && !m.p_big_explicit && !has_specs)
                throw ConfigParse("random_switch without p_big needs a specs method to match");
        for (std::size_t a = 0; a < cfg.methods.size(); ++a)
            for (std::size_t b = a + 1; b < cfg.methods.size(); ++b)
                if (cfg.methods[a].label == cfg.methods[b].label)
                    throw ConfigParse("duplicate method label '" + cfg.methods[a].label + "'");

        if (j.contains("run")) {
            const json& r = j.at("run");
            cfg.run.n = r.value("n", cfg.run.n);
            cfg.run.gamma = r.value("gamma", cfg.run.gamma);
            cfg.run.tau = r.value("tau", cfg.run.tau);
            if (r.contains("beta")) {
                cfg.run.beta = r.at("beta").get<double>();
                cfg.beta_set = true;
            }
            cfg.run.horizon = r.value("horizon", cfg.run.horizon);
            cfg.run.token_budget = r.value("token_budget", cfg.run.token_budget);
            std::string mode = r.value("beam_mode", "fixed");
            if (mode == "fixed") cfg.run.beam_mode = BeamMode::Fixed;
            else if (mode == "poisson") cfg.run.beam_mode = BeamMode::PoissonTruncated;
            else throw ConfigParse("beam_mode must be 'fixed' or 'poisson'");
            cfg.run.rsd_threshold = r.value("rsd_threshold", cfg.run.rsd_threshold);
        }
        if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (cfg.seeds.empty()) throw ConfigParse("seeds must be non-empty");
        cfg.output_dir = j.value("output_dir", cfg.output_dir);
        cfg.workers = j.value("workers", 1);
        cfg.scoring_threads = j.value("scoring_threads", 1);
        if (cfg.workers < 1) throw ConfigParse("workers must be >= 1");

        const bool toy = cfg.instance_path.has_value();
        const bool remote = cfg.draft_endpoint && cfg.target_endpoint && cfg.prm_endpoint &&
                            cfg.dataset_path;
        if (toy == remote)
            throw ConfigParse("config needs either 'instance' or all of models.{draft,target,prm} "
                              "plus 'dataset'");
        cfg.run.validate();
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigParse(std::string("config parse: ") + e.what());
    }
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigParse("config not readable: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigParse("config '" + path + "': " + e.what());
    }
    return parse_experiment_config(j);
}

// --- answer extraction -------------------------------------------------------

namespace {

std::string normalize_number(const std::string& s) {
    std::string digits = s;
    bool negative = false;
    std::size_t i = 0;
    if (i < digits.size() && (digits[i] == '+' || digits[i] == '-')) {
        negative = digits[i] == '-';
        ++i;
    }
    std::string int_part, frac_part;
    bool in_frac = false;
    for (; i < digits.size(); ++i) {
        if (digits[i] == '.') {
            in_frac = true;
            continue;
        }
        (in_frac ? frac_part : int_part) += digits[i];
    }
    while (int_part.size() > 1 && int_part.front() == '0') int_part.erase(int_part.begin());
    if (int_part.empty()) int_part = "0";
    while (!frac_part.empty() && frac_part.back() == '0') frac_part.pop_back();
    std::string out = negative ? "-" : "";
    out += int_part;
    if (!frac_part.empty()) out += "." + frac_part;
    if (out == "-0") out = "0";
    return out;
}

const std::regex kNumberPattern(R"([-+]?\d+(\.\d+)?|[-+]?\.\d+)");

std::string normalize_answer(const std::string& raw) {
    // collapse whitespace
    std::string s;
    bool prev_space = true;
    for (char c : raw) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!prev_space) s += ' ';
            prev_space = true;
        } else {
            s += c;
            prev_space = false;
        }
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    std::smatch m;
    if (std::regex_match(s, m, kNumberPattern)) return normalize_number(s);
    return s;
}

} // namespace

std::string extract_answer(const std::string& text) {
    std::size_t pos = text.rfind("\\boxed{");
    if (pos != std::string::npos) {
        std::size_t i = pos + 7;
        int depth = 1;
        std::string content;
        for (; i < text.size(); ++i) {
            char c = text[i];
            if (c == '{') ++depth;
            if (c == '}') {
                --depth;
                if (depth == 0) break;
            }
            content += c;
        }
        if (depth == 0) return normalize_answer(content);
    }
    std::string last;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), kNumberPattern);
         it != std::sregex_iterator(); ++it)
        last = it->str();
    if (last.empty()) throw NoAnswerFound("no boxed expression or number in text");
    return normalize_answer(last);
}

// --- experiment runner -------------------------------------------------------

namespace {

struct Job {
    std::size_t method_idx;
    std::size_t prompt_idx;
    std::size_t seed_idx;
    std::size_t slot;
};

void run_job_pool(std::vector<Job>& jobs, int workers, const std::function<void(const Job&)>& fn) {
    if (workers <= 1 || jobs.size() <= 1) {
        for (const auto& job : jobs) fn(job);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            fn(jobs[i]);
        }
    };
    std::vector<std::thread> pool;
    int count = std::min<int>(workers, static_cast<int>(jobs.size()));
    pool.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

} // namespace

RunReport run_experiment(const ExperimentConfig& config_in) {
    RunReport report;
    report.config = config_in;
    ExperimentConfig& cfg = report.config;
    if (!cfg.beta_set) {
        cfg.run.beta = 2.0 * static_cast<double>(cfg.run.token_budget); // beta = 2L heuristic
        cfg.beta_set = true;
    }

    // model wiring
    std::unique_ptr<ToyInstance> toy;
    std::unique_ptr<RemoteGeneratorModel> remote_draft, remote_target;
    std::unique_ptr<RemotePrm> remote_prm;
    const GeneratorModel* draft = nullptr;
    const GeneratorModel* target = nullptr;
    const RewardModel* prm = nullptr;
    Dataset dataset;

    if (cfg.instance_path) {
        toy = std::make_unique<ToyInstance>(load_instance(*cfg.instance_path));
        draft = &toy->draft;
        target = &toy->target;
        prm = &toy->prm;
        dataset.name = toy->name;
        dataset.records.push_back({toy->name, toy->prompt, std::nullopt});
    } else {
        remote_draft = std::make_unique<RemoteGeneratorModel>(*cfg.draft_endpoint);
        remote_target = std::make_unique<RemoteGeneratorModel>(*cfg.target_endpoint);
        remote_prm = std::make_unique<RemotePrm>(*cfg.prm_endpoint);
        draft = remote_draft.get();
        target = remote_target.get();
        prm = remote_prm.get();
        dataset = load_dataset_jsonl(*cfg.dataset_path);
    }

    const std::size_t per_method = dataset.records.size() * cfg.seeds.size();
    report.episodes.resize(cfg.methods.size() * per_method);

    ExecutionOptions exec;
    exec.scoring_threads = cfg.scoring_threads;

    auto run_one = [&](const Job& job) {
        const MethodConfig& mc = cfg.methods[job.method_idx];
        const DatasetRecord& rec = dataset.records[job.prompt_idx];
        EpisodeRecord out;
        out.method = mc.label;
        out.prompt_id = rec.id;
        out.seed = cfg.seeds[job.seed_idx];

        RunConfig rc = cfg.run;
        rc.seed = detail::mix(cfg.seeds[job.seed_idx], static_cast<std::uint64_t>(job.prompt_idx));

        auto t0 = std::chrono::steady_clock::now();
        try {
            out.result = run_episode(mc.spec, rec.prompt, *draft, *target, *prm, rc, exec);
            std::string generated;
            for (const auto& b : out.result.trace.blocks) generated += b.text();
            try {
                out.answer = extract_answer(generated);
                out.answered = true;
            } catch (const NoAnswerFound&) {
                out.answered = false;
            }
            if (rec.answer) {
                bool ok = out.answered && out.answer == extract_answer(*rec.answer);
                out.correct = ok;
            }
        } catch (const std::exception& e) {
            out.error = e.what(); // recorded; the batch continues
        }
        out.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.episodes[job.slot] = std::move(out);
    };

    auto make_jobs = [&](auto&& method_filter) {
        std::vector<Job> jobs;
        for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
            if (!method_filter(cfg.methods[m])) continue;
            for (std::size_t p = 0; p < dataset.records.size(); ++p)
                for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
                    jobs.push_back({m, p, s,
                                    m * per_method + p * cfg.seeds.size() + s});
        }
        return jobs;
    };

    // phase 1: everything whose parameters are already known
    auto needs_measured_p = [](const MethodConfig& m) {
        return m.spec.kind == MethodSpec::Kind::RandomSwitch && !m.p_big_explicit;
    };
    auto phase1 = make_jobs([&](const MethodConfig& m) { return !needs_measured_p(m); });
    run_job_pool(phase1, cfg.workers, run_one);

    // phase 2: random_switch matched to the measured target-model share of specs
    auto phase2 = make_jobs(needs_measured_p);
    if (!phase2.empty()) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
            if (cfg.methods[m].spec.kind != MethodSpec::Kind::Specs) continue;
            for (std::size_t i = 0; i < per_method; ++i) {
                const EpisodeRecord& r = report.episodes[m * per_method + i];
                if (r.error.empty()) {
                    sum += r.result.percent_big;
                    ++count;
                }
            }
        }
        double measured = count > 0 ? sum / static_cast<double>(count) : 0.5;
        for (auto& m : cfg.methods)
            if (needs_measured_p(m)) m.spec.p_big = measured;
        run_job_pool(phase2, cfg.workers, run_one);
    }

    report.aggregates = aggregate_rows(report);
    return report;
}

std::vector<AggregateRow> aggregate_rows(const RunReport& report) {
    std::vector<AggregateRow> rows;
    const std::size_t per_method =
        report.config.methods.empty() ? 0 : report.episodes.size() / report.config.methods.size();
    for (std::size_t m = 0; m < report.config.methods.size(); ++m) {
        AggregateRow row;
        row.method = report.config.methods[m].label;
        double correct_sum = 0.0;
        std::size_t graded = 0;
        double wall_sum = 0.0, per_step_sum = 0.0, big_sum = 0.0;
        std::size_t ok = 0;
        for (std::size_t i = 0; i < per_method; ++i) {
            const EpisodeRecord& r = report.episodes[m * per_method + i];
            if (!r.error.empty()) continue;
            ++ok;
            wall_sum += r.wall_seconds;
            std::size_t steps = std::max<std::size_t>(1, r.result.trace.blocks.size());
            per_step_sum += r.wall_seconds / static_cast<double>(steps);
            big_sum += r.result.percent_big;
            if (r.correct.has_value()) {
                ++graded;
                correct_sum += *r.correct ? 1.0 : 0.0;
            }
        }
        row.episodes = static_cast<int>(ok);
        row.accuracy = graded > 0 ? correct_sum / static_cast<double>(graded)
                                  : std::numeric_limits<double>::quiet_NaN();
        row.mean_latency = ok > 0 ? wall_sum / static_cast<double>(ok) : 0.0;
        row.mean_latency_per_step = ok > 0 ? per_step_sum / static_cast<double>(ok) : 0.0;
        row.mean_percent_big = ok > 0 ? big_sum / static_cast<double>(ok) : 0.0;
        rows.push_back(std::move(row));
    }
    return rows;
}

ordered_json episode_record_json(const EpisodeRecord& rec) {
    ordered_json j;
    j["method"] = rec.method;
    j["prompt_id"] = rec.prompt_id;
    j["seed"] = rec.seed;
    ordered_json blocks = ordered_json::array();
    ordered_json tags = ordered_json::array();
    for (const auto& b : rec.result.trace.blocks) blocks.push_back(b.text());
    for (auto s : rec.result.trace.source_tags) tags.push_back(to_string(s));
    j["blocks"] = blocks;
    j["source_tags"] = tags;
    j["terminal"] = rec.result.trace.has_terminal();
    j["percent_big"] = rec.result.percent_big;
    j["selected_scores"] = rec.result.selected_scores;
    j["answer"] = rec.answer;
    j["answered"] = rec.answered;
    if (rec.correct.has_value())
        j["correct"] = *rec.correct;
    else
        j["correct"] = nullptr;
    j["error"] = rec.error;
    return j;
}

ordered_json episode_timing_json(const EpisodeRecord& rec) {
    ordered_json j;
    j["method"] = rec.method;
    j["prompt_id"] = rec.prompt_id;
    j["seed"] = rec.seed;
    j["wall_seconds"] = rec.wall_seconds;
    ordered_json steps = ordered_json::array();
    for (const auto& s : rec.result.per_step_latency)
        steps.push_back(ordered_json{{"draft_generate", s.draft_generate},
                                     {"target_generate", s.target_generate},
                                     {"target_score", s.target_score},
                                     {"prm_score", s.prm_score},
                                     {"wall_step", s.wall_step}});
    j["steps"] = steps;
    return j;
}

void write_report(const RunReport& report, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::ofstream episodes(fs::path(dir) / "episodes.jsonl");
    std::ofstream timing(fs::path(dir) / "timing.jsonl");
    for (const auto& rec : report.episodes) {
        episodes << episode_record_json(rec).dump() << "\n";
        timing << episode_timing_json(rec).dump() << "\n";
    }

    std::ofstream csv(fs::path(dir) / "aggregate.csv");
    csv << "method,episodes,accuracy,mean_latency_s,mean_latency_per_step_s,mean_percent_big\n";
    for (const auto& row : report.aggregates) {
        csv << row.method << "," << row.episodes << ",";
        if (std::isnan(row.accuracy))
            csv << "";
        else
            csv << row.accuracy;
        csv << "," << row.mean_latency << "," << row.mean_latency_per_step << ","
            << row.mean_percent_big << "\n";
    }

    ordered_json cfg;
    cfg["name"] = report.config.name;
    cfg["beta"] = report.config.run.beta; // effective value, after the 2L default
    cfg["n"] = report.config.run.n;
    cfg["tau"] = report.config.run.tau;
    cfg["horizon"] = report.config.run.horizon;
    cfg["token_budget"] = report.config.run.token_budget;
    cfg["beam_mode"] =
        report.config.run.beam_mode == BeamMode::Fixed ? "fixed" : "poisson";
    cfg["seeds"] = report.config.seeds;
    ordered_json methods = ordered_json::array();
    for (const auto& m : report.config.methods) {
        ordered_json mj;
        mj["label"] = m.label;
        mj["method"] = m.spec.name();
        if (m.spec.kind == MethodSpec::Kind::RandomSwitch) mj["p_big"] = m.spec.p_big;
        methods.push_back(mj);
    }
    cfg["methods"] = methods;
    std::ofstream cfg_out(fs::path(dir) / "config.json");
    cfg_out << cfg.dump(2) << "\n";
}

nlohmann::json latency_breakdown(const RunReport& report) {
    json out = json::object();
    const std::size_t per_method =
        report.config.methods.empty() ? 0 : report.episodes.size() / report.config.methods.size();
    for (std::size_t m = 0; m < report.config.methods.size(); ++m) {
        double dg = 0, tg = 0, ts = 0, ps = 0, wall = 0, ep_wall = 0;
        std::size_t steps = 0, episodes = 0;
        for (std::size_t i = 0; i < per_method; ++i) {
            const EpisodeRecord& r = report.episodes[m * per_method + i];
            if (!r.error.empty()) continue;
            ++episodes;
            ep_wall += r.wall_seconds;
            for (const auto& s : r.result.per_step_latency) {
                ++steps;
                dg += s.draft_generate;
                tg += s.target_generate;
                ts += s.target_score;
                ps += s.prm_score;
                wall += s.wall_step;
            }
        }
        json row;
        double denom = steps > 0 ? static_cast<double>(steps) : 1.0;
        row["mean_draft_generate"] = dg / denom;
        row["mean_target_generate"] = tg / denom;
        row["mean_target_score"] = ts / denom;
        row["mean_prm_score"] = ps / denom;
        row["mean_wall_step"] = wall / denom;
        row["mean_episode_wall"] = episodes > 0 ? ep_wall / static_cast<double>(episodes) : 0.0;
        row["steps"] = steps;
        out[report.config.methods[m].label] = row;
    }
    return out;
}

} // namespace specs
