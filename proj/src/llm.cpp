#include "specs/llm.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "specs/errors.hpp"

namespace specs {

using nlohmann::json;

void to_json(json& j, const CompletionRequest& r) {
    j = json{{"model", r.model},         {"prompt", r.prompt},   {"n", r.n},
             {"max_tokens", r.max_tokens}, {"stop", r.stop},       {"temperature", r.temperature},
             {"logprobs", r.logprobs},   {"echo", r.echo}};
}

void from_json(const json& j, CompletionRequest& r) {
    r.model = j.value("model", "");
    r.prompt = j.at("prompt").get<std::string>();
    r.n = j.value("n", 1);
    r.max_tokens = j.value("max_tokens", 16);
    r.stop = j.value("stop", std::vector<std::string>{});
    r.temperature = j.value("temperature", 1.0);
    r.logprobs = j.value("logprobs", 0);
    r.echo = j.value("echo", false);
}

void to_json(json& j, const ChoiceLogprobs& l) {
    j = json{{"tokens", l.tokens}, {"token_logprobs", l.token_logprobs}};
}

void from_json(const json& j, ChoiceLogprobs& l) {
    l.tokens = j.at("tokens").get<std::vector<std::string>>();
    l.token_logprobs = j.at("token_logprobs").get<std::vector<double>>();
}

void to_json(json& j, const CompletionChoice& c) {
    j = json{{"text", c.text}, {"logprobs", c.logprobs}, {"finish_reason", c.finish_reason}};
}

void from_json(const json& j, CompletionChoice& c) {
    c.text = j.at("text").get<std::string>();
    if (j.contains("logprobs") && !j.at("logprobs").is_null())
        c.logprobs = j.at("logprobs").get<ChoiceLogprobs>();
    else
        c.logprobs = {};
    c.finish_reason = j.value("finish_reason", "stop");
}

void to_json(json& j, const CompletionResponse& r) { j = json{{"choices", r.choices}}; }

void from_json(const json& j, CompletionResponse& r) {
    r.choices = j.at("choices").get<std::vector<CompletionChoice>>();
}

void to_json(json& j, const PrmRequest& r) { j = json{{"model", r.model}, {"steps", r.steps}}; }

void from_json(const json& j, PrmRequest& r) {
    r.model = j.value("model", "");
    r.steps = j.at("steps").get<std::vector<std::string>>();
}

void to_json(json& j, const PrmResponse& r) { j = json{{"scores", r.scores}}; }

void from_json(const json& j, PrmResponse& r) {
    r.scores = j.at("scores").get<std::vector<double>>();
}

namespace {

std::string bearer_token(const EndpointConfig& cfg) {
    if (cfg.api_key_env.empty()) return "";
    const char* v = std::getenv(cfg.api_key_env.c_str());
    return v ? v : "";
}

/// POST with retries and exponential backoff capped at the request timeout.
json post_json(const EndpointConfig& cfg, const std::string& path, const json& body) {
    cfg.validate();
    std::string payload = body.dump();
    std::string last_error;
    int last_status = 0;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempt > 0) {
            double backoff = std::min(0.01 * std::pow(2.0, attempt - 1), cfg.timeout_seconds);
            std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
        }
        httplib::Client cli(cfg.base_url);
        cli.set_connection_timeout(std::chrono::duration<double>(cfg.timeout_seconds));
        cli.set_read_timeout(std::chrono::duration<double>(cfg.timeout_seconds));
        cli.set_write_timeout(std::chrono::duration<double>(cfg.timeout_seconds));
        std::string token = bearer_token(cfg);
        if (!token.empty()) cli.set_bearer_token_auth(token);

        auto res = cli.Post(path, payload, "application/json");
        if (!res) {
            last_status = 0;
            last_error = "connection failure: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status != 200) {
            last_status = res->status;
            last_error = "http status " + std::to_string(res->status);
            continue;
        }
        try {
            return json::parse(res->body);
        } catch (const json::exception& e) {
            last_status = -1;
            last_error = std::string("malformed response: ") + e.what();
            continue;
        }
    }
    if (last_status == 0) throw Timeout(cfg.base_url + path + ": " + last_error);
    if (last_status == -1) throw MalformedResponse(cfg.base_url + path + ": " + last_error);
    throw HttpError(last_status, cfg.base_url + path + ": " + last_error);
}

/// Cuts the token stream at the first completed stop delimiter (retained) or
/// the gamma cap. Terminal means end-of-sequence with no delimiter cut.
Block block_from_choice(const CompletionChoice& choice, int gamma,
                        const std::vector<std::string>& stop, double* logprob_sum) {
    Block block;
    double lp = 0.0;
    std::string acc;
    bool cut_at_delimiter = false;
    std::size_t limit = std::min<std::size_t>(choice.logprobs.tokens.size(),
                                              static_cast<std::size_t>(gamma));
    for (std::size_t i = 0; i < limit && !cut_at_delimiter; ++i) {
        block.tokens.push_back(choice.logprobs.tokens[i]);
        if (i < choice.logprobs.token_logprobs.size()) lp += choice.logprobs.token_logprobs[i];
        acc += choice.logprobs.tokens[i];
        for (const auto& delim : stop)
            if (!delim.empty() && acc.find(delim) != std::string::npos) {
                cut_at_delimiter = true;
                break;
            }
    }
    block.terminal = !cut_at_delimiter && choice.finish_reason == "stop";
    if (logprob_sum) *logprob_sum = lp;
    return block;
}

} // namespace

std::vector<SampledBlock> remote_sample_blocks_detailed(const EndpointConfig& cfg,
                                                        const BlockTrace& trace, int n, int gamma,
                                                        const std::vector<std::string>& stop) {
    CompletionRequest req;
    req.model = cfg.model;
    req.prompt = trace.text();
    req.n = n;
    req.max_tokens = gamma;
    req.stop = stop;
    req.logprobs = 1;
    json reply = post_json(cfg, "/v1/completions", json(req));
    CompletionResponse resp;
    try {
        resp = reply.get<CompletionResponse>();
    } catch (const json::exception& e) {
        throw MalformedResponse(std::string("completion decode: ") + e.what());
    }
    if (static_cast<int>(resp.choices.size()) != n)
        throw MalformedResponse("completion returned " + std::to_string(resp.choices.size()) +
                                " choices, requested " + std::to_string(n));
    std::vector<SampledBlock> out;
    out.reserve(resp.choices.size());
    for (const auto& choice : resp.choices) {
        if (choice.logprobs.tokens.empty())
            throw MalformedResponse("completion choice lacks token logprobs");
        SampledBlock sb;
        sb.block = block_from_choice(choice, gamma, stop, &sb.logprob);
        out.push_back(std::move(sb));
    }
    return out;
}

std::vector<Block> remote_sample_blocks(const EndpointConfig& cfg, const BlockTrace& trace, int n,
                                        int gamma, const std::vector<std::string>& stop) {
    std::vector<Block> blocks;
    for (auto& sb : remote_sample_blocks_detailed(cfg, trace, n, gamma, stop))
        blocks.push_back(std::move(sb.block));
    return blocks;
}

double remote_block_logprob(const EndpointConfig& cfg, const BlockTrace& trace, const Block& block) {
    if (!cfg.echo_logprobs)
        throw EchoUnsupported("endpoint '" + cfg.base_url + "' does not echo prompt logprobs");
    CompletionRequest req;
    req.model = cfg.model;
    req.prompt = trace.text() + block.text();
    req.n = 1;
    req.max_tokens = 0;
    req.logprobs = 1;
    req.echo = true;
    json reply = post_json(cfg, "/v1/completions", json(req));
    CompletionResponse resp;
    try {
        resp = reply.get<CompletionResponse>();
    } catch (const json::exception& e) {
        throw MalformedResponse(std::string("echo decode: ") + e.what());
    }
    if (resp.choices.empty()) throw MalformedResponse("echo response has no choices");
    const ChoiceLogprobs& lp = resp.choices.front().logprobs;
    if (lp.tokens.empty() || lp.token_logprobs.size() != lp.tokens.size())
        throw EchoUnsupported("endpoint returned no echoed logprobs");

    // sum the logprobs of exactly the block's tokens: those past the prefix
    const std::size_t prefix_len = trace.text().size();
    std::size_t offset = 0;
    double sum = 0.0;
    bool aligned = false;
    for (std::size_t i = 0; i < lp.tokens.size(); ++i) {
        if (offset == prefix_len) aligned = true;
        if (offset >= prefix_len) sum += lp.token_logprobs[i];
        offset += lp.tokens[i].size();
    }
    if (prefix_len == 0) aligned = true;
    if (!aligned || offset != prefix_len + block.text().size())
        throw MalformedResponse("echoed tokens do not align with the block boundary");
    return sum;
}

double remote_prm_score(const EndpointConfig& cfg, const BlockTrace& trace, const Block& candidate) {
    PrmRequest req;
    req.model = cfg.model;
    req.steps.push_back(trace.prompt);
    for (const auto& b : trace.blocks) req.steps.push_back(b.text());
    req.steps.push_back(candidate.text());
    json reply = post_json(cfg, "/v1/score", json(req));
    PrmResponse resp;
    try {
        resp = reply.get<PrmResponse>();
    } catch (const json::exception& e) {
        throw MalformedResponse(std::string("prm decode: ") + e.what());
    }
    if (resp.scores.size() != req.steps.size())
        throw MalformedResponse("prm returned " + std::to_string(resp.scores.size()) +
                                " scores for " + std::to_string(req.steps.size()) + " steps");
    double s = resp.scores.back();
    return std::min(1.0, std::max(0.0, s)); // practical PRMs emit [0,1]
}

RemoteGeneratorModel::RemoteGeneratorModel(EndpointConfig cfg, std::vector<std::string> stop)
    : cfg_(std::move(cfg)), stop_(std::move(stop)) {
    cfg_.validate();
}

std::vector<Block> RemoteGeneratorModel::sample_block_batch(const BlockTrace& trace, int n,
                                                            int gamma,
                                                            std::span<RngStream> streams) const {
    (void)streams; // sampling happens server-side
    auto sampled = remote_sample_blocks_detailed(cfg_, trace, n, gamma, stop_);
    std::vector<Block> blocks;
    blocks.reserve(sampled.size());
    {
        std::lock_guard<std::mutex> lock(mu_);
        for (const auto& sb : sampled)
            sampled_logprobs_[{trace.text(), sb.block.text()}] = sb.logprob;
    }
    for (auto& sb : sampled) blocks.push_back(std::move(sb.block));
    return blocks;
}

Block RemoteGeneratorModel::sample_block(const BlockTrace& trace, int gamma, RngStream& rng) const {
    std::span<RngStream> one(&rng, 1);
    return sample_block_batch(trace, 1, gamma, one).front();
}

double RemoteGeneratorModel::block_logprob(const BlockTrace& trace, const Block& block) const {
    {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = sampled_logprobs_.find({trace.text(), block.text()});
        if (it != sampled_logprobs_.end()) return it->second;
    }
    return remote_block_logprob(cfg_, trace, block);
}

} // namespace specs
