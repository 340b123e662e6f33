#include <fstream>
#include <mutex>
#include <thread>

#include "specs/errors.hpp"
#include "specs/llm.hpp"

#include <httplib.h>

namespace specs {

using nlohmann::json;

json load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ScenarioParse("scenario file not readable: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ScenarioParse("scenario '" + path + "': " + e.what());
    }
    validate_scenario(j);
    return j;
}

void validate_scenario(const json& scenario) {
    if (!scenario.is_object()) throw ScenarioParse("scenario must be a JSON object");
    if (!scenario.contains("models") || !scenario.at("models").is_object() ||
        scenario.at("models").empty())
        throw ScenarioParse("scenario needs a non-empty 'models' object");
    for (auto it = scenario.at("models").begin(); it != scenario.at("models").end(); ++it) {
        const json& m = it.value();
        std::string mode = m.value("mode", "fixed");
        if (mode != "fixed" && mode != "sequence")
            throw ScenarioParse("model '" + it.key() + "': mode must be 'fixed' or 'sequence'");
        if (!m.contains("completions") || !m.at("completions").is_array() ||
            m.at("completions").empty())
            throw ScenarioParse("model '" + it.key() + "': needs a non-empty 'completions' array");
        for (const auto& c : m.at("completions")) {
            if (!c.contains("tokens") || !c.at("tokens").is_array() || c.at("tokens").empty())
                throw ScenarioParse("model '" + it.key() + "': completion needs non-empty 'tokens'");
            if (!c.contains("token_logprobs") ||
                c.at("token_logprobs").size() != c.at("tokens").size())
                throw ScenarioParse("model '" + it.key() +
                                    "': token_logprobs must match tokens length");
        }
    }
    if (scenario.contains("prm")) {
        const json& p = scenario.at("prm");
        if (!p.contains("score") && !p.contains("by_step"))
            throw ScenarioParse("prm section needs 'score' or 'by_step'");
    }
}

struct MockServer::Impl {
    json scenario;
    httplib::Server server;
    std::thread thread;
    std::mutex mu;
    std::map<std::string, std::size_t> cursors; // per-model, sequence mode

    json take_completions(const std::string& model, int n) {
        const json& m = scenario.at("models").at(model);
        const json& entries = m.at("completions");
        const bool sequential = m.value("mode", "fixed") == "sequence";
        json choices = json::array();
        std::lock_guard<std::mutex> lock(mu);
        std::size_t& cursor = cursors[model];
        for (int i = 0; i < n; ++i) {
            std::size_t idx;
            if (sequential) {
                if (cursor >= entries.size()) throw std::out_of_range("scenario exhausted");
                idx = cursor++;
            } else {
                idx = (cursor + static_cast<std::size_t>(i)) % entries.size();
            }
            choices.push_back(entries[idx]);
        }
        if (!sequential) cursor = 0; // fixed mode always replays from the top
        return choices;
    }
};

MockServer::MockServer(const json& scenario, const std::string& host) : impl_(new Impl) {
    validate_scenario(scenario);
    impl_->scenario = scenario;

    impl_->server.Post("/v1/completions", [this](const httplib::Request& req,
                                                 httplib::Response& res) {
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception&) {
            res.status = 400;
            res.set_content(R"({"error":"bad json"})", "application/json");
            return;
        }
        const std::string model = body.value("model", "");
        if (!impl_->scenario.at("models").contains(model)) {
            res.status = 404;
            res.set_content(R"({"error":"unknown model"})", "application/json");
            return;
        }
        const bool echo = body.value("echo", false);
        json out;
        if (echo) {
            // scoring request: echo the prompt as single-character tokens with
            // a constant per-token logprob
            if (impl_->scenario.contains("echo") &&
                !impl_->scenario.at("echo").value("enabled", true)) {
                out["choices"] = json::array(
                    {{{"text", body.value("prompt", "")}, {"finish_reason", "stop"}}});
                res.set_content(out.dump(), "application/json");
                return;
            }
            double lp = -0.1;
            if (impl_->scenario.contains("echo"))
                lp = impl_->scenario.at("echo").value("token_logprob", -0.1);
            std::string prompt = body.value("prompt", "");
            json tokens = json::array(), lps = json::array();
            for (char c : prompt) {
                tokens.push_back(std::string(1, c));
                lps.push_back(lp);
            }
            out["choices"] = json::array(
                {{{"text", prompt},
                  {"logprobs", {{"tokens", tokens}, {"token_logprobs", lps}}},
                  {"finish_reason", "stop"}}});
            res.set_content(out.dump(), "application/json");
            return;
        }

        const int n = body.value("n", 1);
        const int max_tokens = body.value("max_tokens", 16);
        json entries;
        try {
            entries = impl_->take_completions(model, n);
        } catch (const std::out_of_range&) {
            res.status = 500;
            res.set_content(R"({"error":"scenario exhausted"})", "application/json");
            return;
        }
        json choices = json::array();
        for (const auto& entry : entries) {
            json tokens = entry.at("tokens");
            json lps = entry.at("token_logprobs");
            std::string finish = entry.value("finish_reason", "stop");
            if (static_cast<int>(tokens.size()) > max_tokens) {
                tokens.erase(tokens.begin() + max_tokens, tokens.end());
                lps.erase(lps.begin() + max_tokens, lps.end());
                finish = "length";
            }
            std::string text;
            for (const auto& t : tokens) text += t.get<std::string>();
            choices.push_back({{"text", text},
                               {"logprobs", {{"tokens", tokens}, {"token_logprobs", lps}}},
                               {"finish_reason", finish}});
        }
        out["choices"] = choices;
        res.set_content(out.dump(), "application/json");
    });

    impl_->server.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception&) {
            res.status = 400;
            res.set_content(R"({"error":"bad json"})", "application/json");
            return;
        }
        double constant = 0.5;
        json by_step = json::object();
        if (impl_->scenario.contains("prm")) {
            constant = impl_->scenario.at("prm").value("score", 0.5);
            by_step = impl_->scenario.at("prm").value("by_step", json::object());
        }
        json scores = json::array();
        for (const auto& step : body.value("steps", json::array())) {
            std::string s = step.get<std::string>();
            scores.push_back(by_step.contains(s) ? by_step.at(s).get<double>() : constant);
        }
        res.set_content(json{{"scores", scores}}.dump(), "application/json");
    });

    impl_->server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
        res.set_content("ok", "text/plain");
    });

    port_ = impl_->server.bind_to_any_port(host);
    if (port_ <= 0) throw std::runtime_error("MockServer: could not bind a port");
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

std::string MockServer::base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

void MockServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
    if (impl_ && impl_->thread.joinable()) impl_->thread.join();
}

MockServer::~MockServer() { stop(); }

} // namespace specs
