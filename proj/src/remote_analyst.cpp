#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <json.hpp>
#include <regex>

#include "mel/analyst.hpp"
#include "mel/error.hpp"
#include "mel/prompt_assets.hpp"

namespace mel {
namespace {

std::string substitute(const std::string& tpl, std::initializer_list<std::pair<std::string_view, std::string_view>> vars) {
    std::string out;
    out.reserve(tpl.size());
    std::size_t i = 0;
    while (i < tpl.size()) {
        bool replaced = false;
        if (tpl[i] == '{') {
            for (const auto& [name, value] : vars) {
                if (tpl.compare(i + 1, name.size(), name) == 0 && i + 1 + name.size() < tpl.size() &&
                    tpl[i + 1 + name.size()] == '}') {
                    out.append(value);
                    i += name.size() + 2;
                    replaced = true;
                    break;
                }
            }
        }
        if (!replaced) out.push_back(tpl[i++]);
    }
    return out;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n*");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

class HttpTransport final : public Transport {
public:
    explicit HttpTransport(const RemoteConfig& config) : config_(config) {
        static const std::regex url(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
        std::smatch m;
        if (!std::regex_match(config.endpoint, m, url))
            throw ConfigError("analyst.endpoint must look like http://host[:port]/path, got '" + config.endpoint + "'");
        host_ = m[1].str();
        port_ = m[2].matched ? std::stoi(m[2].str()) : 80;
        path_ = m[3].matched ? m[3].str() : "/";
    }

    std::string post(const std::string& json_body) override {
        httplib::Client client(host_, port_);
        const auto sec = config_.timeout_ms / 1000;
        const auto usec = (config_.timeout_ms % 1000) * 1000;
        client.set_connection_timeout(sec, usec);
        client.set_read_timeout(sec, usec);
        client.set_write_timeout(sec, usec);
        httplib::Headers headers;
        if (!config_.token.empty()) headers.emplace("Authorization", "Bearer " + config_.token);
        auto res = client.Post(path_, headers, json_body, "application/json");
        if (!res) throw TransportError("request to " + config_.endpoint + " failed: " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw TransportError("request to " + config_.endpoint + " returned HTTP " + std::to_string(res->status));
        return res->body;
    }

private:
    RemoteConfig config_;
    std::string host_;
    int port_ = 80;
    std::string path_;
};

struct Heading {
    const char* phrase;
    std::string AnalystSections::*field;
};
const Heading kHeadings[] = {
    {"failure resolution path", &AnalystSections::failure_path},
    {"analysis of success factors", &AnalystSections::success_factors},
    {"reflective summary", &AnalystSections::reflective_summary},
    {"subject heuristics", &AnalystSections::heuristics},
};

ErrorKind classify_failure(const std::string& failure_path) {
    const std::string s = lower(failure_path);
    if (s.find("modul") != std::string::npos || s.find("reduc") != std::string::npos) return ErrorKind::WrongModulus;
    if (s.find("operat") != std::string::npos) return ErrorKind::WrongOperation;
    if (s.find("format") != std::string::npos) return ErrorKind::FormatViolation;
    return ErrorKind::ArithmeticSlip;
}

}  // namespace

const char* meta_experience_template() { return assets::kMetaExperienceTemplate; }
const char* validation_template() { return assets::kEmpiricalValidationTemplate; }

std::string fill_meta_experience_prompt(const std::string& question, const std::string& error_ans,
                                        const std::string& correct_ans) {
    return substitute(assets::kMetaExperienceTemplate,
                      {{"question", question}, {"error_ans", error_ans}, {"correct_ans", correct_ans}});
}

std::string fill_validation_prompt(const std::string& experience, const std::string& question) {
    return substitute(assets::kEmpiricalValidationTemplate, {{"experience", experience}, {"question", question}});
}

std::string question_text(const Query& query) {
    return "Evaluate the chain " + prompt_text(query) +
           " from left to right, reducing modulo the given modulus after every operation. Write each intermediate "
           "value on its own line as 't : value' and finish with '#### answer'.";
}

AnalystSections parse_analyst_reply(const std::string& text) {
    const std::string low = lower(text);
    struct Found {
        std::size_t heading_begin;
        std::size_t body_begin;
        const Heading* h;
    };
    std::vector<Found> found;
    for (const auto& h : kHeadings) {
        const auto pos = low.find(h.phrase);
        if (pos == std::string::npos)
            throw AnalysisParseError(std::string("missing section heading '") + h.phrase + "'");
        const auto line_begin = low.rfind('\n', pos);
        const auto line_end = low.find('\n', pos);
        found.push_back({line_begin == std::string::npos ? 0 : line_begin + 1,
                         line_end == std::string::npos ? text.size() : line_end + 1, &h});
    }
    std::sort(found.begin(), found.end(), [](const Found& a, const Found& b) { return a.heading_begin < b.heading_begin; });
    AnalystSections out;
    for (std::size_t i = 0; i < found.size(); ++i) {
        const std::size_t end = i + 1 < found.size() ? found[i + 1].heading_begin : text.size();
        const std::size_t begin = std::min(found[i].body_begin, end);
        std::string body = trim(std::string_view(text).substr(begin, end - begin));
        if (body.empty()) throw AnalysisParseError(std::string("empty section '") + found[i].h->phrase + "'");
        out.*(found[i].h->field) = std::move(body);
    }
    return out;
}

std::unique_ptr<Transport> make_http_transport(const RemoteConfig& config) {
    return std::make_unique<HttpTransport>(config);
}

RemoteAnalyst::RemoteAnalyst(std::shared_ptr<const Vocabulary> vocab, RemoteConfig config,
                             std::unique_ptr<Transport> transport)
    : vocab_(std::move(vocab)),
      config_(std::move(config)),
      transport_(transport ? std::move(transport) : make_http_transport(config_)),
      in_flight_(std::clamp(config_.max_in_flight, 1, 1024)) {
    if (config_.retries < 0) throw ConfigError("analyst.retries must be >= 0");
    if (config_.timeout_ms <= 0) throw ConfigError("analyst.timeout_ms must be > 0");
}

std::string RemoteAnalyst::complete(const std::string& prompt, int max_tokens, double temperature) {
    nlohmann::ordered_json req;
    req["prompt"] = prompt;
    req["max_tokens"] = max_tokens;
    req["temperature"] = temperature;
    const std::string body = req.dump();

    std::string last_error;
    for (int attempt = 0; attempt <= config_.retries; ++attempt) {
        std::string reply;
        in_flight_.acquire();
        try {
            reply = transport_->post(body);
            in_flight_.release();
        } catch (const TransportError& e) {
            in_flight_.release();
            last_error = e.what();
            continue;
        } catch (...) {
            in_flight_.release();
            throw;
        }
        try {
            const auto j = nlohmann::json::parse(reply);
            return j.at("text").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw AnalysisParseError(std::string("malformed analyst reply: ") + e.what());
        }
    }
    throw TransportError("analyst unreachable after " + std::to_string(config_.retries + 1) +
                         " attempt(s): " + last_error);
}

MetaExperience RemoteAnalyst::analyze(const AnalysisContext& ctx) {
    const auto& g = ctx.group;
    const Trajectory& pos = g.trajectories.at(ctx.pair.positive);
    const Trajectory& neg = g.trajectories.at(ctx.pair.negative);

    MetaExperience me;
    me.provenance = {ctx.query.id, trajectory_id(ctx.step, ctx.query.id, ctx.pair.positive),
                     trajectory_id(ctx.step, ctx.query.id, ctx.pair.negative), name(), ctx.step};
    me.positive_symbols = vocab_->decode(pos.tokens, false);
    me.negative_symbols = vocab_->decode(neg.tokens, false);

    const std::string prompt =
        fill_meta_experience_prompt(question_text(ctx.query), vocab_->decode(neg.tokens), vocab_->decode(pos.tokens));
    std::string reply;
    try {
        reply = complete(prompt, config_.max_tokens, config_.temperature);
        me.sections = parse_analyst_reply(reply);
    } catch (const AnalysisParseError& e) {
        me.arrival_error = e.what();
        me.diagnostics = e.what();
        me.critique.kind = ErrorKind::FormatViolation;
        me.heuristic.family = HintFamily::Answer;
        me.heuristic.op = CorrectiveOp::Format;
        return me;
    }

    const std::string& fp = me.sections.failure_path;
    static const std::regex step_re(R"([Ss]tep\s+(\d+))");
    std::smatch m;
    if (std::regex_search(fp, m, step_re)) me.bifurcation_step = std::stoi(m[1].str());
    static const std::regex point_re(R"(Failure Point:?\**:?\s*([^\n]*))");
    me.bifurcation_text = std::regex_search(fp, m, point_re) ? trim(m[1].str()) : fp.substr(0, fp.find('\n'));

    me.critique.kind = classify_failure(fp);
    me.critique.text = fp;
    const int len = ctx.query.chain_length();
    if (me.bifurcation_step && *me.bifurcation_step >= 1 && *me.bifurcation_step <= len)
        me.heuristic.family = family_of(ctx.query.ops[static_cast<std::size_t>(*me.bifurcation_step - 1)]);
    else
        me.heuristic.family = HintFamily::Answer;
    me.heuristic.op = corrective_for(me.critique.kind, me.heuristic.family);
    me.heuristic.text = me.sections.heuristics;
    return me;
}

ReplayOutcome RemoteAnalyst::replay(const MetaExperience& me, const Query& query, const PolicyParams& params,
                                    const ReplayConfig& config) {
    (void)params;
    const std::string prompt = fill_validation_prompt(render_experience_text(me), question_text(query));
    const IntegerVerifier verifier;
    ReplayOutcome out;
    for (int k = 0; k < config.attempts; ++k) {
        std::string text;
        try {
            text = complete(prompt, config_.max_tokens, config.temperature);
        } catch (const TransportError& e) {
            out.status = MeStatus::Rejected;
            out.diagnostics = std::string("transport: ") + e.what();
            return out;
        } catch (const AnalysisParseError& e) {
            out.status = MeStatus::Rejected;
            out.diagnostics = e.what();
            return out;
        }
        ++out.attempts_made;
        if (verifier.verify_text(text, query.ground_truth).reward == 1) {
            out.status = MeStatus::Validated;
            return out;
        }
    }
    out.status = MeStatus::Rejected;
    out.diagnostics = "replay failed in " + std::to_string(out.attempts_made) + " attempt(s)";
    return out;
}

}  // namespace mel
