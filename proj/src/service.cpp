#include "ncatlas/service.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/lab.hpp"
#include "ncatlas/wire.hpp"

#include <httplib.h>

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <deque>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

namespace ncatlas {

using nlohmann::json;

BindAddress parse_bind_address(std::string_view text) {
    BindAddress addr;
    std::string_view port_text = text;
    if (const auto colon = text.rfind(':'); colon != std::string_view::npos) {
        if (colon > 0) addr.host = std::string(text.substr(0, colon));
        port_text = text.substr(colon + 1);
    }
    int port = 0;
    const auto [end, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc() || end != port_text.data() + port_text.size() || port < 0 || port > 65535)
        throw Error(ErrorCode::invalid_argument,
                    "bad bind address \"" + std::string(text) + "\"; expected host:port, :port or port");
    addr.port = port;
    return addr;
}

BindAddress default_bind_address() {
    if (const char* env = std::getenv("NC_ADDR"); env && *env) return parse_bind_address(env);
    return {};
}

namespace {

int http_status(ErrorCode code) {
    switch (code) {
    case ErrorCode::not_found:
    case ErrorCode::io_error: return 404;
    case ErrorCode::incompatible: return 409;
    case ErrorCode::incomplete_checkpoint:
    case ErrorCode::shape_mismatch:
    case ErrorCode::non_finite: return 500;
    default: return 400;
    }
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
    res.status = status;
    res.set_content(json{{"code", code}, {"message", message}}.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json");
}

template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        send_error(res, http_status(e.code()), to_string(e.code()), e.what());
    } catch (const json::exception& e) {
        send_error(res, 400, "parse_error", std::string("malformed JSON: ") + e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
    }
}

void send_json(httplib::Response& res, const json& body) { res.set_content(body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json"); }

bool parse_flag(const std::string& text, const char* name) {
    if (text == "1" || text == "true") return true;
    if (text == "0" || text == "false") return false;
    throw Error(ErrorCode::invalid_argument, std::string(name) + " must be true or false");
}

std::size_t parse_count(const std::string& text, const char* name) {
    std::size_t value = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || end != text.data() + text.size())
        throw Error(ErrorCode::invalid_argument, std::string(name) + " must be a non-negative integer");
    return value;
}

std::string sse_event(std::string_view event, const json& data) {
    return "event: " + std::string(event) + "\ndata: " + data.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n\n";
}

struct ChatSession {
    std::mutex mutex;
    std::unique_ptr<InferenceSession> engine;
    bool raw = false;
    std::vector<ChatMessage> transcript;
    std::vector<TokenId> history;  // raw mode: every id so far
};

struct ClientGone {};

} // namespace

struct Service::Impl {
    ServiceResources r;
    httplib::Server server;
    std::thread thread;

    std::mutex sessions_mutex;
    std::map<std::string, std::shared_ptr<ChatSession>> sessions;
    std::atomic<std::uint64_t> session_counter{0};
    std::uint64_t session_salt = std::random_device{}();

    std::mutex atlas_mutex;
    std::map<std::string, std::shared_ptr<const Atlas>> atlas_cache;

    // Recent whole-model token scans, shared by /feature and /heatmap.
    std::mutex scores_mutex;
    std::deque<std::shared_ptr<const TokenScores>> recent_scores;
    static constexpr std::size_t scores_capacity = 8;

    explicit Impl(ServiceResources resources) : r(std::move(resources)) {
        if (!r.checkpoint) throw Error(ErrorCode::invalid_argument, "service needs a checkpoint");
        routes();
    }

    const Vocabulary& vocab() const {
        if (!r.vocab) throw Error(ErrorCode::invalid_argument, "no tokenizer loaded; pass token ids instead of text");
        return *r.vocab;
    }

    QueryOptions query_options(const httplib::Request& req) const {
        QueryOptions q = r.query;
        if (req.has_param("mode")) q.mode = parse_score_mode(req.get_param_value("mode"));
        if (req.has_param("apply_final_norm"))
            q.decode.apply_final_norm = parse_flag(req.get_param_value("apply_final_norm"), "apply_final_norm");
        if (req.has_param("matrix_kind")) q.decode.matrix_kind = parse_matrix_kind(req.get_param_value("matrix_kind"));
        return q;
    }

    TokenId token_param(const httplib::Request& req) const {
        if (req.has_param("token_id")) {
            const auto id = parse_count(req.get_param_value("token_id"), "token_id");
            if (id >= r.checkpoint->config.vocab_size)
                throw Error(ErrorCode::unknown_token, "token id " + std::to_string(id) + " is outside the vocabulary");
            return static_cast<TokenId>(id);
        }
        if (req.has_param("token")) return lookup_token(vocab(), req.get_param_value("token"));
        throw Error(ErrorCode::invalid_argument, "pass token=<text> or token_id=<id>");
    }

    std::shared_ptr<const TokenScores> scores(TokenId token, const QueryOptions& q) {
        auto matches = [&](const TokenScores& s) {
            return s.token == token && s.options.decode == q.decode && s.options.mode == q.mode;
        };
        {
            std::lock_guard lock(scores_mutex);
            for (const auto& s : recent_scores)
                if (matches(*s)) return s;
            // The raw scan does not depend on the mode, only the presentation does.
            for (const auto& s : recent_scores)
                if (s->token == token && s->options.decode == q.decode) {
                    auto copy = std::make_shared<TokenScores>(*s);
                    copy->options.mode = q.mode;
                    return copy;
                }
        }
        auto fresh = std::make_shared<const TokenScores>(score_token(*r.checkpoint, token, q));
        std::lock_guard lock(scores_mutex);
        recent_scores.push_front(fresh);
        if (recent_scores.size() > scores_capacity) recent_scores.pop_back();
        return fresh;
    }

    std::shared_ptr<const Atlas> atlas_at(const std::string& path_text) {
        std::filesystem::path path(path_text);
        if (path.is_relative()) path = r.atlas_dir / path;
        const std::string key = path.lexically_normal().string();
        {
            std::lock_guard lock(atlas_mutex);
            if (auto it = atlas_cache.find(key); it != atlas_cache.end()) return it->second;
        }
        auto loaded = std::make_shared<const Atlas>(load_atlas(path));
        std::lock_guard lock(atlas_mutex);
        return atlas_cache.emplace(key, std::move(loaded)).first->second;
    }

    void routes() {
        server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
        server.Options(".*", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
            res.status = 204;
        });
        server.Get("/models", [this](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] { send_json(res, models()); });
        });
        server.Get("/feature", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { feature(req, res); });
        });
        server.Get("/heatmap", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { heatmap_endpoint(req, res); });
        });
        server.Get(R"(/neuron/([^/]+)/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { neuron(req, res); });
        });
        server.Post("/diff", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { diff(req, res); });
        });
        server.Post("/sweep", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { sweep(req, res); });
        });
        server.Post("/chat", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { chat(req, res); });
        });
        server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
            if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "not_found" : "http_error",
                                             "no route for " + req.method + " " + req.path);
        });
    }

    json models() const {
        const auto& ckpt = *r.checkpoint;
        json out{{"name", r.model_name},
                 {"fingerprint", fingerprint_hex(ckpt.fingerprint)},
                 {"config", config_to_json(ckpt.config)},
                 {"neuron_count", ckpt.config.neuron_count()},
                 {"has_tokenizer", bool(r.vocab)},
                 {"has_chat_template", r.chat_template.has_value()},
                 {"query_defaults",
                  {{"mode", std::string(to_string(r.query.mode))},
                   {"apply_final_norm", r.query.decode.apply_final_norm},
                   {"matrix_kind", std::string(to_string(r.query.decode.matrix_kind))}}}};
        if (r.atlas)
            out["atlas"] = {{"k", r.atlas->k},
                            {"fingerprint", fingerprint_hex(r.atlas->fingerprint)},
                            {"apply_final_norm", r.atlas->options.apply_final_norm},
                            {"matrix_kind", std::string(to_string(r.atlas->options.matrix_kind))}};
        else
            out["atlas"] = nullptr;
        if (r.chat_template) out["chat_template"] = r.chat_template->name;
        return out;
    }

    void feature(const httplib::Request& req, httplib::Response& res) {
        const auto q = query_options(req);
        const TokenId token = token_param(req);
        const std::size_t top_n = req.has_param("top_n") ? parse_count(req.get_param_value("top_n"), "top_n") : 10;
        const auto hits = rank_features(*scores(token, q), top_n);
        json out{{"token_id", token}, {"mode", std::string(to_string(q.mode))}, {"hits", wire::feature_hits(hits)}};
        if (r.vocab && r.vocab->contains(token)) out["token"] = display_token(*r.vocab, token);
        send_json(res, out);
    }

    void heatmap_endpoint(const httplib::Request& req, httplib::Response& res) {
        const auto q = query_options(req);
        const TokenId token = token_param(req);
        const std::size_t columns =
            req.has_param("columns") ? parse_count(req.get_param_value("columns"), "columns") : 256;
        const auto map = heatmap_from_scores(*scores(token, q), r.checkpoint->fingerprint, columns);
        const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
        if (format == "data") {
            std::ostringstream os;
            const std::string surface = r.vocab && r.vocab->contains(token) ? r.vocab->bytes(token) : std::string{};
            write_heatmap_data(map, os, surface);
            res.set_content(os.str(), "text/plain; charset=utf-8");
        } else if (format == "json") {
            json out = wire::heatmap_summary(map);
            if (r.vocab && r.vocab->contains(token)) out["token"] = display_token(*r.vocab, token);
            send_json(res, out);
        } else {
            throw Error(ErrorCode::invalid_argument, "format must be json or data");
        }
    }

    void neuron(const httplib::Request& req, httplib::Response& res) {
        const auto q = query_options(req);
        NeuronAddress addr{static_cast<std::uint32_t>(parse_count(req.matches[1], "layer")),
                           static_cast<std::uint32_t>(parse_count(req.matches[2], "neuron")), q.decode.matrix_kind};
        r.checkpoint->check_address(addr);
        const std::size_t top_n =
            req.has_param("top_n") ? parse_count(req.get_param_value("top_n"), "top_n") : normalization_depth;
        const Vocabulary* v = r.vocab.get();
        json out;
        if (r.atlas && r.atlas->options == q.decode) {
            out = wire::profile(neuron_profile(*r.atlas, addr, v), top_n);
            out["source"] = "atlas";
        } else {
            const auto decoded = decode_neuron(*r.checkpoint, addr, q.decode, std::max(top_n, normalization_depth));
            out = wire::profile(neuron_profile(decoded.summary, v), top_n);
            out["source"] = "decode";
        }
        send_json(res, out);
    }

    void diff(const httplib::Request& req, httplib::Response& res) {
        const json body = json::parse(req.body);
        if (!body.contains("atlas_a") || !body.contains("atlas_b"))
            throw Error(ErrorCode::invalid_argument, "body needs atlas_a and atlas_b paths");
        const auto a = atlas_at(body.at("atlas_a").get<std::string>());
        const auto b = atlas_at(body.at("atlas_b").get<std::string>());
        std::vector<NeuronAddress> watch;
        if (body.contains("watch"))
            for (const auto& w : body.at("watch")) watch.push_back(wire::address_from(w));
        send_json(res, wire::stability(stability_experiment(*a, *b, watch)));
    }

    void sweep(const httplib::Request& req, httplib::Response& res) {
        const json body = json::parse(req.body);
        if (!body.contains("neuron")) throw Error(ErrorCode::invalid_argument, "body needs a neuron");
        const NeuronAddress addr = wire::address_from(body.at("neuron"));

        std::vector<float> values;
        if (body.contains("values")) {
            values = body.at("values").get<std::vector<float>>();
        } else if (body.contains("grid")) {
            const auto& g = body.at("grid");
            values = sweep_grid(g.value("low", -500.0f), g.value("high", 500.0f), g.value("points", std::size_t{101}));
        } else {
            values = sweep_grid();
        }
        if (values.empty()) throw Error(ErrorCode::invalid_argument, "values must not be empty");

        TokenId target = 0;
        if (body.contains("target_id")) target = body.at("target_id").get<TokenId>();
        else if (body.contains("target")) target = lookup_token(vocab(), body.at("target").get<std::string>());
        else throw Error(ErrorCode::invalid_argument, "body needs target or target_id");

        std::string prompt_text;
        std::vector<TokenId> ids;
        if (body.contains("prompt_ids")) {
            ids = body.at("prompt_ids").get<std::vector<TokenId>>();
        } else if (body.contains("prompt")) {
            prompt_text = body.at("prompt").get<std::string>();
            ids = encode_text(vocab(), prompt_text, SpecialTokens::parse);
        } else {
            throw Error(ErrorCode::invalid_argument, "body needs prompt or prompt_ids");
        }
        for (TokenId id : ids)
            if (id >= r.checkpoint->config.vocab_size)
                throw Error(ErrorCode::unknown_token, "prompt id " + std::to_string(id) + " is outside the vocabulary");
        send_json(res, wire::sweep(clamp_sweep(*r.checkpoint, ids, addr, values, target, prompt_text)));
    }

    std::shared_ptr<ChatSession> session_for(std::string& id, bool raw) {
        std::lock_guard lock(sessions_mutex);
        if (id.empty()) {
            std::ostringstream os;
            os << std::hex << (session_salt ^ (++session_counter * 0x9e3779b97f4a7c15ULL));
            id = os.str();
        }
        auto& slot = sessions[id];
        if (!slot) {
            slot = std::make_shared<ChatSession>();
            slot->engine = std::make_unique<InferenceSession>(*r.checkpoint);
            slot->raw = raw;
        } else if (slot->raw != raw) {
            throw Error(ErrorCode::invalid_argument, "session " + id + " was started in " +
                                                         (slot->raw ? "raw" : "template") + " mode");
        }
        return slot;
    }

    void chat(const httplib::Request& req, httplib::Response& res) {
        const json body = json::parse(req.body);
        if (!body.contains("message") || !body.at("message").is_string())
            throw Error(ErrorCode::invalid_argument, "body needs a message string");
        const std::string message = body.at("message").get<std::string>();
        const Vocabulary& v = vocab();
        const bool raw = body.contains("raw") ? body.at("raw").get<bool>() : !r.chat_template;
        if (!raw && !r.chat_template)
            throw Error(ErrorCode::invalid_argument, "no chat template loaded; send \"raw\": true");

        auto clamps = wire::clamps_from(body.value("clamps", json()));
        validate_clamps(*r.checkpoint, clamps);
        GenerationParams params = wire::params_from(body.value("params", json()));
        if (!raw)
            for (TokenId id : stop_token_ids(*r.chat_template, v)) params.stop_token_ids.insert(id);

        std::string session_id = body.value("session", std::string());
        auto session = session_for(session_id, raw);

        res.set_header("Cache-Control", "no-cache");
        res.set_chunked_content_provider(
            "text/event-stream",
            [this, session, session_id, message, clamps = std::move(clamps), params, raw](std::size_t,
                                                                                         httplib::DataSink& sink) {
                auto emit = [&](std::string_view event, const json& data) {
                    const std::string frame = sse_event(event, data);
                    if (!sink.write(frame.data(), frame.size())) throw ClientGone{};
                };
                try {
                    run_chat_turn(*session, session_id, message, clamps, params, raw, emit);
                } catch (const ClientGone&) {
                    return false;
                } catch (const Error& e) {
                    try {
                        emit("error", {{"code", to_string(e.code())}, {"message", e.what()}});
                    } catch (const ClientGone&) {
                        return false;
                    }
                } catch (const std::exception& e) {
                    try {
                        emit("error", {{"code", "internal"}, {"message", e.what()}});
                    } catch (const ClientGone&) {
                        return false;
                    }
                }
                sink.done();
                return true;
            });
    }

    template <typename Emit>
    void run_chat_turn(ChatSession& s, const std::string& session_id, const std::string& message,
                       const std::vector<ClampSpec>& clamps, const GenerationParams& params, bool raw, Emit& emit) {
        std::lock_guard lock(s.mutex);
        const Vocabulary& v = *r.vocab;
        std::vector<TokenId> target;
        std::vector<ChatMessage> transcript = s.transcript;
        if (raw) {
            target = s.history;
            const auto fresh = encode_text(v, message, SpecialTokens::ignore);
            target.insert(target.end(), fresh.begin(), fresh.end());
        } else {
            transcript.push_back({"user", message});
            target = encode_text(v, apply_chat_template(*r.chat_template, transcript, true), SpecialTokens::parse);
        }
        if (target.empty()) throw Error(ErrorCode::invalid_argument, "message encodes to no tokens");

        // Keep the KV cache when the clamps are unchanged and the cached ids
        // are a strict prefix of the new conversation.
        auto& engine = *s.engine;
        const auto& cached = engine.tokens();
        const bool reuse = engine.clamps() == clamps && cached.size() < target.size() &&
                           std::equal(cached.begin(), cached.end(), target.begin());
        if (engine.clamps() != clamps) engine.set_clamps(clamps);
        else if (!reuse) engine.reset();
        const std::span<const TokenId> input(target.begin() + std::ptrdiff_t(engine.position()), target.end());

        std::size_t index = 0;
        const auto ids = generate_in_session(engine, input, params, [&](TokenId id) {
            emit("token", {{"index", index++}, {"id", id}, {"text", decode_tokens(v, std::span(&id, 1))}});
        });
        std::span<const TokenId> visible(ids);
        if (!visible.empty() && params.stop_token_ids.count(visible.back())) visible = visible.first(visible.size() - 1);
        const std::string text = decode_tokens(v, visible);

        if (raw) {
            s.history = target;
            s.history.insert(s.history.end(), ids.begin(), ids.end());
        } else {
            transcript.push_back({"assistant", text});
            s.transcript = transcript;
        }
        json turns = json::array();
        for (const auto& m : s.transcript) turns.push_back({{"role", m.role}, {"text", m.text}});
        emit("done", {{"session", session_id},
                      {"ids", ids},
                      {"text", text},
                      {"prompt_tokens", target.size()},
                      {"reused_cache", reuse},
                      {"transcript", std::move(turns)},
                      {"clamps", wire::clamps(clamps)},
                      {"params", wire::params(params)}});
    }
};

Service::Service(ServiceResources resources) : impl_(std::make_unique<Impl>(std::move(resources))) {}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0)
        throw Error(ErrorCode::io_error, "cannot bind " + host + ":" + std::to_string(port) +
                                             "; pick another port with --port or NC_ADDR");
    return bound;
}

void Service::listen() { impl_->server.listen_after_bind(); }

void Service::start() {
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

void Service::stop() {
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

} // namespace ncatlas
