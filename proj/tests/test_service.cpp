#include "support.hpp"

#include "ncatlas/fixture.hpp"
#include "ncatlas/service.hpp"
#include "ncatlas/wire.hpp"

#include <doctest.h>
#include <httplib.h>

#include <cstdlib>
#include <future>
#include <sstream>

using namespace ncatlas;
using namespace ncatlas::testing;
using nlohmann::json;

namespace {

struct SseEvent {
    std::string event;
    json data;
};

std::vector<SseEvent> parse_sse(const std::string& body) {
    std::vector<SseEvent> events;
    std::istringstream in(body);
    std::string line;
    SseEvent current;
    while (std::getline(in, line)) {
        if (line.rfind("event: ", 0) == 0) {
            current.event = line.substr(7);
        } else if (line.rfind("data: ", 0) == 0) {
            current.data = json::parse(line.substr(6));
        } else if (line.empty() && !current.event.empty()) {
            events.push_back(std::move(current));
            current = {};
        }
    }
    return events;
}

// One running service over the causal fixture, shared by all cases.
struct Harness {
    Fixture fixture;
    std::shared_ptr<const ModelCheckpoint> ckpt;
    std::shared_ptr<const Atlas> atlas;
    TempDir dir;
    std::unique_ptr<Service> service;
    int port = 0;

    Harness() {
        FixtureSpec spec;
        spec.variant = FixtureVariant::causal;
        spec.seed = 8;
        fixture = make_fixture(spec);
        ckpt = std::make_shared<const ModelCheckpoint>(fixture.checkpoint);
        atlas = std::make_shared<const Atlas>(build_atlas(*ckpt));
        save_atlas(*atlas, dir / "self.atlas");

        ServiceResources res;
        res.checkpoint = ckpt;
        res.vocab = std::make_shared<const Vocabulary>(byte_vocabulary());
        res.chat_template = fixture_chat_template();
        res.atlas = atlas;
        res.model_name = "causal-fixture";
        res.atlas_dir = dir.path();
        service = std::make_unique<Service>(res);
        port = service->bind("127.0.0.1", 0);
        service->start();
    }
    ~Harness() { service->stop(); }

    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(30, 0);
        return c;
    }
};

Harness& harness() {
    static Harness h;
    return h;
}

json get_json(const std::string& path, int expect_status = 200) {
    auto res = harness().client().Get(path);
    REQUIRE(res);
    CHECK(res->status == expect_status);
    return json::parse(res->body);
}

json post_json(const std::string& path, const json& body, int expect_status = 200) {
    auto res = harness().client().Post(path, body.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == expect_status);
    return json::parse(res->body);
}

std::vector<SseEvent> chat(const json& body) {
    auto res = harness().client().Post("/chat", body.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    CHECK(res->get_header_value("Content-Type").rfind("text/event-stream", 0) == 0);
    return parse_sse(res->body);
}

} // namespace

TEST_CASE("GET /models describes the loaded checkpoint") {
    auto& h = harness();
    const json m = get_json("/models");
    CHECK(m["name"] == "causal-fixture");
    CHECK(m["fingerprint"] == fingerprint_hex(h.ckpt->fingerprint));
    CHECK(m["neuron_count"] == h.ckpt->config.neuron_count());
    CHECK(m["atlas"]["k"] == 100);
    CHECK(m["has_chat_template"] == true);
}

TEST_CASE("GET /feature passes library ranking through unchanged") {
    auto& h = harness();
    const json body = get_json("/feature?token_id=" + std::to_string(h.fixture.token) + "&top_n=7");
    const auto hits = find_feature_neurons(*h.ckpt, h.fixture.token, 7);
    CHECK(body["hits"] == wire::feature_hits(hits));
    CHECK(body["token_id"] == h.fixture.token);

    const json by_text = get_json("/feature?token=" + std::string(1, char('a')) + "&top_n=3&mode=sum100");
    CHECK(by_text["mode"] == "sum100");
    CHECK(by_text["hits"].size() == 3);
}

TEST_CASE("GET /heatmap serves the summary and the data file") {
    auto& h = harness();
    const std::string token = std::to_string(h.fixture.token);
    const json summary = get_json("/heatmap?token_id=" + token + "&columns=16");
    const auto map = heatmap(*h.ckpt, h.fixture.token, {}, 16);
    CHECK(summary == [&] {
        json expect = wire::heatmap_summary(map);
        expect["token"] = display_token(byte_vocabulary(), h.fixture.token);
        return expect;
    }());

    auto res = h.client().Get("/heatmap?token_id=" + token + "&format=data");
    REQUIRE(res);
    CHECK(res->status == 200);
    std::istringstream in(res->body);
    const Heatmap back = read_heatmap_data(in);
    CHECK(back.n_layers == map.n_layers);
    CHECK(back.d_ff == map.d_ff);
    for (std::size_t i = 0; i < map.scores.size(); ++i) CHECK(back.scores[i] == doctest::Approx(map.scores[i]).epsilon(1e-8));

    const json bad = get_json("/heatmap?token_id=" + token + "&format=png", 400);
    CHECK(bad["code"] == "invalid_argument");
}

TEST_CASE("GET /neuron uses the atlas when options match and decodes otherwise") {
    auto& h = harness();
    const NeuronAddress addr{0, 0, MatrixKind::up};
    const json from_atlas = get_json("/neuron/0/0?top_n=5");
    CHECK(from_atlas["source"] == "atlas");
    json expect = wire::profile(neuron_profile(*h.atlas, addr, nullptr), 5);
    json got = from_atlas;
    got.erase("source");
    // the service attaches token surfaces; compare ids and probabilities
    REQUIRE(got["tokens"].size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(got["tokens"][i]["token"] == expect["tokens"][i]["token"]);
        CHECK(got["tokens"][i]["probability"] == expect["tokens"][i]["probability"]);
    }
    const json decoded = get_json("/neuron/0/0?top_n=5&apply_final_norm=true");
    CHECK(decoded["source"] == "decode");
    CHECK(get_json("/neuron/99/0", 400)["code"] == "out_of_range");
    CHECK(get_json("/neuron/x/0", 400)["code"] == "invalid_argument");
}

TEST_CASE("POST /sweep matches clamp_sweep and rejects empty value lists") {
    auto& h = harness();
    const json neuron{{"layer", h.fixture.neuron.layer}, {"neuron", h.fixture.neuron.neuron}};
    const json body{{"neuron", neuron}, {"values", {-20, 0, 20}}, {"target_id", h.fixture.token}, {"prompt_ids", {1, 2}}};
    const json got = post_json("/sweep", body);
    const auto expect = clamp_sweep(*h.ckpt, std::vector<TokenId>{1, 2}, h.fixture.neuron,
                                    std::vector<float>{-20, 0, 20}, h.fixture.token);
    CHECK(got == wire::sweep(expect));

    const json grid = post_json("/sweep", {{"neuron", neuron},
                                           {"grid", {{"low", -10}, {"high", 10}, {"points", 5}}},
                                           {"target", "q"},
                                           {"prompt", "hey"}});
    CHECK(grid["points"].size() == 5);

    json empty = body;
    empty["values"] = json::array();
    const json err = post_json("/sweep", empty, 400);
    CHECK(err["code"] == "invalid_argument");
    CHECK(err.contains("message"));
}

TEST_CASE("POST /diff compares atlases on disk") {
    const json self = post_json("/diff", {{"atlas_a", "self.atlas"}, {"atlas_b", "self.atlas"},
                                          {"watch", {{{"layer", 1}, {"neuron", 2}}}}});
    CHECK(self["match_fraction"] == 1.0);
    CHECK(self["watchlist"][0]["preserved"] == true);
    CHECK(post_json("/diff", {{"atlas_a", "missing.atlas"}, {"atlas_b", "self.atlas"}}, 404)["code"] == "io_error");
    CHECK(post_json("/diff", {{"atlas_a", "self.atlas"}}, 400)["code"] == "invalid_argument");
}

TEST_CASE("malformed requests get structured errors") {
    auto res = harness().client().Post("/sweep", "{not json", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(json::parse(res->body)["code"] == "parse_error");
    CHECK(get_json("/nowhere", 404)["code"] == "not_found");
    CHECK(get_json("/feature", 400)["code"] == "invalid_argument");
    CHECK(get_json("/feature?token=ab", 400)["code"] == "multi_token");
    CHECK(get_json("/feature?token_id=999", 400)["code"] == "unknown_token");
    auto options = harness().client().Options("/feature");
    REQUIRE(options);
    CHECK(options->get_header_value("Access-Control-Allow-Origin") == "*");
}

TEST_CASE("POST /chat streams tokens and an identity clamp changes nothing") {
    auto& h = harness();
    const auto natural = probe_up_activations(*h.ckpt, std::vector<TokenId>{0}, std::span(&h.fixture.neuron, 1))[0][0];
    const json params{{"max_new_tokens", 6}};
    const auto plain = chat({{"message", "hello"}, {"params", params}});
    const auto identity = chat({{"message", "hello"},
                                {"params", params},
                                {"clamps", {{{"layer", h.fixture.neuron.layer},
                                             {"neuron", h.fixture.neuron.neuron},
                                             {"value", natural}}}}});
    REQUIRE(plain.size() == 7);
    REQUIRE(identity.size() == 7);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(plain[i].event == "token");
        CHECK(plain[i].data["index"] == i);
        CHECK(plain[i].data["id"] == identity[i].data["id"]);
    }
    CHECK(plain.back().event == "done");
    CHECK(plain.back().data["text"] == identity.back().data["text"]);
    CHECK(plain.back().data["session"] != identity.back().data["session"]);

    const ChatMessage msg{"user", "hello"};
    const auto prompt = encode_text(byte_vocabulary(), apply_chat_template(fixture_chat_template(), std::span(&msg, 1), true),
                                    SpecialTokens::parse);
    GenerationParams p;
    p.max_new_tokens = 6;
    CHECK(plain.back().data["ids"] == generate(*h.ckpt, prompt, {}, p));
}

TEST_CASE("chat sessions reuse the KV cache across turns") {
    auto& h = harness();
    const json params{{"max_new_tokens", 3}};
    const json clamp{{{"layer", h.fixture.neuron.layer}, {"neuron", h.fixture.neuron.neuron}, {"value", 60}}};
    const auto first = chat({{"message", "a"}, {"params", params}, {"clamps", clamp}});
    const std::string session = first.back().data["session"];
    CHECK(first.back().data["reused_cache"] == false);
    for (const auto& id : first.back().data["ids"]) CHECK(id == h.fixture.token);

    const auto second = chat({{"message", "b"}, {"session", session}, {"params", params}, {"clamps", clamp}});
    CHECK(second.back().data["reused_cache"] == true);
    CHECK(second.back().data["transcript"].size() == 4);

    // Changing clamps discards the cache but keeps the conversation.
    const auto third = chat({{"message", "c"}, {"session", session}, {"params", params}});
    CHECK(third.back().data["reused_cache"] == false);
    CHECK(third.back().data["transcript"].size() == 6);
}

TEST_CASE("chat errors before streaming are JSON, errors while streaming are SSE events") {
    CHECK(post_json("/chat", {{"params", {{"max_new_tokens", 2}}}}, 400)["code"] == "invalid_argument");
    CHECK(post_json("/chat", {{"message", "x"}, {"params", {{"max_new_tokens", 0}}}}, 400)["code"] ==
          "invalid_argument");
    CHECK(post_json("/chat", {{"message", "x"}, {"clamps", {{{"layer", 0}, {"neuron", 0}}}}}, 400)["code"] ==
          "invalid_argument");
    // A session started in template mode cannot continue in raw mode.
    const auto first = chat({{"message", "x"}, {"params", {{"max_new_tokens", 1}}}});
    const std::string session = first.back().data["session"];
    CHECK(post_json("/chat", {{"message", "y"}, {"session", session}, {"raw", true}}, 400)["code"] ==
          "invalid_argument");
    // An empty raw message encodes to nothing, which surfaces mid-stream.
    const auto events = chat({{"message", ""}, {"raw", true}});
    REQUIRE(events.size() == 1);
    CHECK(events[0].event == "error");
    CHECK(events[0].data["code"] == "invalid_argument");
}

TEST_CASE("concurrent read requests all succeed and agree") {
    auto& h = harness();
    const std::string path = "/feature?token_id=" + std::to_string(h.fixture.token) + "&top_n=4";
    const json expect = get_json(path);
    std::vector<std::future<json>> futures;
    for (int i = 0; i < 8; ++i)
        futures.push_back(std::async(std::launch::async, [&] {
            auto res = h.client().Get(path);
            return res && res->status == 200 ? json::parse(res->body) : json();
        }));
    for (auto& f : futures) CHECK(f.get() == expect);
}

TEST_CASE("bind addresses parse host and port forms") {
    CHECK(parse_bind_address("0.0.0.0:9000").host == "0.0.0.0");
    CHECK(parse_bind_address("0.0.0.0:9000").port == 9000);
    CHECK(parse_bind_address(":81").port == 81);
    CHECK(parse_bind_address(":81").host == "127.0.0.1");
    CHECK(parse_bind_address("7000").port == 7000);
    CHECK_THROWS(parse_bind_address("host:notaport"));
    ::setenv("NC_ADDR", "127.0.0.2:1234", 1);
    CHECK(default_bind_address().port == 1234);
    ::unsetenv("NC_ADDR");
    CHECK(default_bind_address().port == 8080);
}
