#pragma once

#include "ncatlas/atlas.hpp"
#include "ncatlas/chat_template.hpp"
#include "ncatlas/query.hpp"
#include "ncatlas/vocabulary.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace ncatlas {

struct ServiceResources {
    std::shared_ptr<const ModelCheckpoint> checkpoint;
    std::shared_ptr<const Vocabulary> vocab;  // optional; text endpoints need it
    std::optional<ChatTemplate> chat_template;
    std::shared_ptr<const Atlas> atlas;       // optional; /neuron decodes on the fly without it
    QueryOptions query;                       // defaults, overridable per request
    std::string model_name;
    // Relative atlas paths in POST /diff resolve against this directory.
    std::filesystem::path atlas_dir = ".";
};

struct BindAddress {
    std::string host = "127.0.0.1";
    int port = 8080;
};

// "host:port", ":port" or "port".
BindAddress parse_bind_address(std::string_view text);
// NC_ADDR when set, otherwise 127.0.0.1:8080.
BindAddress default_bind_address();

// HTTP facade over the library:
//   GET  /models
//   GET  /feature?token=|token_id=&top_n=
//   GET  /heatmap?token=|token_id=&columns=&format=json|data
//   GET  /neuron/{layer}/{index}?top_n=
//   POST /diff   {atlas_a, atlas_b, watch?}
//   POST /sweep  {prompt|prompt_ids, neuron, values|grid, target|target_id}
//   POST /chat   {session?, message, clamps?, params?, raw?}  -> text/event-stream
// Read endpoints also accept mode, apply_final_norm and matrix_kind.
// Errors are {"code", "message"} with a 4xx/5xx status.
class Service {
public:
    explicit Service(ServiceResources resources);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Returns the bound port; port 0 picks a free one.
    int bind(const std::string& host, int port);
    void listen();  // blocks until stop()
    void start();   // listen() on a background thread
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace ncatlas
