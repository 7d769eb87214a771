#include "ncatlas/chat_template.hpp"

#include "ncatlas/error.hpp"
#include "ncatlas/vocabulary.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace ncatlas {

ChatTemplate parse_chat_template(std::string_view json_text) {
    using nlohmann::json;
    ChatTemplate t;
    try {
        const json doc = json::parse(json_text);
        t.name = doc.value("name", std::string{});
        t.prefix = doc.value("prefix", std::string{});
        t.generation_prompt = doc.value("generation_prompt", std::string{});
        for (const auto& [role, spec] : doc.at("roles").items()) {
            t.roles[role] = {spec.value("prefix", std::string{}), spec.value("suffix", std::string{})};
        }
        if (auto it = doc.find("stop"); it != doc.end()) t.stop = it->get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("malformed chat template: ") + e.what());
    }
    if (t.roles.empty()) throw Error(ErrorCode::parse_error, "chat template defines no roles");
    return t;
}

ChatTemplate load_chat_template(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open chat template " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_chat_template(buffer.str());
}

std::string apply_chat_template(const ChatTemplate& tmpl, std::span<const ChatMessage> messages,
                                bool add_generation_prompt) {
    std::string out = tmpl.prefix;
    for (const auto& m : messages) {
        auto it = tmpl.roles.find(m.role);
        if (it == tmpl.roles.end())
            throw Error(ErrorCode::invalid_argument, "unknown role '" + m.role + "' for chat template '" + tmpl.name + "'");
        out += it->second.prefix;
        out += m.text;
        out += it->second.suffix;
    }
    if (add_generation_prompt) out += tmpl.generation_prompt;
    return out;
}

std::set<TokenId> stop_token_ids(const ChatTemplate& tmpl, const Vocabulary& vocab) {
    std::set<TokenId> ids;
    for (const auto& s : tmpl.stop)
        if (auto id = vocab.find(s)) ids.insert(*id);
    return ids;
}

} // namespace ncatlas
