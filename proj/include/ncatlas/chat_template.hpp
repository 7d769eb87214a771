#pragma once

#include "ncatlas/numerics.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ncatlas {

class Vocabulary;

struct ChatMessage {
    std::string role;
    std::string text;
};

// Role-wise prefix/suffix strings around each message, plus a conversation
// prefix (e.g. a begin-of-text marker) and the string that opens the
// assistant's turn.
struct ChatTemplate {
    struct Role {
        std::string prefix;
        std::string suffix;
    };

    std::string name;
    std::string prefix;
    std::map<std::string, Role> roles;
    std::string generation_prompt;
    std::vector<std::string> stop;  // special-token strings that end a turn
};

ChatTemplate parse_chat_template(std::string_view json_text);
ChatTemplate load_chat_template(const std::filesystem::path& path);

std::string apply_chat_template(const ChatTemplate& tmpl, std::span<const ChatMessage> messages,
                                bool add_generation_prompt = false);

// Ids of the template's stop strings that exist as single tokens.
std::set<TokenId> stop_token_ids(const ChatTemplate& tmpl, const Vocabulary& vocab);

} // namespace ncatlas
