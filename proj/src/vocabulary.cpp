#include "ncatlas/vocabulary.hpp"

#include "ncatlas/error.hpp"

#include <json.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace ncatlas {

namespace {

using nlohmann::json;

// GPT-2 byte <-> printable codepoint table.
struct ByteTable {
    std::array<char32_t, 256> byte_to_cp{};
    std::unordered_map<char32_t, unsigned char> cp_to_byte;

    ByteTable() {
        char32_t next = 256;
        for (int b = 0; b < 256; ++b) {
            const bool printable = (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
            byte_to_cp[b] = printable ? char32_t(b) : next++;
            cp_to_byte[byte_to_cp[b]] = static_cast<unsigned char>(b);
        }
    }
};

const ByteTable& byte_table() {
    static const ByteTable table;
    return table;
}

void append_utf8(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

constexpr char32_t invalid_cp = 0xFFFFFFFF;

// Decodes one codepoint at text[pos]; invalid sequences yield invalid_cp with length 1.
char32_t next_codepoint(std::string_view text, std::size_t pos, std::size_t& length) {
    const auto c0 = static_cast<unsigned char>(text[pos]);
    std::size_t need = 0;
    char32_t cp = 0;
    if (c0 < 0x80) {
        length = 1;
        return c0;
    } else if ((c0 & 0xE0) == 0xC0) {
        need = 1;
        cp = c0 & 0x1F;
    } else if ((c0 & 0xF0) == 0xE0) {
        need = 2;
        cp = c0 & 0x0F;
    } else if ((c0 & 0xF8) == 0xF0) {
        need = 3;
        cp = c0 & 0x07;
    } else {
        length = 1;
        return invalid_cp;
    }
    if (pos + need >= text.size()) {
        length = 1;
        return invalid_cp;
    }
    for (std::size_t i = 1; i <= need; ++i) {
        const auto c = static_cast<unsigned char>(text[pos + i]);
        if ((c & 0xC0) != 0x80) {
            length = 1;
            return invalid_cp;
        }
        cp = (cp << 6) | (c & 0x3F);
    }
    length = need + 1;
    return cp;
}

// Token string from a tokenizer file -> raw bytes. Strings that use
// codepoints outside the byte table are taken as literal UTF-8.
std::string byte_level_decode(const std::string& token) {
    const auto& table = byte_table();
    std::string out;
    std::size_t pos = 0;
    while (pos < token.size()) {
        std::size_t len = 0;
        const char32_t cp = next_codepoint(token, pos, len);
        auto it = table.cp_to_byte.find(cp);
        if (cp == invalid_cp || it == table.cp_to_byte.end()) return token;
        out.push_back(static_cast<char>(it->second));
        pos += len;
    }
    return out;
}

std::string byte_level_encode(std::string_view bytes) {
    const auto& table = byte_table();
    std::string out;
    for (char c : bytes) append_utf8(out, table.byte_to_cp[static_cast<unsigned char>(c)]);
    return out;
}

std::string rank_key(std::string_view left, std::string_view right) {
    std::string key = std::to_string(left.size());
    key.push_back(':');
    key.append(left);
    key.append(right);
    return key;
}

enum class CharClass { letter, digit, space, newline, other };

CharClass classify(char32_t cp) {
    if (cp == '\r' || cp == '\n') return CharClass::newline;
    if (cp == ' ' || cp == '\t' || cp == '\v' || cp == '\f' || cp == 0x85 || cp == 0xA0 || cp == 0x1680 ||
        (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 || cp == 0x202F || cp == 0x205F ||
        cp == 0x3000)
        return CharClass::space;
    if (cp >= '0' && cp <= '9') return CharClass::digit;
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return CharClass::letter;
    if (cp == invalid_cp || cp < 0x80) return CharClass::other;
    // Coarse non-ASCII split: Latin-1 symbols, general punctuation and CJK
    // punctuation count as punctuation; everything else as letters.
    if ((cp >= 0xA1 && cp <= 0xBF) || cp == 0xD7 || cp == 0xF7 || (cp >= 0x2010 && cp <= 0x206F) ||
        (cp >= 0x3001 && cp <= 0x303F) || (cp >= 0xFF01 && cp <= 0xFF0F))
        return CharClass::other;
    return CharClass::letter;
}

struct Cp {
    char32_t cp;
    std::size_t begin;
    std::size_t length;
    CharClass cls;
};

bool is_ws(CharClass c) { return c == CharClass::space || c == CharClass::newline; }

char32_t lower_ascii(char32_t cp) { return (cp >= 'A' && cp <= 'Z') ? cp + 32 : cp; }

// Length (in codepoints) of the contraction at i, or 0.
std::size_t match_contraction(const std::vector<Cp>& cps, std::size_t i) {
    if (cps[i].cp != '\'' || i + 1 >= cps.size()) return 0;
    const char32_t a = lower_ascii(cps[i + 1].cp);
    if (a == 's' || a == 't' || a == 'm' || a == 'd') return 2;
    if (i + 2 < cps.size()) {
        const char32_t b = lower_ascii(cps[i + 2].cp);
        if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) return 3;
    }
    return 0;
}

std::size_t match_chunk(const std::vector<Cp>& cps, std::size_t i) {
    const std::size_t n = cps.size();
    if (std::size_t len = match_contraction(cps, i)) return len;

    // [^\r\n\p{L}\p{N}]?\p{L}+
    {
        std::size_t j = i;
        const CharClass c = cps[j].cls;
        if (c != CharClass::letter && c != CharClass::digit && c != CharClass::newline && j + 1 < n &&
            cps[j + 1].cls == CharClass::letter)
            ++j;
        if (cps[j].cls == CharClass::letter) {
            while (j < n && cps[j].cls == CharClass::letter) ++j;
            return j - i;
        }
    }
    // \p{N}{1,3}
    if (cps[i].cls == CharClass::digit) {
        std::size_t j = i;
        while (j < n && j - i < 3 && cps[j].cls == CharClass::digit) ++j;
        return j - i;
    }
    // ' '?[^\s\p{L}\p{N}]+[\r\n]*
    {
        std::size_t j = i;
        if (cps[j].cp == ' ' && j + 1 < n && cps[j + 1].cls == CharClass::other) ++j;
        if (cps[j].cls == CharClass::other) {
            while (j < n && cps[j].cls == CharClass::other) ++j;
            while (j < n && cps[j].cls == CharClass::newline) ++j;
            return j - i;
        }
    }
    // whitespace alternatives
    std::size_t run = i;
    while (run < n && is_ws(cps[run].cls)) ++run;
    if (run > i) {
        // \s*[\r\n]+ : up to the end of the last newline in the run
        std::size_t last_newline = n;
        for (std::size_t j = i; j < run; ++j)
            if (cps[j].cls == CharClass::newline) last_newline = j;
        if (last_newline != n) return last_newline + 1 - i;
        // \s+(?!\S)
        if (run == n) return run - i;
        if (run - i >= 2) return run - i - 1;
        // \s+
        return run - i;
    }
    return 1;
}

} // namespace

Vocabulary::Vocabulary(std::vector<Entry> entries, std::vector<std::pair<std::string, std::string>> merges,
                       std::optional<std::size_t> vocab_size)
    : merges_(std::move(merges)) {
    std::size_t size = 0;
    for (const auto& e : entries) {
        if (vocab_size && e.id >= *vocab_size)
            throw Error(ErrorCode::out_of_range, "token id " + std::to_string(e.id) + " is >= vocab_size " +
                                                     std::to_string(*vocab_size));
        size = std::max<std::size_t>(size, std::size_t(e.id) + 1);
    }
    id_to_bytes_.resize(size);
    present_.assign(size, false);
    special_.assign(size, false);
    for (auto& e : entries) {
        if (present_[e.id]) throw Error(ErrorCode::parse_error, "duplicate token id " + std::to_string(e.id));
        if (!bytes_to_id_.emplace(e.bytes, e.id).second)
            throw Error(ErrorCode::parse_error, "token ids " + std::to_string(bytes_to_id_.at(e.bytes)) + " and " +
                                                    std::to_string(e.id) + " share the same bytes");
        present_[e.id] = true;
        special_[e.id] = e.special;
        if (e.special) specials_[e.bytes] = e.id;
        id_to_bytes_[e.id] = std::move(e.bytes);
    }
    for (std::size_t r = 0; r < merges_.size(); ++r) ranks_.emplace(rank_key(merges_[r].first, merges_[r].second), r);
}

const std::string& Vocabulary::bytes(TokenId id) const {
    if (!contains(id)) throw Error(ErrorCode::unknown_token, "unknown token id " + std::to_string(id));
    return id_to_bytes_[id];
}

std::optional<TokenId> Vocabulary::find(std::string_view b) const {
    auto it = bytes_to_id_.find(std::string(b));
    if (it == bytes_to_id_.end()) return std::nullopt;
    return it->second;
}

std::optional<std::size_t> Vocabulary::merge_rank(std::string_view left, std::string_view right) const {
    auto it = ranks_.find(rank_key(left, right));
    if (it == ranks_.end()) return std::nullopt;
    return it->second;
}

Vocabulary parse_vocabulary(std::string_view json_text, std::optional<std::size_t> vocab_size) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("tokenizer file is not valid JSON: ") + e.what());
    }
    std::vector<Vocabulary::Entry> entries;
    std::vector<std::pair<std::string, std::string>> merges;
    bool ignore_merges = false;
    try {
        const json& model = doc.at("model");
        std::map<TokenId, std::string> by_id;
        for (const auto& [token, id_json] : model.at("vocab").items()) {
            const auto id = id_json.get<long long>();
            if (id < 0 || id > std::numeric_limits<TokenId>::max())
                throw Error(ErrorCode::out_of_range, "token id " + std::to_string(id) + " is out of range");
            if (!by_id.emplace(TokenId(id), token).second)
                throw Error(ErrorCode::parse_error, "duplicate token id " + std::to_string(id));
        }
        std::map<TokenId, std::pair<std::string, bool>> added;
        if (auto it = doc.find("added_tokens"); it != doc.end() && it->is_array()) {
            for (const auto& t : *it) {
                const auto id = t.at("id").get<long long>();
                if (id < 0 || id > std::numeric_limits<TokenId>::max())
                    throw Error(ErrorCode::out_of_range, "token id " + std::to_string(id) + " is out of range");
                const auto content = t.at("content").get<std::string>();
                auto existing = by_id.find(TokenId(id));
                if (existing != by_id.end()) {
                    if (byte_level_decode(existing->second) != content && existing->second != content)
                        throw Error(ErrorCode::parse_error, "duplicate token id " + std::to_string(id));
                    by_id.erase(existing);
                }
                if (!added.emplace(TokenId(id), std::make_pair(content, t.value("special", true))).second)
                    throw Error(ErrorCode::parse_error, "duplicate token id " + std::to_string(id));
            }
        }
        for (const auto& [id, token] : by_id) entries.push_back({id, byte_level_decode(token), false});
        for (const auto& [id, info] : added) entries.push_back({id, info.first, info.second});

        ignore_merges = model.value("ignore_merges", false);
        if (auto it = model.find("merges"); it != model.end()) {
            for (const auto& m : *it) {
                std::string left, right;
                if (m.is_string()) {
                    const auto s = m.get<std::string>();
                    const auto space = s.find(' ');
                    if (space == std::string::npos) throw Error(ErrorCode::parse_error, "malformed merge '" + s + "'");
                    left = s.substr(0, space);
                    right = s.substr(space + 1);
                } else {
                    left = m.at(0).get<std::string>();
                    right = m.at(1).get<std::string>();
                }
                merges.emplace_back(byte_level_decode(left), byte_level_decode(right));
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("malformed tokenizer file: ") + e.what());
    }
    Vocabulary vocab(std::move(entries), std::move(merges), vocab_size);
    vocab.set_ignore_merges(ignore_merges);
    return vocab;
}

Vocabulary load_vocabulary(const std::filesystem::path& path, std::optional<std::size_t> vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open tokenizer file " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_vocabulary(buffer.str(), vocab_size);
}

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
    json vocab_json = json::object();
    json added = json::array();
    for (TokenId id = 0; id < vocab.size(); ++id) {
        if (!vocab.contains(id)) continue;
        if (vocab.is_special(id)) {
            added.push_back({{"id", id}, {"content", vocab.bytes(id)}, {"special", true}});
        } else {
            vocab_json[byte_level_encode(vocab.bytes(id))] = id;
        }
    }
    json merges = json::array();
    for (const auto& [l, r] : vocab.merges()) merges.push_back(byte_level_encode(l) + " " + byte_level_encode(r));
    json doc = {{"version", "1.0"},
                {"added_tokens", added},
                {"pre_tokenizer", {{"type", "ByteLevel"}}},
                {"model",
                 {{"type", "BPE"}, {"ignore_merges", vocab.ignore_merges()}, {"vocab", vocab_json}, {"merges", merges}}}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io_error, "cannot write tokenizer file " + path.string());
    out << doc.dump(1) << '\n';
}

Vocabulary byte_vocabulary() {
    std::vector<Vocabulary::Entry> entries;
    for (int b = 0; b < 256; ++b) entries.push_back({TokenId(b), std::string(1, static_cast<char>(b)), false});
    return Vocabulary(std::move(entries), {});
}

std::vector<std::string_view> pretokenize(std::string_view text) {
    std::vector<Cp> cps;
    for (std::size_t pos = 0; pos < text.size();) {
        std::size_t len = 0;
        const char32_t cp = next_codepoint(text, pos, len);
        cps.push_back({cp, pos, len, classify(cp)});
        pos += len;
    }
    std::vector<std::string_view> chunks;
    for (std::size_t i = 0; i < cps.size();) {
        const std::size_t len = match_chunk(cps, i);
        const std::size_t begin = cps[i].begin;
        const std::size_t end = cps[i + len - 1].begin + cps[i + len - 1].length;
        chunks.push_back(text.substr(begin, end - begin));
        i += len;
    }
    return chunks;
}

namespace {

void encode_chunk(const Vocabulary& vocab, std::string_view chunk, std::vector<TokenId>& out) {
    if (vocab.ignore_merges()) {
        if (auto id = vocab.find(chunk); id && !vocab.is_special(*id)) {
            out.push_back(*id);
            return;
        }
    }
    std::vector<std::string> symbols;
    symbols.reserve(chunk.size());
    for (char c : chunk) symbols.emplace_back(1, c);

    while (symbols.size() > 1) {
        std::size_t best = std::numeric_limits<std::size_t>::max();
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            if (auto r = vocab.merge_rank(symbols[i], symbols[i + 1]); r && *r < best) best = *r;
        }
        if (best == std::numeric_limits<std::size_t>::max()) break;
        const auto& [left, right] = vocab.merges()[best];
        std::vector<std::string> merged;
        merged.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size();) {
            if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
                merged.push_back(left + right);
                i += 2;
            } else {
                merged.push_back(std::move(symbols[i]));
                ++i;
            }
        }
        symbols = std::move(merged);
    }
    for (const auto& s : symbols) {
        if (auto id = vocab.find(s)) {
            out.push_back(*id);
            continue;
        }
        for (char c : s) {
            auto id = vocab.find(std::string_view(&c, 1));
            if (!id) {
                char buf[8];
                std::snprintf(buf, sizeof buf, "0x%02x", static_cast<unsigned char>(c));
                throw Error(ErrorCode::unknown_token, std::string("byte ") + buf + " has no token in this vocabulary");
            }
            out.push_back(*id);
        }
    }
}

void encode_plain(const Vocabulary& vocab, std::string_view text, std::vector<TokenId>& out) {
    for (auto chunk : pretokenize(text)) encode_chunk(vocab, chunk, out);
}

} // namespace

std::vector<TokenId> encode_text(const Vocabulary& vocab, std::string_view text, SpecialTokens specials) {
    std::vector<TokenId> out;
    if (specials == SpecialTokens::ignore || vocab.special_tokens().empty()) {
        encode_plain(vocab, text, out);
        return out;
    }
    std::size_t start = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::pair<const std::string, TokenId>* match = nullptr;
        for (const auto& entry : vocab.special_tokens()) {
            if (!entry.first.empty() && text.substr(pos).starts_with(entry.first) &&
                (!match || entry.first.size() > match->first.size()))
                match = &entry;
        }
        if (!match) {
            ++pos;
            continue;
        }
        encode_plain(vocab, text.substr(start, pos - start), out);
        out.push_back(match->second);
        pos += match->first.size();
        start = pos;
    }
    encode_plain(vocab, text.substr(start), out);
    return out;
}

std::string decode_tokens(const Vocabulary& vocab, std::span<const TokenId> ids) {
    std::string out;
    for (TokenId id : ids) out += vocab.bytes(id);
    return out;
}

TokenId lookup_token(const Vocabulary& vocab, std::string_view surface) {
    if (auto id = vocab.find(surface)) return *id;
    const auto ids = encode_text(vocab, surface);
    std::string listing;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) listing += ", ";
        listing += std::to_string(ids[i]) + " \"" + display_token(vocab, ids[i]) + "\"";
    }
    throw Error(ErrorCode::multi_token, "\"" + std::string(surface) + "\" is not a single token; it encodes as " +
                                            std::to_string(ids.size()) + " tokens: [" + listing + "]");
}

std::string display_token(const Vocabulary& vocab, TokenId id) {
    const std::string& bytes = vocab.bytes(id);
    std::string out;
    auto escape = [&](unsigned char b) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "\\x%02x", b);
        out += buf;
    };
    for (std::size_t pos = 0; pos < bytes.size();) {
        std::size_t len = 1;
        const char32_t cp = next_codepoint(bytes, pos, len);
        const auto b = static_cast<unsigned char>(bytes[pos]);
        if (cp == invalid_cp) escape(b);
        else if (b == '\n') out += "\\n";
        else if (b == '\t') out += "\\t";
        else if (b == '\\') out += "\\\\";
        else if (cp < 0x20 || cp == 0x7F) escape(b);
        else out.append(bytes, pos, len);
        pos += len;
    }
    return out;
}

} // namespace ncatlas
