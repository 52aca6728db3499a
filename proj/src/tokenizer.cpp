#include "zsad/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

namespace zsad {

namespace {
std::string normalize_word(const std::string& w) {
    std::string out;
    out.reserve(w.size());
    for (char ch : w) out.push_back(char(std::tolower((unsigned char)ch)));
    auto is_punct = [](char ch) {
        return ch == '.' || ch == ',' || ch == '!' || ch == '?' || ch == ';' ||
               ch == ':' || ch == '"' || ch == '\'';
    };
    size_t b = 0, e = out.size();
    while (b < e && is_punct(out[b])) ++b;
    while (e > b && is_punct(out[e - 1])) --e;
    return out.substr(b, e - b);
}
}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) : words_(std::move(vocabulary)) {
    std::sort(words_.begin(), words_.end());
    words_.erase(std::unique(words_.begin(), words_.end()), words_.end());
    for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = int(i) + 4;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts) {
    std::set<std::string> vocab;
    for (const auto& t : texts)
        for (const auto& w : split_words(t)) vocab.insert(w);
    return Tokenizer(std::vector<std::string>(vocab.begin(), vocab.end()));
}

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace((unsigned char)ch)) {
            if (!cur.empty()) {
                std::string n = normalize_word(cur);
                if (!n.empty()) out.push_back(n);
                cur.clear();
            }
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) {
        std::string n = normalize_word(cur);
        if (!n.empty()) out.push_back(n);
    }
    return out;
}

std::vector<int> Tokenizer::tokenize(const std::string& text, int context_length) const {
    auto words = split_words(text);
    if (words.empty()) throw std::invalid_argument("tokenize: empty text");
    if (int(words.size()) + 2 > context_length)
        throw std::length_error("tokenize: text exceeds context length (" +
                                std::to_string(words.size() + 2) + " > " +
                                std::to_string(context_length) + "): " + text);
    std::vector<int> ids;
    ids.reserve(size_t(context_length));
    ids.push_back(kBos);
    for (const auto& w : words) ids.push_back(id_of(w));
    ids.push_back(kEos);
    while (int(ids.size()) < context_length) ids.push_back(kPad);
    return ids;
}

int Tokenizer::id_of(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

}  // namespace zsad
