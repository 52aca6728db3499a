#pragma once

#include <map>
#include <string>
#include <vector>

namespace zsad {

// Whitespace word-level tokenizer with a frozen vocabulary. Words are
// lowercased and stripped of edge punctuation before lookup; unknown words
// map to UNK. Sequences are BOS ... EOS then PAD to the context length.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;

    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> vocabulary);

    // Builds a vocabulary from every word appearing in the given texts,
    // sorted lexicographically for stable id assignment.
    static Tokenizer build(const std::vector<std::string>& texts);

    static std::vector<std::string> split_words(const std::string& text);

    std::vector<int> tokenize(const std::string& text, int context_length) const;
    int vocab_size() const { return int(words_.size()) + 4; }
    const std::vector<std::string>& words() const { return words_; }
    int id_of(const std::string& word) const;  // kUnk when absent

private:
    std::vector<std::string> words_;          // ids 4..
    std::map<std::string, int> index_;
};

}  // namespace zsad
