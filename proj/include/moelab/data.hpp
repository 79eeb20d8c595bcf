#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moelab/error.hpp"

namespace moelab::data {

enum class CorpusKind { synthetic_grammar, bundled_text };

inline CorpusKind parse_corpus_kind(std::string_view s) {
    if (s == "synthetic-grammar") {
        return CorpusKind::synthetic_grammar;
    }
    if (s == "bundled-text") {
        return CorpusKind::bundled_text;
    }
    throw InvalidArgument("unknown corpus kind '" + std::string(s) + "' (expected synthetic-grammar or bundled-text)");
}

inline std::string to_string(CorpusKind k) {
    return k == CorpusKind::synthetic_grammar ? "synthetic-grammar" : "bundled-text";
}

/// Grammar vocabulary, 64 symbols.
namespace grammar {

inline constexpr int kStop = 0;
inline constexpr int kComma = 1;
inline constexpr int kAnd = 2;
inline constexpr int kDetSingular = 3;  // 3 ids
inline constexpr int kDetPlural = 6;    // 3 ids
inline constexpr int kNounSingular = 9;  // 10 ids
inline constexpr int kNounPlural = 19;   // 10 ids
inline constexpr int kVerbSingular = 29;  // 8 ids
inline constexpr int kVerbPlural = 37;    // 8 ids
inline constexpr int kAdjective = 45;     // 8 ids
inline constexpr int kAdverb = 53;        // 5 ids
inline constexpr int kPreposition = 58;   // 4 ids
inline constexpr int kThat = 62;
inline constexpr int kWho = 63;
inline constexpr int kVocab = 64;

/// Sentence sampler. Determiners, nouns and verbs agree in number, and each
/// noun favours three of the eight verbs, which gives a model something
/// beyond unigram statistics to learn.
class Sampler {
public:
    explicit Sampler(std::uint64_t seed) : rng_(seed) {}

    void sentence(std::vector<int>& out) {
        clause(out, 0);
        while (chance(0.15)) {
            out.push_back(kComma);
            out.push_back(kAnd);
            clause(out, 0);
        }
        out.push_back(kStop);
    }

private:
    bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }
    int pick(int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng_); }

    int noun_phrase(std::vector<int>& out, int depth) {
        const bool plural = chance(0.4);
        out.push_back((plural ? kDetPlural : kDetSingular) + pick(3));
        int adjectives = 0;
        while (adjectives < 2 && chance(0.35)) {
            out.push_back(kAdjective + pick(8));
            ++adjectives;
        }
        const int noun = pick(10);
        out.push_back((plural ? kNounPlural : kNounSingular) + noun);
        if (depth < 2 && chance(0.12)) {
            out.push_back(kPreposition + pick(4));
            noun_phrase(out, depth + 1);
        }
        if (depth < 1 && chance(0.1)) {
            out.push_back(chance(0.5) ? kWho : kThat);
            verb_phrase(out, noun, plural, depth + 1);
        }
        return plural ? -(noun + 1) : noun + 1;
    }

    void verb_phrase(std::vector<int>& out, int noun, bool plural, int depth) {
        const int verb = chance(0.8) ? (noun * 3 + pick(3)) % 8 : pick(8);
        out.push_back((plural ? kVerbPlural : kVerbSingular) + verb);
        if (chance(0.7)) {
            noun_phrase(out, depth + 1);
        }
        if (chance(0.3)) {
            out.push_back(kAdverb + pick(5));
        }
    }

    void clause(std::vector<int>& out, int depth) {
        const int subject = noun_phrase(out, depth);
        const bool plural = subject < 0;
        const int noun = (plural ? -subject : subject) - 1;
        verb_phrase(out, noun, plural, depth);
    }

    std::mt19937_64 rng_;
};

}  // namespace grammar

// Opening of "Alice's Adventures in Wonderland" (Lewis Carroll, 1865), public domain.
inline constexpr std::string_view kBundledText =
    "Alice was beginning to get very tired of sitting by her sister on the bank, and of having nothing to do: "
    "once or twice she had peeped into the book her sister was reading, but it had no pictures or conversations "
    "in it, 'and what is the use of a book,' thought Alice 'without pictures or conversations?' So she was "
    "considering in her own mind (as well as she could, for the hot day made her feel very sleepy and stupid), "
    "whether the pleasure of making a daisy-chain would be worth the trouble of getting up and picking the "
    "daisies, when suddenly a White Rabbit with pink eyes ran close by her. There was nothing so very remarkable "
    "in that; nor did Alice think it so very much out of the way to hear the Rabbit say to itself, 'Oh dear! "
    "Oh dear! I shall be late!' (when she thought it over afterwards, it occurred to her that she ought to have "
    "wondered at this, but at the time it all seemed quite natural); but when the Rabbit actually took a watch "
    "out of its waistcoat-pocket, and looked at it, and then hurried on, Alice started to her feet, for it "
    "flashed across her mind that she had never before seen a rabbit with either a waistcoat-pocket, or a watch "
    "to take out of it, and burning with curiosity, she ran across the field after it, and fortunately was just "
    "in time to see it pop down a large rabbit-hole under the hedge. In another moment down went Alice after it, "
    "never once considering how in the world she was to get out again. The rabbit-hole went straight on like a "
    "tunnel for some way, and then dipped suddenly down, so suddenly that Alice had not a moment to think about "
    "stopping herself before she found herself falling down a very deep well.\n";

/// Token sequence of exactly `size` ids. The grammar uses ids < 64; bundled
/// text is byte-level (< 256) and wraps around when `size` exceeds it.
inline std::vector<int> make_corpus(CorpusKind kind, std::int64_t size, std::uint64_t seed) {
    if (size <= 0) {
        throw InvalidArgument("corpus size must be positive");
    }
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(size) + 64);
    if (kind == CorpusKind::synthetic_grammar) {
        grammar::Sampler sampler(seed);
        while (static_cast<std::int64_t>(out.size()) < size) {
            sampler.sentence(out);
        }
    } else {
        const std::size_t offset = static_cast<std::size_t>(seed % kBundledText.size());
        for (std::int64_t i = 0; i < size; ++i) {
            out.push_back(static_cast<unsigned char>(kBundledText[(offset + static_cast<std::size_t>(i)) % kBundledText.size()]));
        }
    }
    out.resize(static_cast<std::size_t>(size));
    return out;
}

inline std::vector<int> make_corpus(std::string_view kind, std::int64_t size, std::uint64_t seed) {
    return make_corpus(parse_corpus_kind(kind), size, seed);
}

inline int vocab_of(CorpusKind kind) { return kind == CorpusKind::synthetic_grammar ? grammar::kVocab : 256; }

struct Batch {
    std::vector<int> inputs;
    std::vector<int> targets;
};

/// Splits a token stream into contiguous non-overlapping windows of
/// seq_len + 1 tokens; each window gives seq_len (input, next-token) pairs.
class WindowSet {
public:
    WindowSet(std::span<const int> tokens, int seq_len) : seq_len_(seq_len) {
        if (seq_len < 1) {
            throw InvalidArgument("seq_len must be positive");
        }
        const std::size_t w = static_cast<std::size_t>(seq_len) + 1;
        for (std::size_t start = 0; start + w <= tokens.size(); start += w) {
            windows_.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                  tokens.begin() + static_cast<std::ptrdiff_t>(start + w));
        }
    }

    [[nodiscard]] std::size_t size() const noexcept { return windows_.size(); }
    [[nodiscard]] bool empty() const noexcept { return windows_.empty(); }

    [[nodiscard]] Batch gather(std::span<const std::size_t> indices) const {
        Batch b;
        for (std::size_t i : indices) {
            const auto& w = windows_.at(i);
            b.inputs.insert(b.inputs.end(), w.begin(), w.end() - 1);
            b.targets.insert(b.targets.end(), w.begin() + 1, w.end());
        }
        return b;
    }

private:
    int seq_len_;
    std::vector<std::vector<int>> windows_;
};

/// Visits training windows in seeded shuffled epochs.
class Batcher {
public:
    Batcher(const WindowSet& windows, int batch_seqs, std::uint64_t seed)
        : windows_(windows), batch_seqs_(batch_seqs), rng_(seed) {
        if (batch_seqs < 1) {
            throw InvalidArgument("batch must hold at least one sequence");
        }
        if (windows.size() < static_cast<std::size_t>(batch_seqs)) {
            throw InvalidArgument("training split has " + std::to_string(windows.size()) + " windows, fewer than one batch");
        }
        order_.resize(windows.size());
        reshuffle();
    }

    Batch next() {
        std::vector<std::size_t> pick;
        while (static_cast<int>(pick.size()) < batch_seqs_) {
            if (cursor_ == order_.size()) {
                reshuffle();
            }
            pick.push_back(order_[cursor_++]);
        }
        return windows_.gather(pick);
    }

private:
    void reshuffle() {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }

    const WindowSet& windows_;
    int batch_seqs_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace moelab::data
