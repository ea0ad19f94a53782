#include "libra/seqio/vocab.hpp"

#include <algorithm>

#include "libra/error.hpp"

namespace libra::seqio {

Vocab::Vocab() : base_(static_cast<int>(kAlphabet.size())) {
    std::fill(std::begin(lookup_), std::end(lookup_), -1);
    for (std::size_t i = 0; i < kAlphabet.size(); ++i)
        lookup_[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i);
    lookup_[static_cast<unsigned char>('\n')] = newline();
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        const int id = lookup_[static_cast<unsigned char>(text[i])];
        if (id < 0)
            throw InputError("character " + std::to_string(static_cast<int>(static_cast<unsigned char>(text[i]))) +
                             " at offset " + std::to_string(i) + " is outside the vocabulary");
        ids.push_back(id);
    }
    return ids;
}

std::string Vocab::token_string(int id) const {
    if (id >= 0 && id < base_) return std::string(1, kAlphabet[static_cast<std::size_t>(id)]);
    if (id == newline()) return "\n";
    if (id == pad()) return "<pad>";
    if (id == boi()) return "<boi>";
    if (id == eoi()) return "<eoi>";
    if (id == eos()) return "<eos>";
    throw ContractViolation("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) out += token_string(id);
    return out;
}

}  // namespace libra::seqio
