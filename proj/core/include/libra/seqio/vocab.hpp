#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace libra::seqio {

/// Character-level text vocabulary followed by special tokens. The character
/// '\n' encodes to the newline special.
class Vocab {
public:
    Vocab();

    static constexpr std::string_view kAlphabet =
        "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,:;'?!-[]()";

    int pad() const { return base_; }
    int boi() const { return base_ + 1; }
    int eoi() const { return base_ + 2; }
    int newline() const { return base_ + 3; }
    int eos() const { return base_ + 4; }
    int size() const { return base_ + 5; }
    int char_count() const { return base_; }
    bool is_special(int id) const { return id >= base_ && id < size(); }

    std::vector<int> encode(std::string_view text) const;
    /// Inverse of encode; specials other than newline render as "<boi>" etc.
    std::string decode(const std::vector<int>& ids) const;
    std::string token_string(int id) const;

private:
    int base_;
    int lookup_[256];
};

}  // namespace libra::seqio
