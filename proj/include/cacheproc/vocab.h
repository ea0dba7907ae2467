#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace cacheproc {

// Closed word-level vocabulary. Ids are dense in [0, size); the first five are
// reserved control tokens, and NEWLINE is the unique step-boundary trigger.
class Vocab {
  public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kNewline = 2;
    static constexpr int kEos = 3;
    static constexpr int kPause = 4;

    static Vocab base();  // reserved tokens only

    int add(const std::string& symbol);  // idempotent, returns id
    int id(const std::string& symbol) const;
    bool has(const std::string& symbol) const;
    const std::string& symbol(int id) const;
    int size() const { return static_cast<int>(symbols_.size()); }

    // Word-level round trip: words split on spaces, '\n' is its own token.
    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;
    // decode that drops PAD/BOS/EOS/PAUSE; used for answer extraction.
    std::string decode_text(const std::vector<int>& ids) const;

    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

  private:
    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int> ids_;
};

}  // namespace cacheproc
