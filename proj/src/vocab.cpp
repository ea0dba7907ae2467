#include "cacheproc/vocab.h"

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "cacheproc/common.h"

namespace cacheproc {

Vocab Vocab::base() {
    Vocab v;
    v.add("<pad>");
    v.add("<bos>");
    v.add("\n");
    v.add("<eos>");
    v.add("<pause>");
    return v;
}

int Vocab::add(const std::string& symbol) {
    auto it = ids_.find(symbol);
    if (it != ids_.end()) return it->second;
    const int id = size();
    symbols_.push_back(symbol);
    ids_[symbol] = id;
    return id;
}

int Vocab::id(const std::string& symbol) const {
    auto it = ids_.find(symbol);
    check(it != ids_.end(), "vocab: unknown symbol '" + symbol + "'");
    return it->second;
}

bool Vocab::has(const std::string& symbol) const { return ids_.count(symbol) > 0; }

const std::string& Vocab::symbol(int id) const {
    check(id >= 0 && id < size(), "vocab: id " + std::to_string(id) + " out of range");
    return symbols_[id];
}

std::vector<int> Vocab::encode(const std::string& text) const {
    std::vector<int> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(id(word));
            word.clear();
        }
    };
    for (char c : text) {
        if (c == '\n') {
            flush();
            out.push_back(kNewline);
        } else if (c == ' ') {
            flush();
        } else {
            word.push_back(c);
        }
    }
    flush();
    return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    bool line_start = true;
    for (int id : ids) {
        if (id == kNewline) {
            out.push_back('\n');
            line_start = true;
            continue;
        }
        if (!line_start) out.push_back(' ');
        out += symbol(id);
        line_start = false;
    }
    return out;
}

std::string Vocab::decode_text(const std::vector<int>& ids) const {
    std::vector<int> kept;
    for (int id : ids) {
        if (id == kPad || id == kBos || id == kEos || id == kPause) continue;
        kept.push_back(id);
    }
    return decode(kept);
}

void Vocab::save(const std::string& path) const {
    nlohmann::json j;
    j["symbols"] = symbols_;
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "vocab: cannot open '" + path + "' for writing");
    f << j.dump() << "\n";
    check(f.good(), "vocab: write to '" + path + "' failed");
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "vocab: cannot open '" + path + "'");
    nlohmann::json j;
    f >> j;
    Vocab v;
    for (const auto& s : j.at("symbols")) {
        v.add(s.get<std::string>());
    }
    check(v.size() >= 5, "vocab: file '" + path + "' is missing reserved symbols");
    return v;
}

}  // namespace cacheproc
