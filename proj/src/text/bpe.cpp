#include "minimt/bpe.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include "minimt/io.hpp"
#include "minimt/utf8.hpp"

namespace minimt {

namespace {

constexpr std::string_view kEndOfWordText = "</w>";

std::vector<std::string> to_symbols(std::string_view word) {
  std::vector<std::string> symbols;
  for (const auto& u : utf8::decode(word)) {
    symbols.emplace_back(word.substr(u.offset, u.length));
  }
  symbols.emplace_back(kEndOfWord);
  return symbols;
}

// Replaces every non-overlapping occurrence of (left, right), scanning left
// to right.
bool merge_pair(std::vector<std::string>& symbols, const std::string& left,
                const std::string& right) {
  bool changed = false;
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(left + right);
      ++i;
      changed = true;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
  return changed;
}

std::string symbol_to_text(std::string_view s) {
  if (!s.empty() && s.back() == kEndOfWord[0]) {
    return std::string(s.substr(0, s.size() - 1)) + std::string(kEndOfWordText);
  }
  return std::string(s);
}

std::string symbol_from_text(std::string_view s) {
  if (s.size() >= kEndOfWordText.size() &&
      s.substr(s.size() - kEndOfWordText.size()) == kEndOfWordText) {
    return std::string(s.substr(0, s.size() - kEndOfWordText.size())) +
           std::string(kEndOfWord);
  }
  return std::string(s);
}

}  // namespace

BpeModel::BpeModel(std::vector<SymbolPair> merges, std::string fingerprint)
    : merges_(std::move(merges)), fingerprint_(std::move(fingerprint)) {
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    if (!ranks_.emplace(merges_[i], static_cast<long>(i)).second) {
      throw BpeError("duplicate merge '" + symbol_to_text(merges_[i].first) + " " +
                     symbol_to_text(merges_[i].second) + "'");
    }
  }
}

long BpeModel::rank(const std::string& left, const std::string& right) const {
  auto it = ranks_.find(SymbolPair{left, right});
  return it == ranks_.end() ? -1 : it->second;
}

BpeModel bpe_learn(std::span<const std::string> corpus, std::size_t n_merges,
                   std::string_view joiner) {
  std::map<std::string, long long> counts;
  for (const auto& tok : corpus) {
    std::string_view word = joiner.empty() ? std::string_view(tok) : strip_joiners(tok, joiner);
    if (!word.empty()) ++counts[std::string(word)];
  }
  if (counts.empty()) throw BpeError("cannot learn BPE from an empty corpus");

  std::string table;
  for (const auto& [w, c] : counts) table += w + "\t" + std::to_string(c) + "\n";
  const std::string fingerprint = hex64(fnv1a64(table));

  std::vector<std::vector<std::string>> words;
  std::vector<long long> freq;
  for (const auto& [w, c] : counts) {
    words.push_back(to_symbols(w));
    freq.push_back(c);
  }

  std::map<SymbolPair, long long> pair_count;
  std::map<SymbolPair, std::set<std::size_t>> where;
  // Ordered by descending count, then ascending pair.
  std::set<std::tuple<long long, std::string, std::string>> queue;

  auto adjust = [&](const SymbolPair& p, long long delta) {
    long long& c = pair_count[p];
    if (c > 0) queue.erase({-c, p.first, p.second});
    c += delta;
    if (c > 0) queue.insert({-c, p.first, p.second});
  };
  auto account = [&](std::size_t wi, long long sign) {
    const auto& sym = words[wi];
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      SymbolPair p{sym[i], sym[i + 1]};
      adjust(p, sign * freq[wi]);
      if (sign > 0) where[p].insert(wi);
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) account(wi, +1);

  std::vector<SymbolPair> merges;
  while (merges.size() < n_merges && !queue.empty()) {
    const auto [neg, left, right] = *queue.begin();
    if (-neg < 2) break;
    SymbolPair best{left, right};
    merges.push_back(best);
    const auto affected = where[best];
    for (std::size_t wi : affected) {
      account(wi, -1);
      merge_pair(words[wi], left, right);
      account(wi, +1);
    }
    where.erase(best);
  }
  return BpeModel(std::move(merges), fingerprint);
}

std::vector<std::string> bpe_apply(const BpeModel& model, std::string_view token,
                                   std::string_view marker) {
  if (token.empty()) return {};
  std::vector<std::string> symbols = to_symbols(token);
  while (symbols.size() > 1) {
    long best = -1;
    std::size_t best_at = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const long r = model.rank(symbols[i], symbols[i + 1]);
      if (r >= 0 && (best < 0 || r < best)) {
        best = r;
        best_at = i;
      }
    }
    if (best < 0) break;
    const std::string left = symbols[best_at];
    const std::string right = symbols[best_at + 1];
    merge_pair(symbols, left, right);
  }
  // Drop the end-of-word symbol, whether standalone or merged.
  std::string& last = symbols.back();
  last.pop_back();
  if (last.empty()) symbols.pop_back();
  for (std::size_t i = 0; i + 1 < symbols.size(); ++i) symbols[i] += marker;
  return symbols;
}

std::vector<std::string> bpe_segment(const BpeModel& model,
                                     std::span<const std::string> tokens,
                                     std::string_view joiner) {
  std::vector<std::string> out;
  for (const auto& tok : tokens) {
    const bool lead = has_leading_joiner(tok, joiner);
    const bool trail = has_trailing_joiner(tok, joiner);
    auto pieces = bpe_apply(model, strip_joiners(tok, joiner), joiner);
    if (lead) pieces.front() = std::string(joiner) + pieces.front();
    if (trail) pieces.back() += joiner;
    for (auto& p : pieces) out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::string> bpe_merge_pieces(std::span<const std::string> pieces,
                                          std::string_view marker) {
  std::vector<std::string> out;
  bool glue = false;
  for (const auto& p : pieces) {
    std::string_view body = p;
    const bool cont = has_trailing_joiner(body, marker);
    if (cont) body.remove_suffix(marker.size());
    if (glue && !out.empty()) {
      out.back() += body;
    } else {
      out.emplace_back(body);
    }
    glue = cont;
  }
  return out;
}

std::string bpe_to_text(const BpeModel& model) {
  std::string out(kBpeHeader);
  out += '\n';
  for (const auto& [l, r] : model.merges()) {
    out += symbol_to_text(l) + " " + symbol_to_text(r) + "\n";
  }
  return out;
}

BpeModel bpe_from_text(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kBpeHeader) {
    throw BpeError("BPE model must start with '" + std::string(kBpeHeader) + "'");
  }
  std::vector<SymbolPair> merges;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() ||
        line.find(' ', sp + 1) != std::string::npos) {
      throw BpeError("malformed merge on line " + std::to_string(lineno));
    }
    merges.emplace_back(symbol_from_text(line.substr(0, sp)),
                        symbol_from_text(line.substr(sp + 1)));
  }
  return BpeModel(std::move(merges));
}

void save_bpe(const std::filesystem::path& path, const BpeModel& model) {
  write_file_atomic(path, bpe_to_text(model));
}

BpeModel load_bpe(const std::filesystem::path& path) {
  return bpe_from_text(read_file(path));
}

}  // namespace minimt
