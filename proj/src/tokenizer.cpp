#include "fedsplit/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "fedsplit/tensor.hpp"

namespace fedsplit {

namespace {

const char* const kReservedNames[Vocab::kNumReserved] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                         "[MASK]"};

bool printable(char c) { return c > 0x20 && c < 0x7f; }

bool all_printable(const std::string& s) {
  return std::all_of(s.begin(), s.end(), printable);
}

Vocab finalize(std::vector<std::string> ranked) {
  Vocab vocab;
  for (const char* name : kReservedNames) vocab.tokens.emplace_back(name);
  for (auto& t : ranked) vocab.tokens.push_back(std::move(t));
  for (size_t i = 0; i < vocab.tokens.size(); ++i) {
    vocab.ids.emplace(vocab.tokens[i], static_cast<int>(i));
    if (i >= Vocab::kNumReserved) {
      vocab.max_token_len = std::max(vocab.max_token_len, static_cast<int>(vocab.tokens[i].size()));
    }
  }
  if (vocab.ids.size() != vocab.tokens.size()) throw InputError("vocab: duplicate surface form");
  return vocab;
}

}  // namespace

Vocab build_vocab(const std::vector<std::string>& corpus, int target_size, int min_count) {
  if (corpus.empty()) throw InputError("build_vocab: empty corpus");
  // 94 printable ASCII singles are always included, so the target must leave
  // room for them on top of the reserved ids.
  if (target_size < Vocab::kNumReserved + 94) {
    throw ConfigError("build_vocab: target_size must be at least " +
                      std::to_string(Vocab::kNumReserved + 94));
  }
  // Ordered map keeps candidate ranking independent of hash order.
  std::map<std::string, int64_t> counts;
  for (const auto& url : corpus) {
    for (size_t i = 0; i < url.size(); ++i) {
      for (size_t n = 1; n <= 4 && i + n <= url.size(); ++n) {
        std::string gram = url.substr(i, n);
        if (all_printable(gram)) ++counts[gram];
      }
    }
  }
  struct Candidate {
    std::string surface;
    int64_t count;
  };
  std::vector<Candidate> singles, grams;
  for (char c = 0x21; c < 0x7f; ++c) {
    std::string s(1, c);
    auto it = counts.find(s);
    singles.push_back({s, it == counts.end() ? 0 : it->second});
  }
  for (const auto& [surface, count] : counts) {
    if (surface.size() >= 2 && count >= min_count) grams.push_back({surface, count});
  }
  auto rank = [](const Candidate& a, const Candidate& b) {
    if (a.count != b.count) return a.count > b.count;
    if (a.surface.size() != b.surface.size()) return a.surface.size() < b.surface.size();
    return a.surface < b.surface;
  };
  std::sort(grams.begin(), grams.end(), rank);
  const size_t gram_budget =
      static_cast<size_t>(target_size) - Vocab::kNumReserved - singles.size();
  if (grams.size() > gram_budget) grams.resize(gram_budget);
  std::vector<Candidate> merged = std::move(singles);
  merged.insert(merged.end(), grams.begin(), grams.end());
  std::sort(merged.begin(), merged.end(), rank);
  std::vector<std::string> ranked;
  ranked.reserve(merged.size());
  for (auto& c : merged) ranked.push_back(std::move(c.surface));
  return finalize(std::move(ranked));
}

EncodedSequence encode(const std::string& url, const Vocab& vocab, int max_len) {
  if (max_len < 3) throw ConfigError("encode: max_len must be at least 3");
  std::vector<int> body;
  size_t i = 0;
  while (i < url.size()) {
    int matched = -1;
    size_t matched_len = 1;
    const size_t limit = std::min<size_t>(vocab.max_token_len, url.size() - i);
    for (size_t n = limit; n >= 1; --n) {
      const int id = vocab.id_of(url.substr(i, n));
      if (id >= 0) {
        matched = id;
        matched_len = n;
        break;
      }
    }
    body.push_back(matched >= 0 ? matched : Vocab::kUnk);
    i += matched_len;
  }
  if (static_cast<int>(body.size()) > max_len - 2) body.resize(static_cast<size_t>(max_len) - 2);
  EncodedSequence seq;
  seq.ids.reserve(static_cast<size_t>(max_len));
  seq.ids.push_back(Vocab::kCls);
  seq.ids.insert(seq.ids.end(), body.begin(), body.end());
  seq.ids.push_back(Vocab::kSep);
  seq.attention_mask.assign(seq.ids.size(), 1);
  seq.ids.resize(static_cast<size_t>(max_len), Vocab::kPad);
  seq.attention_mask.resize(static_cast<size_t>(max_len), 0);
  return seq;
}

MaskedBatch apply_mlm_mask(const EncodedSequence& seq, const Vocab& vocab, Rng& rng,
                           const MlmRule& rule) {
  if (std::fabs(rule.mask_frac + rule.random_frac + rule.keep_frac - 1.0) > 1e-9) {
    throw ConfigError("apply_mlm_mask: mask/random/keep fractions must sum to 1");
  }
  MaskedBatch out{seq.ids, std::vector<int>(seq.ids.size(), kIgnoreLabel)};
  const int non_reserved = vocab.size() - Vocab::kNumReserved;
  for (size_t i = 0; i < seq.ids.size(); ++i) {
    const int id = seq.ids[i];
    if (seq.attention_mask[i] == 0 || id == Vocab::kCls || id == Vocab::kSep) continue;
    if (rng.uniform() >= rule.select_p) continue;
    out.labels[i] = id;
    const double branch = rng.uniform();
    if (branch < rule.mask_frac) {
      out.input_ids[i] = Vocab::kMask;
    } else if (branch < rule.mask_frac + rule.random_frac && non_reserved > 0) {
      out.input_ids[i] =
          Vocab::kNumReserved + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(non_reserved)));
    }
    // keep branch: input unchanged, label still set
  }
  return out;
}

void save_vocab(const std::string& path, const Vocab& vocab) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("save_vocab: cannot open '" + path + "'");
  for (const auto& t : vocab.tokens) f << t << '\n';
  if (!f) throw InputError("save_vocab: write failed for '" + path + "'");
}

Vocab load_vocab(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("load_vocab: cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  if (lines.size() < Vocab::kNumReserved) throw InputError("load_vocab: missing reserved tokens");
  for (int i = 0; i < Vocab::kNumReserved; ++i) {
    if (lines[static_cast<size_t>(i)] != kReservedNames[i]) {
      throw InputError("load_vocab: line " + std::to_string(i) + " must be " +
                       kReservedNames[i]);
    }
  }
  return finalize({lines.begin() + Vocab::kNumReserved, lines.end()});
}

}  // namespace fedsplit
