#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fedsplit/errors.hpp"
#include "fedsplit/rng.hpp"

namespace fedsplit {

// Character n-gram vocabulary over URLs. Ids 0-4 are reserved; every
// printable ASCII character (0x21..0x7e) is always present so no URL
// tokenizes entirely to [UNK].
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumReserved = 5;

  std::vector<std::string> tokens;  // id -> surface form; reserved first
  std::unordered_map<std::string, int> ids;
  int max_token_len = 1;

  int size() const { return static_cast<int>(tokens.size()); }
  int id_of(const std::string& surface) const {
    auto it = ids.find(surface);
    return it == ids.end() ? -1 : it->second;
  }
  static bool is_reserved(int id) { return id >= 0 && id < kNumReserved; }
};

// Fixed-length framed token sequence: [CLS] tokens... [SEP] [PAD]...
struct EncodedSequence {
  std::vector<int> ids;
  std::vector<int> attention_mask;  // 1 for real tokens, 0 for padding
};

// MLM training view of a sequence: corrupted ids plus per-position labels
// carrying the original id at selected positions and kIgnoreLabel elsewhere.
struct MaskedBatch {
  std::vector<int> input_ids;
  std::vector<int> labels;
};

struct MlmRule {
  double select_p = 0.15;
  double mask_frac = 0.8;
  double random_frac = 0.1;
  double keep_frac = 0.1;
};

// Frequency-ranked character n-grams (n=2..4, count >= min_count) on top of
// guaranteed single-character coverage, capped at target_size entries.
Vocab build_vocab(const std::vector<std::string>& corpus, int target_size = 1000,
                  int min_count = 2);

// Greedy longest-match segmentation, then [CLS]/[SEP] framing and padding to
// exactly max_len ids. Truncation keeps [CLS] and forces a final [SEP].
EncodedSequence encode(const std::string& url, const Vocab& vocab, int max_len);

MaskedBatch apply_mlm_mask(const EncodedSequence& seq, const Vocab& vocab, Rng& rng,
                           const MlmRule& rule = {});

// Text format: one token per line, line number = id, reserved tokens first.
void save_vocab(const std::string& path, const Vocab& vocab);
Vocab load_vocab(const std::string& path);

}  // namespace fedsplit
