#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "fedsplit/tensor.hpp"
#include "fedsplit/tokenizer.hpp"

using namespace fedsplit;

namespace {

std::vector<std::string> tiny_corpus() {
  return {
      "http://login.example.com/index.html", "https://secure.example.org/account",
      "http://www.shop.net/cart?item=1",     "https://mail.example.com/inbox",
      "http://login.bank.com/verify",        "https://login.example.net/session",
  };
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("reserved tokens occupy ids 0..4 and printable ASCII is always covered") {
  Vocab v = build_vocab(tiny_corpus(), 200);
  CHECK(v.tokens[0] == "[PAD]");
  CHECK(v.tokens[1] == "[UNK]");
  CHECK(v.tokens[2] == "[CLS]");
  CHECK(v.tokens[3] == "[SEP]");
  CHECK(v.tokens[4] == "[MASK]");
  for (int c = 0x21; c <= 0x7e; ++c) {
    CHECK(v.id_of(std::string(1, static_cast<char>(c))) >= Vocab::kNumReserved);
  }
}

TEST_CASE("vocabulary never exceeds the target size and needs room for the base set") {
  Vocab v = build_vocab(tiny_corpus(), 120);
  CHECK(v.size() <= 120);
  CHECK(v.size() >= 99);  // 5 reserved + 94 printable singles
  CHECK_THROWS_AS(build_vocab(tiny_corpus(), 98), ConfigError);
}

TEST_CASE("frequent n-grams are preferred over rare ones") {
  // "login" appears three times, so with room for n-grams some "login"
  // substring must be present while one-off host fragments may not.
  Vocab v = build_vocab(tiny_corpus(), 400, 2);
  bool has_login_gram = false;
  for (const auto& t : v.tokens) {
    if (t.size() >= 2 && std::string("login").find(t) != std::string::npos) {
      has_login_gram = true;
    }
  }
  CHECK(has_login_gram);
}

TEST_CASE("build_vocab is deterministic") {
  Vocab a = build_vocab(tiny_corpus(), 300);
  Vocab b = build_vocab(tiny_corpus(), 300);
  CHECK(a.tokens == b.tokens);
}

TEST_CASE("encode frames, pads and truncates to the exact length") {
  Vocab v = build_vocab(tiny_corpus(), 300);
  EncodedSequence enc = encode("http://login.example.com/", v, 16);
  CHECK(enc.ids.size() == 16);
  CHECK(enc.attention_mask.size() == 16);
  CHECK(enc.ids[0] == Vocab::kCls);
  // final real token is [SEP]; padding carries mask 0
  int last_real = -1;
  for (int i = 0; i < 16; ++i) {
    if (enc.attention_mask[i]) last_real = i;
  }
  REQUIRE(last_real >= 1);
  CHECK(enc.ids[last_real] == Vocab::kSep);
  for (int i = last_real + 1; i < 16; ++i) {
    CHECK(enc.ids[i] == Vocab::kPad);
    CHECK(enc.attention_mask[i] == 0);
  }

  // a long URL must still end with [SEP] inside the window
  EncodedSequence longenc = encode(std::string(500, 'a') + ".com", v, 16);
  CHECK(longenc.ids.size() == 16);
  CHECK(longenc.ids[0] == Vocab::kCls);
  CHECK(longenc.ids[15] == Vocab::kSep);
  for (int m : longenc.attention_mask) CHECK(m == 1);
}

TEST_CASE("encode uses greedy longest match") {
  std::vector<std::string> corpus(4, "abcd");
  Vocab v = build_vocab(corpus, 300, 2);
  REQUIRE(v.id_of("abcd") >= 0);
  EncodedSequence enc = encode("abcd", v, 8);
  CHECK(enc.ids[1] == v.id_of("abcd"));
  CHECK(enc.ids[2] == Vocab::kSep);
}

TEST_CASE("characters outside the vocabulary map to [UNK]") {
  Vocab v = build_vocab(tiny_corpus(), 120);
  EncodedSequence enc = encode("\x01\x02", v, 8);
  CHECK(enc.ids[1] == Vocab::kUnk);
}

TEST_CASE("masking respects special positions and reports original ids as labels") {
  Vocab v = build_vocab(tiny_corpus(), 300);
  Rng rng(11);
  EncodedSequence enc = encode("http://login.example.com/index.html", v, 32);
  for (int trial = 0; trial < 50; ++trial) {
    MaskedBatch mb = apply_mlm_mask(enc, v, rng);
    REQUIRE(mb.input_ids.size() == enc.ids.size());
    for (size_t i = 0; i < enc.ids.size(); ++i) {
      const bool special = enc.ids[i] == Vocab::kCls || enc.ids[i] == Vocab::kSep ||
                           enc.ids[i] == Vocab::kPad;
      if (special) {
        CHECK(mb.input_ids[i] == enc.ids[i]);
        CHECK(mb.labels[i] == kIgnoreLabel);
      } else if (mb.labels[i] != kIgnoreLabel) {
        CHECK(mb.labels[i] == enc.ids[i]);  // label is always the original id
      } else {
        CHECK(mb.input_ids[i] == enc.ids[i]);  // unselected positions untouched
      }
    }
  }
}

TEST_CASE("masking statistics match the 0.15 and 80/10/10 rule") {
  Vocab v = build_vocab(tiny_corpus(), 300);
  Rng rng(2024);
  EncodedSequence enc = encode("http://login.example.com/index.html?q=abcdef", v, 64);
  int64_t maskable = 0, selected = 0, masked = 0, kept = 0, randomized = 0;
  while (maskable < 200000) {
    MaskedBatch mb = apply_mlm_mask(enc, v, rng);
    for (size_t i = 0; i < enc.ids.size(); ++i) {
      const bool special = enc.ids[i] == Vocab::kCls || enc.ids[i] == Vocab::kSep ||
                           enc.ids[i] == Vocab::kPad;
      if (special) continue;
      ++maskable;
      if (mb.labels[i] == kIgnoreLabel) continue;
      ++selected;
      if (mb.input_ids[i] == Vocab::kMask) {
        ++masked;
      } else if (mb.input_ids[i] == enc.ids[i]) {
        ++kept;
      } else {
        ++randomized;
        CHECK_FALSE(Vocab::is_reserved(mb.input_ids[i]));
      }
    }
  }
  const double sel_rate = static_cast<double>(selected) / static_cast<double>(maskable);
  CHECK(std::fabs(sel_rate - 0.15) < 0.005);
  const double den = static_cast<double>(selected);
  CHECK(std::fabs(masked / den - 0.80) < 0.015);
  CHECK(std::fabs(randomized / den - 0.10) < 0.015);
  CHECK(std::fabs(kept / den - 0.10) < 0.015);
}

TEST_CASE("vocabulary file round-trips byte-identically") {
  Vocab v = build_vocab(tiny_corpus(), 300);
  const std::string p1 = "vocab_rt_1.txt", p2 = "vocab_rt_2.txt";
  save_vocab(p1, v);
  Vocab loaded = load_vocab(p1);
  CHECK(loaded.tokens == v.tokens);
  save_vocab(p2, loaded);
  CHECK(read_bytes(p1) == read_bytes(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("malformed vocabulary files are rejected") {
  const std::string path = "vocab_bad.txt";
  {
    std::ofstream out(path);
    out << "[PAD]\n[UNK]\nnot-cls\n";
  }
  CHECK_THROWS_AS(load_vocab(path), InputError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_vocab("does_not_exist.vocab"), InputError);
}
