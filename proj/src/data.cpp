#include "fedsplit/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "fedsplit/errors.hpp"

namespace fedsplit {

namespace fs = std::filesystem;
using nlohmann::json;

ScenarioKind scenario_from_string(const std::string& name) {
  if (name == "iid") return ScenarioKind::IID;
  if (name == "noniid2") return ScenarioKind::NonIID2;
  if (name == "noniid3") return ScenarioKind::NonIID3;
  throw ConfigError("unknown scenario '" + name + "' (expected iid|noniid2|noniid3)");
}

std::string scenario_to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::IID: return "iid";
    case ScenarioKind::NonIID2: return "noniid2";
    case ScenarioKind::NonIID3: return "noniid3";
  }
  return "?";
}

std::vector<UrlRecord> load_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("load_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw InputError("load_csv: '" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "url,label") {
    throw InputError("load_csv: '" + path + "' header must be 'url,label'");
  }
  std::vector<UrlRecord> out;
  size_t row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0) {
      throw InputError("load_csv: malformed row " + std::to_string(row) + " in '" + path + "'");
    }
    const std::string label = line.substr(comma + 1);
    if (label != "0" && label != "1") {
      throw InputError("load_csv: row " + std::to_string(row) + " has label '" + label +
                       "', expected 0 or 1");
    }
    out.push_back({line.substr(0, comma), label == "1" ? 1 : 0});
  }
  return out;
}

void save_csv(const std::string& path, const std::vector<UrlRecord>& records) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("save_csv: cannot open '" + path + "'");
  f << "url,label\n";
  for (const auto& r : records) f << r.url << ',' << r.label << '\n';
  if (!f) throw InputError("save_csv: write failed for '" + path + "'");
}

namespace {

const std::vector<std::string> kBenignWords = {
    "news",  "shop",  "blog",   "mail",  "cloud", "photo", "store", "wiki",
    "games", "travel", "music",  "books", "forum", "sport", "movie", "radio"};
const std::vector<std::string> kTlds = {".com", ".org", ".net", ".io", ".info"};
const std::vector<std::string> kPaths = {"",        "/index.html", "/home",  "/about",
                                         "/items",  "/article",    "/login", "/search"};
const std::vector<std::string> kPlanted = {"secure-login", "verify-account", "webscr-update"};

std::string pick(const std::vector<std::string>& pool, Rng& rng) {
  return pool[rng.uniform_int(pool.size())];
}

std::string make_url(bool planted, Rng& rng) {
  std::string host;
  if (planted) {
    host = pick(kPlanted, rng) + "-" + pick(kBenignWords, rng) +
           std::to_string(rng.uniform_int(90) + 10);
  } else {
    host = pick(kBenignWords, rng) + "-" + pick(kBenignWords, rng) +
           std::to_string(rng.uniform_int(90) + 10);
  }
  return (rng.uniform() < 0.5 ? "http://" : "https://") + host + pick(kTlds, rng) +
         pick(kPaths, rng);
}

}  // namespace

const std::vector<std::string>& planted_tokens() { return kPlanted; }

std::vector<UrlRecord> synthesize_corpus(int n, double signal_p, uint64_t seed) {
  if (n <= 0 || n % 2 != 0) throw ConfigError("synthesize_corpus: n must be positive and even");
  if (signal_p <= 0.5 || signal_p > 1.0) {
    throw ConfigError("synthesize_corpus: signal_p must lie in (0.5, 1]");
  }
  Rng rng(Rng::derive(seed, {kStreamData}));
  std::vector<UrlRecord> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    const bool planted = label == 1 ? rng.uniform() < signal_p : rng.uniform() >= signal_p;
    out.push_back({make_url(planted, rng), label});
  }
  return out;
}

namespace {

void repair_empty_shards(std::vector<std::vector<UrlRecord>>& shards) {
  for (auto& shard : shards) {
    if (!shard.empty()) continue;
    auto largest = std::max_element(
        shards.begin(), shards.end(),
        [](const auto& a, const auto& b) { return a.size() < b.size(); });
    if (largest->size() <= 1) {
      throw InputError("partition: not enough records to give every client one");
    }
    shard.push_back(std::move(largest->back()));
    largest->pop_back();
  }
}

std::vector<size_t> shuffled_indices(size_t n, Rng& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (size_t i = n; i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
  }
  return idx;
}

// Largest-remainder rounding of `total` items into proportions.
std::vector<int64_t> largest_remainder(int64_t total, const std::vector<double>& proportions) {
  const size_t k = proportions.size();
  std::vector<int64_t> counts(k);
  std::vector<std::pair<double, size_t>> remainders;
  int64_t assigned = 0;
  for (size_t i = 0; i < k; ++i) {
    const double ideal = proportions[i] * static_cast<double>(total);
    counts[i] = static_cast<int64_t>(ideal);
    assigned += counts[i];
    remainders.push_back({ideal - static_cast<double>(counts[i]), i});
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // ties to the lower client id
  });
  for (int64_t i = 0; i < total - assigned; ++i) {
    ++counts[remainders[static_cast<size_t>(i) % k].second];
  }
  return counts;
}

}  // namespace

std::vector<std::vector<UrlRecord>> partition_iid(const std::vector<UrlRecord>& records,
                                                  int clients, Rng& rng) {
  if (clients <= 0) throw ConfigError("partition_iid: client count must be positive");
  if (records.size() < static_cast<size_t>(clients)) {
    throw InputError("partition_iid: fewer records than clients");
  }
  const auto order = shuffled_indices(records.size(), rng);
  std::vector<std::vector<UrlRecord>> shards(static_cast<size_t>(clients));
  for (size_t i = 0; i < order.size(); ++i) {
    shards[i % static_cast<size_t>(clients)].push_back(records[order[i]]);
  }
  return shards;
}

std::vector<std::vector<double>> draw_dirichlet_matrix(int num_labels, int clients, double alpha,
                                                       Rng& rng) {
  if (alpha <= 0.0) throw ConfigError("dirichlet: alpha must be positive");
  std::vector<std::vector<double>> matrix(static_cast<size_t>(num_labels));
  for (auto& row : matrix) {
    row.resize(static_cast<size_t>(clients));
    double total = 0.0;
    for (auto& v : row) {
      v = rng.gamma(alpha);
      total += v;
    }
    for (auto& v : row) v /= total;
  }
  return matrix;
}

std::vector<std::vector<UrlRecord>> partition_by_proportions(
    const std::vector<UrlRecord>& records, int clients,
    const std::vector<std::vector<double>>& proportions) {
  if (clients <= 0) throw ConfigError("partition: client count must be positive");
  std::vector<std::vector<UrlRecord>> shards(static_cast<size_t>(clients));
  for (size_t label = 0; label < proportions.size(); ++label) {
    std::vector<const UrlRecord*> pool;
    for (const auto& r : records) {
      if (static_cast<size_t>(r.label) == label) pool.push_back(&r);
    }
    const auto counts = largest_remainder(static_cast<int64_t>(pool.size()), proportions[label]);
    size_t next = 0;
    for (int c = 0; c < clients; ++c) {
      for (int64_t i = 0; i < counts[static_cast<size_t>(c)]; ++i) {
        shards[static_cast<size_t>(c)].push_back(*pool[next++]);
      }
    }
  }
  repair_empty_shards(shards);
  return shards;
}

std::vector<std::vector<UrlRecord>> partition_dirichlet(const std::vector<UrlRecord>& records,
                                                        int clients, double alpha, Rng& rng) {
  int max_label = -1;
  for (const auto& r : records) max_label = std::max(max_label, r.label);
  if (max_label < 0) throw InputError("partition_dirichlet: no records");
  const auto matrix = draw_dirichlet_matrix(max_label + 1, clients, alpha, rng);
  return partition_by_proportions(records, clients, matrix);
}

std::pair<std::vector<UrlRecord>, std::vector<UrlRecord>> stratified_split(
    const std::vector<UrlRecord>& records, double test_fraction, Rng& rng) {
  if (test_fraction <= 0.0 || test_fraction >= 1.0) {
    throw ConfigError("stratified_split: test_fraction must lie in (0, 1)");
  }
  std::vector<UrlRecord> train, test;
  for (int label = 0; label <= 1; ++label) {
    std::vector<const UrlRecord*> pool;
    for (const auto& r : records) {
      if (r.label == label) pool.push_back(&r);
    }
    const auto order = shuffled_indices(pool.size(), rng);
    const size_t n_test = static_cast<size_t>(test_fraction * static_cast<double>(pool.size()));
    for (size_t i = 0; i < order.size(); ++i) {
      (i < n_test ? test : train).push_back(*pool[order[i]]);
    }
  }
  return {std::move(train), std::move(test)};
}

std::vector<ClientShard> make_scenario(const ScenarioSpec& spec,
                                       const std::vector<UrlRecord>& train,
                                       const std::vector<UrlRecord>& test) {
  if (spec.clients <= 0) throw ConfigError("scenario: client count must be positive");
  if (spec.alpha <= 0.0) throw ConfigError("scenario: alpha must be positive");
  Rng rng(Rng::derive(spec.seed, {kStreamShuffle, static_cast<uint64_t>(spec.kind)}));
  std::vector<std::vector<UrlRecord>> train_shards, test_shards;
  switch (spec.kind) {
    case ScenarioKind::IID:
      train_shards = partition_iid(train, spec.clients, rng);
      test_shards = partition_iid(test, spec.clients, rng);
      break;
    case ScenarioKind::NonIID2:
      train_shards = partition_dirichlet(train, spec.clients, spec.alpha, rng);
      test_shards = partition_iid(test, spec.clients, rng);
      break;
    case ScenarioKind::NonIID3: {
      // One shared draw so each client's train and test label mixes agree.
      const auto matrix = draw_dirichlet_matrix(2, spec.clients, spec.alpha, rng);
      train_shards = partition_by_proportions(train, spec.clients, matrix);
      test_shards = partition_by_proportions(test, spec.clients, matrix);
      break;
    }
  }
  std::vector<ClientShard> shards(static_cast<size_t>(spec.clients));
  for (int c = 0; c < spec.clients; ++c) {
    shards[static_cast<size_t>(c)] = {c, std::move(train_shards[static_cast<size_t>(c)]),
                                      std::move(test_shards[static_cast<size_t>(c)])};
  }
  return shards;
}

namespace {

json label_histogram(const std::vector<UrlRecord>& records) {
  int counts[2] = {0, 0};
  for (const auto& r : records) ++counts[r.label];
  return json{{"benign", counts[0]}, {"malicious", counts[1]}};
}

}  // namespace

void save_shards(const std::string& dir, const std::vector<ClientShard>& shards) {
  fs::create_directories(dir);
  json index;
  index["clients"] = json::array();
  for (const auto& shard : shards) {
    const std::string train_file = "client_" + std::to_string(shard.client_id) + "_train.csv";
    const std::string test_file = "client_" + std::to_string(shard.client_id) + "_test.csv";
    save_csv(dir + "/" + train_file, shard.train);
    save_csv(dir + "/" + test_file, shard.test);
    index["clients"].push_back({{"id", shard.client_id},
                                {"train_file", train_file},
                                {"test_file", test_file},
                                {"n_k", shard.train.size()},
                                {"train_labels", label_histogram(shard.train)},
                                {"test_labels", label_histogram(shard.test)}});
  }
  std::ofstream f(dir + "/index.json", std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("save_shards: cannot write index in '" + dir + "'");
  f << index.dump(2) << '\n';
}

std::vector<ClientShard> load_shards(const std::string& dir) {
  std::ifstream f(dir + "/index.json", std::ios::binary);
  if (!f) throw InputError("load_shards: missing '" + dir + "/index.json'");
  json index;
  try {
    f >> index;
  } catch (const json::exception& e) {
    throw InputError("load_shards: malformed index.json: " + std::string(e.what()));
  }
  std::vector<ClientShard> shards;
  for (const auto& entry : index.at("clients")) {
    ClientShard shard;
    shard.client_id = entry.at("id").get<int>();
    shard.train = load_csv(dir + "/" + entry.at("train_file").get<std::string>());
    shard.test = load_csv(dir + "/" + entry.at("test_file").get<std::string>());
    shards.push_back(std::move(shard));
  }
  if (shards.empty()) throw InputError("load_shards: no clients in '" + dir + "'");
  return shards;
}

}  // namespace fedsplit
