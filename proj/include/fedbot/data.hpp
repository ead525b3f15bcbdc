#pragma once

// Corpus ingestion: CSV records -> query/response pairs -> per-client silos.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fedbot/error.hpp"
#include "fedbot/hash.hpp"
#include "fedbot/rng.hpp"
#include "fedbot/tokenizer.hpp"

namespace fedbot {

struct RawTweetRecord {
  std::string tweet_id;
  std::string author_id;
  bool inbound = false;
  std::string created_at;
  std::string text;
  std::vector<std::string> response_tweet_ids;  // the CSV cell may list several, comma separated
  std::optional<std::string> in_response_to_tweet_id;
};

struct ConversationPair {
  std::string query;
  std::string response;
  std::string brand;

  bool operator==(const ConversationPair&) const = default;
};

struct ClientDataset {
  std::string client_id;
  std::string brand;  // set only by partition_by_brand
  std::vector<ConversationPair> train;
  std::vector<ConversationPair> validation;

  std::size_t size() const { return train.size() + validation.size(); }
};

struct LoadResult {
  std::vector<RawTweetRecord> records;
  std::size_t skipped = 0;
};

using WarningSink = std::function<void(const std::string&)>;

inline void warn_stderr(const std::string& msg) { std::clog << "warning: " << msg << '\n'; }

// ---------------------------------------------------------------------------
// CSV (RFC 4180: quoted fields may hold commas, newlines and "" escapes)

class CsvReader {
 public:
  explicit CsvReader(std::istream& in) : in_(in) {}

  // Next row, or nullopt at end of input. Sets `malformed` on an
  // unterminated quote.
  std::optional<std::vector<std::string>> next(bool& malformed) {
    malformed = false;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    char c;
    while (in_.get(c)) {
      any = true;
      if (quoted) {
        if (c == '"') {
          if (in_.peek() == '"') {
            in_.get();
            field += '"';
          } else {
            quoted = false;
          }
        } else {
          field += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        row.push_back(std::move(field));
        field.clear();
      } else if (c == '\n') {
        if (!field.empty() && field.back() == '\r') field.pop_back();
        row.push_back(std::move(field));
        return row;
      } else {
        field += c;
      }
    }
    if (!any) return std::nullopt;
    if (quoted) malformed = true;
    if (!field.empty() && field.back() == '\r') field.pop_back();
    row.push_back(std::move(field));
    return row;
  }

 private:
  std::istream& in_;
};

inline constexpr std::string_view kCsvColumns[] = {"tweet_id",          "author_id", "inbound",
                                                   "created_at",        "text",      "response_tweet_id",
                                                   "in_response_to_tweet_id"};

inline LoadResult load_records(std::istream& in) {
  CsvReader reader(in);
  bool malformed = false;
  auto header = reader.next(malformed);
  if (!header || malformed) throw SchemaError("missing header row");
  if (!header->empty() && header->front().starts_with("\xEF\xBB\xBF")) header->front().erase(0, 3);
  std::size_t col[std::size(kCsvColumns)];
  for (std::size_t i = 0; i < std::size(kCsvColumns); ++i) {
    auto it = std::find(header->begin(), header->end(), kCsvColumns[i]);
    if (it == header->end()) throw SchemaError("missing required column '" + std::string(kCsvColumns[i]) + "'");
    col[i] = static_cast<std::size_t>(it - header->begin());
  }

  LoadResult out;
  std::unordered_map<std::string, bool> seen;
  while (auto row = reader.next(malformed)) {
    if (row->size() == 1 && row->front().empty() && !malformed) continue;  // blank line
    if (malformed || row->size() != header->size()) {
      ++out.skipped;
      continue;
    }
    const auto& r = *row;
    RawTweetRecord rec;
    rec.tweet_id = r[col[0]];
    rec.author_id = r[col[1]];
    const auto& inbound = r[col[2]];
    rec.created_at = r[col[3]];
    rec.text = r[col[4]];
    bool ok = !rec.tweet_id.empty() && !rec.author_id.empty() && !rec.text.empty();
    if (inbound == "True" || inbound == "true" || inbound == "1") {
      rec.inbound = true;
    } else if (inbound != "False" && inbound != "false" && inbound != "0") {
      ok = false;
    }
    std::stringstream ids(r[col[5]]);
    for (std::string id; std::getline(ids, id, ',');)
      if (!id.empty()) rec.response_tweet_ids.push_back(id);
    if (!r[col[6]].empty()) rec.in_response_to_tweet_id = r[col[6]];
    if (!ok || !seen.emplace(rec.tweet_id, true).second) {
      ++out.skipped;
      continue;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

inline LoadResult load_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return load_records(in);
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Pairing and partitioning

/// Inbound tweet + the first listed reply that is a company (non-inbound)
/// tweet. Texts are normalized, which also anonymizes mentions and URLs.
inline std::vector<ConversationPair> pair_conversations(const std::vector<RawTweetRecord>& records) {
  std::unordered_map<std::string_view, const RawTweetRecord*> by_id;
  for (const auto& r : records) by_id.emplace(r.tweet_id, &r);
  std::vector<ConversationPair> out;
  for (const auto& r : records) {
    if (!r.inbound) continue;
    for (const auto& id : r.response_tweet_ids) {
      auto it = by_id.find(id);
      if (it == by_id.end() || it->second->inbound) continue;
      ConversationPair p{normalize(r.text), normalize(it->second->text), it->second->author_id};
      if (!p.query.empty() && !p.response.empty()) out.push_back(std::move(p));
      break;
    }
  }
  return out;
}

inline std::size_t validation_count(std::size_t n) {
  return static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
}

inline void split_train_val(ClientDataset& c, std::vector<ConversationPair> pairs) {
  const std::size_t nv = validation_count(pairs.size());
  const auto cut = pairs.begin() + static_cast<std::ptrdiff_t>(pairs.size() - nv);
  c.train.assign(pairs.begin(), cut);
  c.validation.assign(cut, pairs.end());
}

inline std::string client_name(std::size_t i) { return "client_" + std::to_string(i); }

/// Seeded shuffle, k contiguous chunks (the first n % k one pair larger),
/// last 20% of each chunk held out for validation.
inline std::vector<ClientDataset> partition(std::vector<ConversationPair> pairs, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ContractError("partition needs at least one client");
  if (k > pairs.size())
    throw ContractError("cannot split " + std::to_string(pairs.size()) + " pairs across " + std::to_string(k) +
                        " clients");
  Rng rng(seed);
  rng.shuffle(std::span<ConversationPair>(pairs));
  std::vector<ClientDataset> out(k);
  const std::size_t base = pairs.size() / k, extra = pairs.size() % k;
  std::size_t start = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    out[i].client_id = client_name(i);
    split_train_val(out[i], {pairs.begin() + static_cast<std::ptrdiff_t>(start),
                             pairs.begin() + static_cast<std::ptrdiff_t>(start + len)});
    start += len;
  }
  return out;
}

/// One client per brand, brands in lexicographic order, input order kept
/// within a brand.
inline std::vector<ClientDataset> partition_by_brand(const std::vector<ConversationPair>& pairs,
                                                     const WarningSink& warn = warn_stderr) {
  if (pairs.empty()) throw ContractError("partition_by_brand needs at least one pair");
  std::map<std::string, std::vector<ConversationPair>> groups;
  for (const auto& p : pairs) groups[p.brand].push_back(p);
  std::vector<ClientDataset> out;
  for (auto& [brand, group] : groups) {
    ClientDataset c;
    c.client_id = client_name(out.size());
    c.brand = brand;
    split_train_val(c, std::move(group));
    if (c.validation.empty() && warn)
      warn("brand '" + brand + "' has " + std::to_string(c.train.size()) +
           " pair(s); all go to training and its validation set is empty");
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// TSV silos and key = value manifests

inline std::string pairs_to_tsv(const std::vector<ConversationPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    for (std::string_view s : {std::string_view(p.query), std::string_view(p.response)})
      if (s.find_first_of("\t\n\r") != std::string_view::npos)
        throw FormatError("pair text contains a tab or newline: " + std::string(s));
    out += p.query;
    out += '\t';
    out += p.response;
    out += '\n';
  }
  return out;
}

inline std::vector<ConversationPair> parse_tsv(std::string_view text, const std::string& origin = "tsv") {
  std::vector<ConversationPair> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view() : text.substr(nl + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos || line.find('\t', tab + 1) != std::string_view::npos)
      throw FormatError(origin + ":" + std::to_string(line_no) + ": expected query<TAB>response");
    out.push_back({std::string(line.substr(0, tab)), std::string(line.substr(tab + 1)), ""});
  }
  return out;
}

inline std::vector<ConversationPair> read_tsv(const std::filesystem::path& path) {
  return parse_tsv(read_file(path), path.string());
}

inline void write_text_file(const std::filesystem::path& path, std::string_view content) {
  // write-then-rename so a crash never leaves a half-written file behind
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline std::string trim(std::string_view s) {
  while (!s.empty() && detail::is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && detail::is_space(s.back())) s.remove_suffix(1);
  return std::string(s);
}

/// `key = value` lines; blank lines and lines starting with '#' are ignored.
inline KeyValues parse_key_values(std::string_view text, const std::string& origin = "config") {
  KeyValues out;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw FormatError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw FormatError(origin + ":" + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), trim(std::string_view(t).substr(eq + 1)));
  }
  return out;
}

inline std::optional<std::string> lookup(const KeyValues& kv, std::string_view key) {
  for (auto it = kv.rbegin(); it != kv.rend(); ++it)
    if (it->first == key) return it->second;
  return std::nullopt;
}

struct ClientManifest {
  std::string client_id;
  std::string brand;
  std::size_t train_count = 0;
  std::size_t val_count = 0;
  std::uint64_t seed = 0;
  std::string train_sha256;
  std::string val_sha256;
};

/// Writes <dir>/<client_id>/{train.tsv,val.tsv,manifest.txt} per client plus
/// <dir>/manifest.txt; returns the per-client manifests.
inline std::vector<ClientManifest> write_partition(const std::filesystem::path& dir,
                                                   const std::vector<ClientDataset>& clients, std::uint64_t seed,
                                                   const KeyValues& extra = {}) {
  std::filesystem::create_directories(dir);
  std::vector<ClientManifest> out;
  KeyValues top{{"clients", std::to_string(clients.size())}, {"seed", std::to_string(seed)}};
  top.insert(top.end(), extra.begin(), extra.end());
  for (const auto& c : clients) {
    const auto cdir = dir / c.client_id;
    std::filesystem::create_directories(cdir);
    const auto train = pairs_to_tsv(c.train), val = pairs_to_tsv(c.validation);
    write_text_file(cdir / "train.tsv", train);
    write_text_file(cdir / "val.tsv", val);
    ClientManifest m{c.client_id, c.brand, c.train.size(), c.validation.size(), seed, sha256_hex(train),
                     sha256_hex(val)};
    KeyValues kv{{"client_id", m.client_id},
                 {"train_count", std::to_string(m.train_count)},
                 {"val_count", std::to_string(m.val_count)},
                 {"seed", std::to_string(m.seed)},
                 {"train_sha256", m.train_sha256},
                 {"val_sha256", m.val_sha256}};
    if (!c.brand.empty()) kv.emplace_back("brand", c.brand);
    write_text_file(cdir / "manifest.txt", format_key_values(kv));
    top.emplace_back(c.client_id + ".train_sha256", m.train_sha256);
    top.emplace_back(c.client_id + ".val_sha256", m.val_sha256);
    out.push_back(std::move(m));
  }
  write_text_file(dir / "manifest.txt", format_key_values(top));
  return out;
}

/// Reads <dir>/train.tsv and <dir>/val.tsv (val.tsv may be absent).
inline ClientDataset read_client_dir(const std::filesystem::path& dir) {
  ClientDataset c;
  c.client_id = dir.filename().string();
  if (!std::filesystem::exists(dir / "train.tsv")) throw IoError("missing " + (dir / "train.tsv").string());
  c.train = read_tsv(dir / "train.tsv");
  if (std::filesystem::exists(dir / "val.tsv")) c.validation = read_tsv(dir / "val.tsv");
  return c;
}

}  // namespace fedbot
