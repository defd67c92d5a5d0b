#pragma once

// Dataset ingestion: MovieLens-1M, LastFM-360K, a planted-bias synthetic
// generator, per-user random splits and a plain TSV cache.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fairdda/errors.hpp"

namespace fairdda {

struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

// Dense id remapping. Keys are ordered numerically when all are integers,
// lexicographically otherwise, so the assignment does not depend on file order.
class IdIndex {
 public:
  IdIndex() = default;
  explicit IdIndex(std::vector<std::string> keys) {
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    const bool numeric = std::all_of(keys.begin(), keys.end(), [](const std::string& k) {
      return !k.empty() && k.size() < 19 &&
             std::all_of(k.begin(), k.end(), [](char c) { return c >= '0' && c <= '9'; });
    });
    if (numeric) {
      std::sort(keys.begin(), keys.end(), [](const std::string& a, const std::string& b) {
        return std::stoll(a) < std::stoll(b);
      });
    }
    keys_ = std::move(keys);
    for (std::uint32_t i = 0; i < keys_.size(); ++i) index_.emplace(keys_[i], i);
  }

  std::size_t size() const { return keys_.size(); }
  bool contains(const std::string& key) const { return index_.count(key) != 0; }
  std::uint32_t encode(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw DataError("unknown id '" + key + "'");
    return it->second;
  }
  const std::string& decode(std::uint32_t id) const { return keys_.at(id); }
  const std::vector<std::string>& keys() const { return keys_; }

 private:
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct Dataset {
  std::string name;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t num_classes = 2;
  // Sorted by (user, item), no duplicates.
  std::vector<Interaction> interactions;
  // Sensitive class per user; the one-hot vector is implied.
  std::vector<std::uint32_t> attribute;
  IdIndex users;
  IdIndex items;
  // Item count before restricting to items with at least one interaction
  // (the largest raw item id for MovieLens).
  std::size_t raw_item_count = 0;

  std::vector<std::uint8_t> one_hot(std::uint32_t user) const {
    std::vector<std::uint8_t> v(num_classes, 0);
    v.at(attribute.at(user)) = 1;
    return v;
  }

  std::vector<std::vector<std::uint32_t>> user_items() const {
    std::vector<std::vector<std::uint32_t>> r(num_users);
    for (const auto& it : interactions) r[it.user].push_back(it.item);
    return r;
  }

  std::vector<std::size_t> group_sizes() const {
    std::vector<std::size_t> s(num_classes, 0);
    for (auto a : attribute) ++s[a];
    return s;
  }
};

enum class MovieLensAttribute { Gender, Occupation };

struct MovieLensOptions {
  MovieLensAttribute attribute = MovieLensAttribute::Gender;
  std::string ratings_file = "ratings.dat";
  std::string users_file = "users.dat";
};

struct LastfmOptions {
  std::string plays_file = "usersha1-artmbid-artname-plays.tsv";
  std::string profile_file = "usersha1-profile.tsv";
  std::size_t user_column = 0;
  std::size_t item_column = 1;
  std::size_t count_column = 3;
  std::size_t profile_user_column = 0;
  std::size_t profile_gender_column = 1;
};

namespace detail {

inline std::vector<std::string_view> split_on(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

inline std::string_view trim_cr(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

inline std::ifstream open_input(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("missing file: " + p.string());
  return in;
}

inline long long parse_int(std::string_view s, const std::string& where) {
  if (s.empty()) throw DataError(where + ": empty integer field");
  long long v = 0;
  bool negative = false;
  std::size_t i = 0;
  if (s[0] == '-') {
    negative = true;
    i = 1;
  }
  if (i == s.size()) throw DataError(where + ": malformed integer '" + std::string(s) + "'");
  for (; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9')
      throw DataError(where + ": malformed integer '" + std::string(s) + "'");
    v = v * 10 + (s[i] - '0');
  }
  return negative ? -v : v;
}

struct RawInteraction {
  std::string user;
  std::string item;
  std::int64_t timestamp;
};

// Dense reindexing plus dedup; attributes must cover every user with interactions.
inline Dataset assemble(std::string name, const std::vector<RawInteraction>& raw,
                        const std::map<std::string, std::uint32_t>& attribute,
                        std::size_t num_classes) {
  if (raw.empty()) throw DataError("no interactions");
  std::vector<std::string> ukeys, ikeys;
  ukeys.reserve(raw.size());
  ikeys.reserve(raw.size());
  for (const auto& r : raw) {
    ukeys.push_back(r.user);
    ikeys.push_back(r.item);
  }
  Dataset ds;
  ds.name = std::move(name);
  ds.users = IdIndex(std::move(ukeys));
  ds.items = IdIndex(std::move(ikeys));
  ds.num_users = ds.users.size();
  ds.num_items = ds.items.size();
  ds.raw_item_count = ds.num_items;
  ds.num_classes = num_classes;
  ds.attribute.resize(ds.num_users);
  for (std::uint32_t u = 0; u < ds.num_users; ++u) {
    auto it = attribute.find(ds.users.decode(u));
    if (it == attribute.end())
      throw DataError("user " + ds.users.decode(u) + " has interactions but no profile row");
    ds.attribute[u] = it->second;
  }
  ds.interactions.reserve(raw.size());
  for (const auto& r : raw)
    ds.interactions.push_back({ds.users.encode(r.user), ds.items.encode(r.item), r.timestamp});
  std::sort(ds.interactions.begin(), ds.interactions.end(), [](const auto& a, const auto& b) {
    return a.user != b.user ? a.user < b.user : a.item < b.item;
  });
  ds.interactions.erase(std::unique(ds.interactions.begin(), ds.interactions.end(),
                                    [](const auto& a, const auto& b) {
                                      return a.user == b.user && a.item == b.item;
                                    }),
                        ds.interactions.end());
  return ds;
}

}  // namespace detail

// MovieLens-1M: ratings.dat (UserID::MovieID::Rating::Timestamp) and users.dat
// (UserID::Gender::Age::Occupation::Zip). Every rating becomes an implicit positive.
inline Dataset load_movielens(const std::filesystem::path& dir, const MovieLensOptions& opt = {}) {
  const auto users_path = dir / opt.users_file;
  const auto ratings_path = dir / opt.ratings_file;
  auto users_in = detail::open_input(users_path);
  auto ratings_in = detail::open_input(ratings_path);

  std::map<std::string, std::uint32_t> attribute;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(users_in, line)) {
    ++lineno;
    const auto sv = detail::trim_cr(line);
    if (sv.empty()) continue;
    const auto f = detail::split_on(sv, "::");
    const std::string where = users_path.string() + ":" + std::to_string(lineno);
    if (f.size() < 4 || f[0].empty()) throw DataError(where + ": malformed line");
    std::uint32_t cls = 0;
    if (opt.attribute == MovieLensAttribute::Gender) {
      if (f[1] == "F") cls = 0;
      else if (f[1] == "M") cls = 1;
      else throw DataError(where + ": unknown gender '" + std::string(f[1]) + "'");
    } else {
      const auto occ = detail::parse_int(f[3], where);
      if (occ < 0 || occ > 20) throw DataError(where + ": occupation out of range");
      cls = static_cast<std::uint32_t>(occ);
    }
    detail::parse_int(f[0], where);
    attribute[std::string(f[0])] = cls;
  }

  std::vector<detail::RawInteraction> raw;
  long long max_item = 0;
  lineno = 0;
  while (std::getline(ratings_in, line)) {
    ++lineno;
    const auto sv = detail::trim_cr(line);
    if (sv.empty()) continue;
    const auto f = detail::split_on(sv, "::");
    const std::string where = ratings_path.string() + ":" + std::to_string(lineno);
    if (f.size() < 2 || f[0].empty() || f[1].empty()) throw DataError(where + ": malformed line");
    detail::parse_int(f[0], where);
    max_item = std::max(max_item, detail::parse_int(f[1], where));
    const std::int64_t ts = f.size() >= 4 && !f[3].empty() ? detail::parse_int(f[3], where) : 0;
    raw.push_back({std::string(f[0]), std::string(f[1]), ts});
  }
  Dataset ds = detail::assemble("movielens", raw, attribute,
                                opt.attribute == MovieLensAttribute::Gender ? 2 : 21);
  ds.raw_item_count = static_cast<std::size_t>(max_item);
  return ds;
}

// LastFM-360K play counts (tab separated). Counts >= 1 become interactions;
// users whose gender is not m/f are dropped.
inline Dataset load_lastfm(const std::filesystem::path& dir, const LastfmOptions& opt = {}) {
  const auto profile_path = dir / opt.profile_file;
  const auto plays_path = dir / opt.plays_file;
  auto profile_in = detail::open_input(profile_path);
  auto plays_in = detail::open_input(plays_path);

  std::map<std::string, std::uint32_t> attribute;
  std::set<std::string> profiled;
  std::string line;
  std::size_t lineno = 0;
  const std::size_t pcols = std::max(opt.profile_user_column, opt.profile_gender_column) + 1;
  while (std::getline(profile_in, line)) {
    ++lineno;
    const auto sv = detail::trim_cr(line);
    if (sv.empty()) continue;
    const auto f = detail::split_on(sv, "\t");
    if (f.size() < pcols || f[opt.profile_user_column].empty())
      throw DataError(profile_path.string() + ":" + std::to_string(lineno) + ": malformed line");
    const std::string user(f[opt.profile_user_column]);
    profiled.insert(user);
    const auto g = f[opt.profile_gender_column];
    if (g == "f" || g == "F") attribute[user] = 0;
    else if (g == "m" || g == "M") attribute[user] = 1;
  }
  if (attribute.empty()) throw DataError("no user in " + profile_path.string() + " has a gender");

  std::vector<detail::RawInteraction> raw;
  lineno = 0;
  const std::size_t cols =
      std::max({opt.user_column, opt.item_column, opt.count_column}) + 1;
  while (std::getline(plays_in, line)) {
    ++lineno;
    const auto sv = detail::trim_cr(line);
    if (sv.empty()) continue;
    const auto f = detail::split_on(sv, "\t");
    const std::string where = plays_path.string() + ":" + std::to_string(lineno);
    if (f.size() < cols || f[opt.user_column].empty()) throw DataError(where + ": malformed line");
    const std::string user(f[opt.user_column]);
    if (!profiled.count(user)) throw DataError(where + ": user " + user + " has no profile row");
    if (!attribute.count(user)) continue;
    if (f[opt.item_column].empty()) continue;
    if (detail::parse_int(f[opt.count_column], where) < 1) continue;
    raw.push_back({user, std::string(f[opt.item_column]), 0});
  }
  return detail::assemble("lastfm", raw, attribute, 2);
}

struct SyntheticOptions {
  std::size_t num_users = 300;
  std::size_t num_items = 150;
  std::size_t num_classes = 2;
  double bias_strength = 0.8;
  std::uint64_t seed = 0;
  // Fraction of items in the pool shared by all groups; the rest is split
  // evenly into one favored pool per group.
  double shared_fraction = 0.5;
  std::size_t min_interactions = 10;
  std::size_t max_interactions = 30;
  // Group-independent personal taste: each user prefers one of `topics` item
  // topics by a factor `taste_strength` when picking inside a pool.
  std::size_t topics = 5;
  double taste_strength = 4.0;
  // Item popularity follows rank^-popularity_exponent inside each pool.
  double popularity_exponent = 0.5;
  // Blended: biased draws come from the favored pool plus the shared pool and
  // the remaining draws from the whole catalogue. Strict: biased draws come
  // from the favored pool only and the rest from the shared pool, so a group
  // never touches another group's pool.
  enum class Mixing { Blended, Strict } mixing = Mixing::Blended;
};

// Item pool assignment used by the generator: pool c < C is the favored pool
// of group c, pool C is the shared pool.
struct SyntheticLayout {
  std::vector<std::uint32_t> item_pool;
  std::vector<std::uint32_t> item_topic;
  std::vector<std::uint32_t> user_topic;
};

inline Dataset generate_synthetic(const SyntheticOptions& opt, SyntheticLayout* layout = nullptr) {
  if (!(opt.bias_strength >= 0.0 && opt.bias_strength <= 1.0))
    throw DataError("bias_strength must lie in [0, 1]");
  if (opt.num_users < 10 || opt.num_items < 10) throw DataError("synthetic data needs M, N >= 10");
  if (opt.num_classes < 2) throw DataError("synthetic data needs at least two groups");
  if (!(opt.shared_fraction >= 0.0 && opt.shared_fraction < 1.0))
    throw DataError("shared_fraction must lie in [0, 1)");
  if (opt.min_interactions < 1 || opt.max_interactions < opt.min_interactions)
    throw DataError("invalid interaction count range");
  if (opt.topics < 1) throw DataError("topics must be positive");

  const std::size_t M = opt.num_users, N = opt.num_items, C = opt.num_classes;
  std::mt19937_64 rng(opt.seed);

  std::vector<std::uint32_t> order(N);
  std::iota(order.begin(), order.end(), 0u);
  std::shuffle(order.begin(), order.end(), rng);
  const auto shared = static_cast<std::size_t>(std::llround(opt.shared_fraction * N));
  if (N - shared < C) throw DataError("not enough items for one favored pool per group");
  std::vector<std::uint32_t> pool(N);
  for (std::size_t k = 0; k < N; ++k)
    pool[order[k]] = k < shared ? static_cast<std::uint32_t>(C)
                                : static_cast<std::uint32_t>((k - shared) % C);

  std::vector<std::vector<std::uint32_t>> members(C + 1);
  for (std::uint32_t v = 0; v < N; ++v) members[pool[v]].push_back(v);

  std::uniform_int_distribution<std::uint32_t> topic_dist(0, static_cast<std::uint32_t>(opt.topics - 1));
  std::vector<std::uint32_t> item_topic(N);
  for (auto& t : item_topic) t = topic_dist(rng);
  // Popularity: random rank inside each pool.
  std::vector<double> popularity(N);
  for (auto& m : members) {
    std::vector<std::uint32_t> ranked = m;
    std::shuffle(ranked.begin(), ranked.end(), rng);
    for (std::size_t r = 0; r < ranked.size(); ++r)
      popularity[ranked[r]] = std::pow(static_cast<double>(r + 1), -opt.popularity_exponent);
  }

  // Balanced group assignment.
  std::vector<std::uint32_t> group(M);
  for (std::size_t u = 0; u < M; ++u) group[u] = static_cast<std::uint32_t>(u % C);
  std::shuffle(group.begin(), group.end(), rng);
  std::vector<std::uint32_t> user_topic(M);
  for (auto& t : user_topic) t = topic_dist(rng);

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> count_dist(opt.min_interactions, opt.max_interactions);

  Dataset ds;
  ds.name = "synthetic";
  ds.num_users = M;
  ds.num_items = N;
  ds.raw_item_count = N;
  ds.num_classes = C;
  ds.attribute = group;
  std::vector<std::string> ukeys(M), ikeys(N);
  for (std::size_t u = 0; u < M; ++u) ukeys[u] = std::to_string(u);
  for (std::size_t v = 0; v < N; ++v) ikeys[v] = std::to_string(v);
  ds.users = IdIndex(std::move(ukeys));
  ds.items = IdIndex(std::move(ikeys));

  std::vector<std::uint32_t> everything(N);
  std::iota(everything.begin(), everything.end(), 0u);
  const bool strict = opt.mixing == SyntheticOptions::Mixing::Strict;
  std::vector<std::vector<std::uint32_t>> favored_items(C);
  for (std::uint32_t v = 0; v < N; ++v)
    for (std::size_t c = 0; c < C; ++c)
      if (pool[v] == c || (!strict && pool[v] == C)) favored_items[c].push_back(v);
  const auto& background = strict ? members[C] : everything;
  for (std::uint32_t u = 0; u < M; ++u) {
    const auto& own = favored_items[group[u]];
    std::vector<std::uint8_t> taken(N, 0);
    std::size_t available = own.size() + background.size();
    if (!strict) available = opt.bias_strength == 1.0 ? own.size() : N;
    else if (opt.bias_strength == 0.0) available = background.empty() ? own.size() : background.size();
    else if (opt.bias_strength == 1.0) available = own.size();
    const std::size_t target = std::min(count_dist(rng), available);
    std::vector<std::uint32_t> chosen;
    auto pick_from = [&](const std::vector<std::uint32_t>& cand) -> bool {
      double total = 0.0;
      for (auto v : cand)
        if (!taken[v])
          total += popularity[v] * (item_topic[v] == user_topic[u] ? opt.taste_strength : 1.0);
      if (total <= 0.0) return false;
      double r = unif(rng) * total;
      for (auto v : cand) {
        if (taken[v]) continue;
        r -= popularity[v] * (item_topic[v] == user_topic[u] ? opt.taste_strength : 1.0);
        if (r <= 0.0) {
          taken[v] = 1;
          chosen.push_back(v);
          return true;
        }
      }
      for (auto it = cand.rbegin(); it != cand.rend(); ++it) {
        if (!taken[*it]) {
          taken[*it] = 1;
          chosen.push_back(*it);
          return true;
        }
      }
      return false;
    };
    while (chosen.size() < target) {
      const bool favored = background.empty() || unif(rng) < opt.bias_strength;
      if (!pick_from(favored ? own : background)) {
        // The chosen pool is exhausted; fall back to the other one unless the
        // bias is absolute in either direction.
        if (opt.bias_strength == 0.0 || opt.bias_strength == 1.0) break;
        if (!pick_from(favored ? background : own)) break;
      }
    }
    std::sort(chosen.begin(), chosen.end());
    for (auto v : chosen) ds.interactions.push_back({u, v, 0});
  }
  if (layout) *layout = {std::move(pool), std::move(item_topic), std::move(user_topic)};
  return ds;
}

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct Split {
  std::vector<Interaction> train;
  std::vector<Interaction> validation;
  std::vector<Interaction> test;
  std::uint64_t seed = 0;

  bool operator==(const Split&) const = default;
};

// Number of (train, validation, test) items for a user with n interactions.
// Users with fewer than 3 interactions are kept entirely in train; otherwise at
// least one train and one test item are guaranteed.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitRatios& r) {
  if (n < 3) return {n, 0, 0};
  const auto dn = static_cast<double>(n);
  std::size_t test = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(dn * r.test + 0.5)));
  std::size_t val = static_cast<std::size_t>(std::floor(dn * r.validation + 0.5));
  if (test > n - 1) test = n - 1;
  if (val > n - 1 - test) val = n - 1 - test;
  return {n - test - val, val, test};
}

inline void validate_ratios(const SplitRatios& r) {
  if (r.train <= 0.0) throw DataError("split ratios need a positive train share");
  if (r.validation < 0.0 || r.test < 0.0) throw DataError("split ratios must be non-negative");
  if (std::abs(r.train + r.validation + r.test - 1.0) > 1e-9)
    throw DataError("split ratios must sum to 1");
}

// Per-user random split, deterministic under seed.
inline Split split_dataset(const Dataset& ds, const SplitRatios& ratios, std::uint64_t seed) {
  validate_ratios(ratios);
  Split s;
  s.seed = seed;
  std::mt19937_64 rng(seed);
  std::size_t begin = 0;
  const auto& all = ds.interactions;
  while (begin < all.size()) {
    std::size_t end = begin;
    while (end < all.size() && all[end].user == all[begin].user) ++end;
    std::vector<Interaction> mine(all.begin() + static_cast<std::ptrdiff_t>(begin),
                                  all.begin() + static_cast<std::ptrdiff_t>(end));
    std::shuffle(mine.begin(), mine.end(), rng);
    const auto [ntr, nva, nte] = split_counts(mine.size(), ratios);
    std::size_t k = 0;
    for (; k < ntr; ++k) s.train.push_back(mine[k]);
    for (; k < ntr + nva; ++k) s.validation.push_back(mine[k]);
    for (; k < ntr + nva + nte; ++k) s.test.push_back(mine[k]);
    begin = end;
  }
  auto by_pair = [](const Interaction& a, const Interaction& b) {
    return a.user != b.user ? a.user < b.user : a.item < b.item;
  };
  std::sort(s.train.begin(), s.train.end(), by_pair);
  std::sort(s.validation.begin(), s.validation.end(), by_pair);
  std::sort(s.test.begin(), s.test.end(), by_pair);
  return s;
}

inline std::vector<std::vector<std::uint32_t>> per_user_items(
    const std::vector<Interaction>& list, std::size_t num_users) {
  std::vector<std::vector<std::uint32_t>> r(num_users);
  for (const auto& it : list) r.at(it.user).push_back(it.item);
  for (auto& v : r) std::sort(v.begin(), v.end());
  return r;
}

// Canonical cache: interactions.tsv (user<TAB>item) and attributes.tsv (user<TAB>class).
inline void save_cache(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::ofstream inter(dir / "interactions.tsv");
  std::ofstream attr(dir / "attributes.tsv");
  if (!inter || !attr) throw DataError("cannot write cache in " + dir.string());
  for (const auto& it : ds.interactions) inter << it.user << '\t' << it.item << '\n';
  for (std::size_t u = 0; u < ds.num_users; ++u) attr << u << '\t' << ds.attribute[u] << '\n';
}

inline Dataset load_cache(const std::filesystem::path& dir) {
  auto attr_in = detail::open_input(dir / "attributes.tsv");
  auto inter_in = detail::open_input(dir / "interactions.tsv");
  std::map<std::string, std::uint32_t> attribute;
  std::uint32_t max_class = 1;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(attr_in, line)) {
    ++lineno;
    const auto sv = detail::trim_cr(line);
    if (sv.empty()) continue;
    const auto f = detail::split_on(sv, "\t");
    const std::string where = (dir / "attributes.tsv").string() + ":" + std::to_string(lineno);
    if (f.size() != 2) throw DataError(where + ": malformed line");
    detail::parse_int(f[0], where);
    const auto c = detail::parse_int(f[1], where);
    if (c < 0) throw DataError(where + ": negative class index");
    attribute[std::string(f[0])] = static_cast<std::uint32_t>(c);
    max_class = std::max(max_class, static_cast<std::uint32_t>(c));
  }
  std::vector<detail::RawInteraction> raw;
  lineno = 0;
  while (std::getline(inter_in, line)) {
    ++lineno;
    const auto sv = detail::trim_cr(line);
    if (sv.empty()) continue;
    const auto f = detail::split_on(sv, "\t");
    const std::string where = (dir / "interactions.tsv").string() + ":" + std::to_string(lineno);
    if (f.size() != 2) throw DataError(where + ": malformed line");
    detail::parse_int(f[0], where);
    detail::parse_int(f[1], where);
    raw.push_back({std::string(f[0]), std::string(f[1]), 0});
  }
  return detail::assemble("cache", raw, attribute, max_class + 1);
}

}  // namespace fairdda
