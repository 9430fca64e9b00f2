#include "egd/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <string_view>

#include "egd/error.hpp"
#include "egd/rng.hpp"

namespace egd {

namespace {

[[noreturn]] void fail(const std::string& message) { throw Error("corpus", message); }

std::string where(const std::string& source, std::size_t line) { return source + ":" + std::to_string(line); }

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + sep.size();
  }
}

bool parse_int(std::string_view s, std::int64_t& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

InputFormat parse_input_format(const std::string& name) {
  if (name == "movielens-dat") return InputFormat::MovieLensDat;
  if (name == "amazon-jsonl") return InputFormat::AmazonJsonl;
  if (name == "tsv") return InputFormat::Tsv;
  fail("unknown input format '" + name + "' (expected movielens-dat, amazon-jsonl or tsv)");
}

std::string to_string(InputFormat format) {
  switch (format) {
    case InputFormat::MovieLensDat: return "movielens-dat";
    case InputFormat::AmazonJsonl: return "amazon-jsonl";
    case InputFormat::Tsv: return "tsv";
  }
  return "unknown";
}

std::size_t InteractionCorpus::n_interactions() const noexcept {
  std::size_t n = 0;
  for (const auto& s : sequences_) n += s.size();
  return n;
}

std::vector<ItemIndex> InteractionCorpus::item_sequence(UserIndex u) const {
  const auto& seq = sequences_.at(u);
  std::vector<ItemIndex> items(seq.size());
  std::transform(seq.begin(), seq.end(), items.begin(), [](const Interaction& e) { return e.item; });
  return items;
}

UserIndex InteractionCorpus::user_index(const std::string& raw) const {
  auto it = user_lookup_.find(raw);
  if (it == user_lookup_.end()) fail("unknown user id '" + raw + "'");
  return it->second;
}

ItemIndex InteractionCorpus::item_index(const std::string& raw) const {
  auto it = item_lookup_.find(raw);
  if (it == item_lookup_.end()) fail("unknown item id '" + raw + "'");
  return it->second;
}

ItemIndex InteractionCorpus::add_item(const std::string& raw) {
  auto [it, inserted] = item_lookup_.emplace(raw, item_ids_.size());
  if (inserted) item_ids_.push_back(raw);
  return it->second;
}

UserIndex InteractionCorpus::add_user(const std::string& raw) {
  auto [it, inserted] = user_lookup_.emplace(raw, user_ids_.size());
  if (inserted) {
    user_ids_.push_back(raw);
    sequences_.emplace_back();
  }
  return it->second;
}

void InteractionCorpus::append(UserIndex u, Interaction event) {
  if (event.item == kPadItem || event.item > n_items()) fail("interaction references unknown item index");
  sequences_.at(u).push_back(event);
}

InteractionCorpus InteractionCorpus::from_events(std::span<const RawEvent> events) {
  InteractionCorpus c;
  for (const RawEvent& e : events) {
    const UserIndex u = c.add_user(e.user);
    const ItemIndex i = c.add_item(e.item);
    c.sequences_[u].push_back({i, e.timestamp});
  }
  for (auto& seq : c.sequences_) {
    std::stable_sort(seq.begin(), seq.end(),
                     [](const Interaction& a, const Interaction& b) { return a.timestamp < b.timestamp; });
  }
  return c;
}

std::vector<RawEvent> parse_events(std::istream& in, InputFormat format, const LoadOptions& options,
                                   const std::string& source) {
  std::vector<RawEvent> events;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (format == InputFormat::Tsv && options.tsv_header && lineno == 1) continue;
    const std::string_view text = trim(line);
    if (text.empty()) continue;
    RawEvent ev;
    switch (format) {
      case InputFormat::MovieLensDat: {
        auto f = split(text, "::");
        if (f.size() != 4) fail(where(source, lineno) + ": expected UserID::MovieID::Rating::Timestamp");
        if (trim(f[0]).empty() || trim(f[1]).empty()) fail(where(source, lineno) + ": empty id");
        if (!parse_int(f[3], ev.timestamp)) fail(where(source, lineno) + ": bad timestamp '" + std::string(f[3]) + "'");
        ev.user = std::string(trim(f[0]));
        ev.item = std::string(trim(f[1]));
        break;
      }
      case InputFormat::Tsv: {
        auto f = split(text, "\t");
        if (f.size() != 3) fail(where(source, lineno) + ": expected user<TAB>item<TAB>timestamp");
        if (trim(f[0]).empty() || trim(f[1]).empty()) fail(where(source, lineno) + ": empty id");
        if (!parse_int(f[2], ev.timestamp)) fail(where(source, lineno) + ": bad timestamp '" + std::string(f[2]) + "'");
        ev.user = std::string(trim(f[0]));
        ev.item = std::string(trim(f[1]));
        break;
      }
      case InputFormat::AmazonJsonl: {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
          fail(where(source, lineno) + ": invalid JSON (" + e.what() + ")");
        }
        if (!j.is_object() || !j.contains("reviewerID") || !j.contains("asin") || !j.contains("unixReviewTime")) {
          fail(where(source, lineno) + ": expected keys reviewerID, asin, unixReviewTime");
        }
        const auto& u = j["reviewerID"];
        const auto& i = j["asin"];
        const auto& t = j["unixReviewTime"];
        if (!u.is_string() || !i.is_string() || !t.is_number_integer()) {
          fail(where(source, lineno) + ": reviewerID/asin must be strings and unixReviewTime an integer");
        }
        ev.user = u.get<std::string>();
        ev.item = i.get<std::string>();
        ev.timestamp = t.get<std::int64_t>();
        break;
      }
    }
    events.push_back(std::move(ev));
  }
  if (events.empty()) fail(source + ": no interactions found (empty input)");
  return events;
}

std::vector<RawEvent> k_core_filter(std::vector<RawEvent> events, std::size_t min_count) {
  if (min_count <= 1) return events;
  while (true) {
    std::unordered_map<std::string, std::size_t> users, items;
    for (const RawEvent& e : events) {
      ++users[e.user];
      ++items[e.item];
    }
    const auto before = events.size();
    std::erase_if(events, [&](const RawEvent& e) { return users[e.user] < min_count || items[e.item] < min_count; });
    if (events.size() == before) return events;
  }
}

InteractionCorpus load_interactions(const std::filesystem::path& path, InputFormat format, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path.string());
  auto events = parse_events(in, format, options, path.string());
  events = k_core_filter(std::move(events), options.min_count);
  if (events.empty()) fail(path.string() + ": no interactions left after " + std::to_string(options.min_count) + "-core filtering");
  return InteractionCorpus::from_events(events);
}

LeaveOneOut leave_one_out_split(const InteractionCorpus& corpus) {
  LeaveOneOut out;
  for (UserIndex u = 0; u < corpus.n_users(); ++u) {
    auto items = corpus.item_sequence(u);
    if (items.size() < 3) {
      ++out.dropped_users;
      continue;
    }
    SplitView v;
    v.test_target = items.back();
    v.valid_target = items[items.size() - 2];
    items.resize(items.size() - 2);
    v.train = std::move(items);
    out.splits.emplace(u, std::move(v));
  }
  return out;
}

std::size_t PaddedWindow::pad_count() const {
  return static_cast<std::size_t>(
      std::find_if(indices.begin(), indices.end(), [](ItemIndex i) { return i != kPadItem; }) - indices.begin());
}

std::span<const ItemIndex> PaddedWindow::items() const {
  return std::span<const ItemIndex>(indices).subspan(pad_count());
}

PaddedWindow make_window(std::span<const ItemIndex> history, std::size_t length, ItemIndex target) {
  if (length == 0) fail("window length must be at least 1");
  const std::size_t n = std::min(history.size(), length);
  const std::size_t pad = length - n;
  PaddedWindow w;
  w.indices.assign(length, kPadItem);
  w.positions.assign(length, 0);
  w.target = target;
  for (std::size_t t = 0; t < n; ++t) {
    w.indices[pad + t] = history[history.size() - n + t];
    w.positions[pad + t] = t;
  }
  return w;
}

std::vector<PaddedWindow> make_windows(std::span<const ItemIndex> sequence, std::size_t length) {
  if (length == 0) fail("window length must be at least 1");
  std::vector<PaddedWindow> out;
  for (std::size_t end = 1; end < sequence.size(); ++end) {
    out.push_back(make_window(sequence.first(end), length, sequence[end]));
  }
  return out;
}

std::vector<PaddedWindow> make_windows(const SplitView& split, std::size_t length) {
  return make_windows(std::span<const ItemIndex>(split.train), length);
}

NegativeSample sample_negatives(const InteractionCorpus& corpus, UserIndex user, ItemIndex positive, std::size_t n,
                                std::uint64_t seed) {
  const std::size_t n_items = corpus.n_items();
  std::vector<char> excluded(n_items + 1, 0);
  excluded[kPadItem] = 1;
  if (positive <= n_items) excluded[positive] = 1;
  for (const Interaction& e : corpus.sequence(user)) excluded[e.item] = 1;
  const std::size_t eligible = static_cast<std::size_t>(std::count(excluded.begin(), excluded.end(), 0));
  if (eligible < n) {
    fail("user '" + corpus.user_id(user) + "' has only " + std::to_string(eligible) + " eligible negatives, " +
         std::to_string(n) + " required");
  }
  Rng rng(splitmix64(seed));
  NegativeSample s;
  s.candidates.reserve(n + 1);
  s.candidates.push_back(positive);
  s.positive_position = 0;
  if (eligible < 4 * n) {
    std::vector<ItemIndex> pool;
    pool.reserve(eligible);
    for (ItemIndex i = 1; i <= n_items; ++i)
      if (!excluded[i]) pool.push_back(i);
    for (std::size_t k = 0; k < n; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
      std::swap(pool[k], pool[pick(rng)]);
      s.candidates.push_back(pool[k]);
    }
  } else {
    std::uniform_int_distribution<ItemIndex> pick(1, n_items);
    while (s.candidates.size() < n + 1) {
      const ItemIndex i = pick(rng);
      if (excluded[i]) continue;
      excluded[i] = 1;
      s.candidates.push_back(i);
    }
  }
  return s;
}

CorpusStats corpus_stats(const InteractionCorpus& corpus) {
  CorpusStats s;
  s.users = corpus.n_users();
  s.items = corpus.n_items();
  s.interactions = corpus.n_interactions();
  s.mean_sequence_length = s.users ? static_cast<double>(s.interactions) / static_cast<double>(s.users) : 0.0;
  const double cells = static_cast<double>(s.users) * static_cast<double>(s.items);
  s.sparsity = cells > 0 ? 1.0 - static_cast<double>(s.interactions) / cells : 0.0;
  return s;
}

PreparedData prepare(const InteractionCorpus& corpus) {
  PreparedData out;
  for (ItemIndex i = 1; i <= corpus.n_items(); ++i) out.corpus.add_item(corpus.item_id(i));
  const LeaveOneOut full = leave_one_out_split(corpus);
  out.split.dropped_users = full.dropped_users;
  for (const auto& [u, view] : full.splits) {
    const UserIndex nu = out.corpus.add_user(corpus.user_id(u));
    for (const Interaction& e : corpus.sequence(u)) out.corpus.append(nu, e);
    out.split.splits.emplace(nu, view);
  }
  return out;
}

namespace {

void write_events(const std::filesystem::path& file, const PreparedData& data,
                  const std::function<std::span<const Interaction>(const std::vector<Interaction>&)>& pick) {
  std::ofstream out(file);
  if (!out) fail("cannot write " + file.string());
  for (UserIndex u = 0; u < data.corpus.n_users(); ++u) {
    for (const Interaction& e : pick(data.corpus.sequence(u))) {
      out << data.corpus.user_id(u) << '\t' << e.item << '\t' << e.timestamp << '\n';
    }
  }
}

std::vector<std::vector<std::string_view>> read_rows(const std::filesystem::path& file, std::string& buffer,
                                                     std::size_t fields) {
  std::ifstream in(file);
  if (!in) fail("cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  buffer = ss.str();
  std::vector<std::vector<std::string_view>> rows;
  std::size_t lineno = 0;
  for (std::string_view line : split(buffer, "\n")) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    auto f = split(line, "\t");
    if (f.size() != fields) fail(where(file.string(), lineno) + ": expected " + std::to_string(fields) + " fields");
    rows.push_back(std::move(f));
  }
  return rows;
}

}  // namespace

void write_prepared(const std::filesystem::path& dir, const PreparedData& data) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream items(dir / "items.tsv");
    if (!items) fail("cannot write " + (dir / "items.tsv").string());
    for (ItemIndex i = 1; i <= data.corpus.n_items(); ++i) items << data.corpus.item_id(i) << '\t' << i << '\n';
  }
  using Seq = std::vector<Interaction>;
  write_events(dir / "train.tsv", data, [](const Seq& s) { return std::span<const Interaction>(s).first(s.size() - 2); });
  write_events(dir / "valid.tsv", data, [](const Seq& s) { return std::span<const Interaction>(s).subspan(s.size() - 2, 1); });
  write_events(dir / "test.tsv", data, [](const Seq& s) { return std::span<const Interaction>(s).last(1); });
}

PreparedData read_prepared(const std::filesystem::path& dir) {
  PreparedData data;
  std::string buf;
  for (const auto& row : read_rows(dir / "items.tsv", buf, 2)) {
    std::int64_t idx = 0;
    const ItemIndex got = data.corpus.add_item(std::string(row[0]));
    if (!parse_int(row[1], idx) || static_cast<ItemIndex>(idx) != got) {
      fail((dir / "items.tsv").string() + ": item indices must be contiguous from 1 in file order");
    }
  }
  std::map<UserIndex, std::vector<Interaction>> valid, test;
  auto load = [&](const char* name, auto&& sink) {
    std::string b;
    const auto file = dir / name;
    for (const auto& row : read_rows(file, b, 3)) {
      std::int64_t item = 0, ts = 0;
      if (!parse_int(row[1], item) || !parse_int(row[2], ts) || item < 1 ||
          static_cast<std::size_t>(item) > data.corpus.n_items()) {
        fail(file.string() + ": bad item index or timestamp for user '" + std::string(row[0]) + "'");
      }
      sink(data.corpus.add_user(std::string(row[0])), Interaction{static_cast<ItemIndex>(item), ts});
    }
  };
  load("train.tsv", [&](UserIndex u, Interaction e) { data.corpus.append(u, e); });
  load("valid.tsv", [&](UserIndex u, Interaction e) { valid[u].push_back(e); });
  load("test.tsv", [&](UserIndex u, Interaction e) { test[u].push_back(e); });
  for (UserIndex u = 0; u < data.corpus.n_users(); ++u) {
    if (valid[u].size() != 1 || test[u].size() != 1) {
      fail(dir.string() + ": user '" + data.corpus.user_id(u) + "' needs exactly one valid and one test row");
    }
    SplitView v;
    v.train = data.corpus.item_sequence(u);
    v.valid_target = valid[u][0].item;
    v.test_target = test[u][0].item;
    data.corpus.append(u, valid[u][0]);
    data.corpus.append(u, test[u][0]);
    data.split.splits.emplace(u, std::move(v));
  }
  return data;
}

}  // namespace egd
