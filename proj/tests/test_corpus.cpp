#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "cbias/codec.hpp"
#include "cbias/corpus.hpp"
#include "doctest.h"

using namespace cbias;
using namespace cbias::corpus;

namespace {

GeneratorConfig small_config(std::uint64_t seed = 3) {
  GeneratorConfig c;
  c.num_scenes = 40;
  c.seed = seed;
  c.dims = {8, 4, 2};
  return c;
}

// Dataset from bare (subject category, object category, predicate) triplets,
// one two-entity scene per triplet.
Dataset handmade(std::size_t no, std::size_t nr, const std::vector<TripletKey>& keys) {
  Dataset ds;
  ds.vocab = Vocabulary::make(no, nr);
  ds.dims = {2, 2, 2};
  std::int64_t id = 0;
  for (const auto& k : keys) {
    SceneSample s;
    s.scene_id = id++;
    s.entities.push_back({k.subject_category, {0.0, 0.0, 0.2, 0.2}, {0.0, 0.0}});
    s.entities.push_back({k.object_category, {0.5, 0.5, 0.2, 0.2}, {0.0, 0.0}});
    s.edge_features[{0, 1}] = std::vector<double>(8, 0.0);
    s.edge_features[{1, 0}] = std::vector<double>(8, 0.0);
    s.triplets.push_back({0, 1, k.predicate});
    ds.scenes.push_back(std::move(s));
  }
  return ds;
}

std::vector<TripletKey> random_keys(std::size_t n, std::size_t no, std::size_t nr, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cat(0, static_cast<int>(no) - 1);
  std::uniform_int_distribution<int> pred(1, static_cast<int>(nr) - 1);
  std::vector<TripletKey> keys;
  for (std::size_t i = 0; i < n; ++i) keys.push_back({cat(rng), cat(rng), pred(rng)});
  return keys;
}

}  // namespace

TEST_CASE("vocabulary") {
  auto v = Vocabulary::make(4, 3);
  CHECK(v.num_objects() == 4);
  CHECK(v.predicates[0] == "__background__");
  std::set<std::string> names(v.objects.begin(), v.objects.end());
  CHECK(names.size() == 4);
  CHECK_THROWS(Vocabulary::make(1, 3));
  CHECK_THROWS(Vocabulary::make(3, 1));
}

TEST_CASE("boxes") {
  Box a{0.1, 0.1, 0.2, 0.2};
  CHECK(a.valid());
  CHECK_FALSE(Box{0.9, 0.1, 0.2, 0.2}.valid());
  CHECK_FALSE(Box{0.1, 0.1, 0.0, 0.2}.valid());
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, Box{0.5, 0.5, 0.1, 0.1}) == 0.0);
  CHECK(iou(Box{0, 0, 0.2, 0.2}, Box{0.1, 0, 0.2, 0.2}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("generator basics") {
  auto cfg = small_config();
  cfg.num_scenes = 0;
  CHECK(generate_dataset(cfg).scenes.empty());

  cfg = small_config();
  const auto ds = generate_dataset(cfg);
  REQUIRE(ds.scenes.size() == 40);
  for (const auto& s : ds.scenes) {
    CHECK_NOTHROW(s.validate(ds.vocab, ds.dims));
    CHECK(s.entities.size() >= cfg.min_entities);
    CHECK(s.entities.size() <= cfg.max_entities);
    CHECK_FALSE(s.triplets.empty());
    for (std::size_t i = 0; i < s.entities.size(); ++i)
      for (std::size_t j = i + 1; j < s.entities.size(); ++j)
        CHECK(iou(s.entities[i].box, s.entities[j].box) <= 0.5);
    for (const auto& t : s.triplets) CHECK(t.predicate != kBackground);
  }
  CHECK(serialize_dataset(ds) == serialize_dataset(generate_dataset(cfg)));
  CHECK(dataset_fingerprint(ds) != dataset_fingerprint(generate_dataset(small_config(4))));
}

TEST_CASE("generator config validation") {
  auto cfg = small_config();
  cfg.language_dominance = 1.5;
  CHECK_THROWS_AS(World{cfg}, std::invalid_argument);
  cfg = small_config();
  cfg.noise_sigma = -0.1;
  CHECK_THROWS_AS(World{cfg}, std::invalid_argument);
  cfg = small_config();
  cfg.min_entities = 1;
  CHECK_THROWS_AS(World{cfg}, std::invalid_argument);
}

TEST_CASE("crowded scenes fail after bounded retries") {
  auto cfg = small_config();
  cfg.min_entities = cfg.max_entities = 800;
  cfg.num_scenes = 1;
  CHECK_THROWS_AS(generate_dataset(cfg), GenerationError);
}

TEST_CASE("latent table rows are distributions without background mass") {
  World world(small_config());
  for (int s = 0; s < 20; ++s)
    for (int o = 0; o < 20; ++o) {
      auto row = world.predicate_distribution(s, o);
      CHECK(row[0] == 0.0);
      double total = 0;
      for (double v : row) total += v;
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("label-only Bayes accuracy matches enumeration of the table") {
  auto cfg = small_config();
  cfg.language_dominance = 1.0;
  cfg.noise_sigma = 0.0;
  World world(cfg);
  // Enumerate every (s, o, p) outcome and score the argmax-of-row predictor.
  double enumerated = 0.0;
  for (int s = 0; s < 20; ++s)
    for (int o = 0; o < 20; ++o) {
      auto row = world.predicate_distribution(s, o);
      const auto guess = std::max_element(row.begin(), row.end()) - row.begin();
      for (std::size_t p = 0; p < row.size(); ++p)
        if (static_cast<std::ptrdiff_t>(p) == guess)
          enumerated += world.category_probability(s) * world.category_probability(o) * row[p];
    }
  CHECK(std::abs(enumerated - world.pair_bayes_accuracy()) <= 1e-9);

  // Sampled triplets agree with the analytic value up to sampling error.
  cfg.num_scenes = 3000;
  const auto ds = generate_dataset(cfg);
  double hits = 0, total = 0;
  for (const auto& sc : ds.scenes)
    for (const auto& t : sc.triplets) {
      auto row = world.predicate_distribution(sc.entities[t.subject].category, sc.entities[t.object].category);
      hits += (std::max_element(row.begin(), row.end()) - row.begin()) == t.predicate;
      total += 1;
    }
  const double acc = hits / total, bayes = world.pair_bayes_accuracy();
  const double se = std::sqrt(bayes * (1 - bayes) / total);
  CHECK(std::abs(acc - bayes) <= 4 * se);

  // At full language dominance with no noise the edge features carry nothing.
  for (const auto& [pair, feat] : ds.scenes[0].edge_features)
    for (double v : feat) CHECK(v == 0.0);
}

TEST_CASE("default corpus is long-tailed") {
  GeneratorConfig cfg;
  cfg.num_scenes = 300;
  const auto ds = generate_dataset(cfg);
  std::vector<double> counts(cfg.num_predicates, 0.0);
  for (const auto& s : ds.scenes)
    for (const auto& t : s.triplets) counts[static_cast<std::size_t>(t.predicate)] += 1;
  const double total = ds.num_triplets();
  std::sort(counts.begin(), counts.end(), std::greater<>());
  CHECK((counts[0] + counts[1] + counts[2]) / total > 0.5);
}

TEST_CASE("zero-shot combinations are withheld from training scenes") {
  auto cfg = small_config();
  cfg.num_scenes = 200;
  cfg.zero_shot_count = 5;
  const auto splits = generate_splits(cfg);
  REQUIRE(splits.zero_shot.size() == 5);
  CHECK(splits.train.scenes.size() == 140);
  CHECK(splits.val.scenes.size() == 20);
  CHECK(splits.test.scenes.size() == 40);
  const std::set<TripletKey> held(splits.zero_shot.begin(), splits.zero_shot.end());
  for (const auto* part : {&splits.train, &splits.val})
    for (const auto& k : part->triplet_keys()) CHECK(held.count(k) == 0);
  const auto test_keys = splits.test.triplet_keys();
  for (const auto& k : splits.zero_shot) CHECK(test_keys.count(k) == 1);

  cfg.num_scenes = 10;
  cfg.zero_shot_count = 5;
  CHECK_THROWS_AS(generate_splits(cfg), GenerationError);
}

TEST_CASE("marginal examples") {
  // Category 0 as subject: predicate counts {1: 2, 2: 1, 3: 1}.
  const auto ds = handmade(3, 4, {{0, 1, 1}, {0, 2, 1}, {0, 1, 2}, {0, 0, 3}});
  const auto st = compute_marginals(ds, 1e-12);
  auto row = st.subject_row(0);
  CHECK(row[0] == doctest::Approx(0.0));
  CHECK(row[1] == doctest::Approx(0.5));
  CHECK(row[2] == doctest::Approx(0.25));
  CHECK(row[3] == doctest::Approx(0.25));
  // Category 2 never appears as a subject.
  for (double v : st.subject_row(2)) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  CHECK_THROWS(compute_marginals(handmade(3, 4, {}), 1e-3));
}

TEST_CASE("marginals match an independent recount") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t no = 6, nr = 5;
    const auto keys = random_keys(50, no, nr, rng);
    const auto st = compute_marginals(handmade(no, nr, keys));
    const double a = kDefaultSmoothing;
    for (std::size_t c = 0; c < no; ++c) {
      double s_total = 0, o_total = 0;
      std::vector<double> s_cnt(nr, 0), o_cnt(nr, 0);
      for (const auto& k : keys) {
        if (static_cast<std::size_t>(k.subject_category) == c) s_cnt[k.predicate] += 1, s_total += 1;
        if (static_cast<std::size_t>(k.object_category) == c) o_cnt[k.predicate] += 1, o_total += 1;
      }
      double s_sum = 0, o_sum = 0;
      for (std::size_t r = 0; r < nr; ++r) {
        CHECK(std::abs(st.subject_row(static_cast<int>(c))[r] - (s_cnt[r] + a) / (s_total + a * nr)) <= 1e-12);
        CHECK(std::abs(st.object_row(static_cast<int>(c))[r] - (o_cnt[r] + a) / (o_total + a * nr)) <= 1e-12);
        s_sum += st.subject_row(static_cast<int>(c))[r];
        o_sum += st.object_row(static_cast<int>(c))[r];
      }
      CHECK(std::abs(s_sum - 1.0) <= 1e-9);
      CHECK(std::abs(o_sum - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("joint target") {
  StatsTables st;
  st.num_objects = 2;
  st.num_predicates = 2;
  st.s_marg = {0.5, 0.5, 0.5, 0.5};
  st.o_marg = {1.0, 0.0, 0.5, 0.5};
  auto t = joint_target(0, 0, st);
  CHECK(t[0] == 0.5);
  CHECK(t[1] == 0.0);
  auto u = joint_target(1, 1, st);
  CHECK(u[0] == 0.25);
  CHECK(u[1] == 0.25);

  std::mt19937_64 rng(22);
  const auto full = compute_marginals(handmade(5, 6, random_keys(40, 5, 6, rng)));
  for (int s = 0; s < 5; ++s)
    for (int o = 0; o < 5; ++o) {
      auto j = joint_target(s, o, full);
      for (std::size_t r = 0; r < 6; ++r) CHECK(j[r] == full.subject_row(s)[r] * full.object_row(o)[r]);
    }
}

TEST_CASE("freq prior") {
  auto single = freq_table(handmade(3, 4, {{0, 1, 2}}), 1e-12);
  auto d = single.distribution(0, 1);
  CHECK(d[2] == doctest::Approx(1.0));
  CHECK(d[1] == doctest::Approx(0.0));
  for (double v : single.distribution(2, 2)) CHECK(v == doctest::Approx(0.25));

  std::mt19937_64 rng(23);
  const std::size_t no = 4, nr = 5;
  const auto keys = random_keys(60, no, nr, rng);
  auto freq = freq_table(handmade(no, nr, keys));
  const double a = kDefaultSmoothing;
  for (int s = 0; s < 4; ++s)
    for (int o = 0; o < 4; ++o) {
      std::vector<double> cnt(nr, 0);
      double total = 0;
      for (const auto& k : keys)
        if (k.subject_category == s && k.object_category == o) cnt[k.predicate] += 1, total += 1;
      for (std::size_t r = 0; r < nr; ++r)
        CHECK(std::abs(freq.distribution(s, o)[r] - (cnt[r] + a) / (total + a * nr)) <= 1e-12);
    }
}

TEST_CASE("stats round-trip through the checkpoint format") {
  std::mt19937_64 rng(24);
  const auto st = compute_marginals(handmade(4, 5, random_keys(30, 4, 5, rng)));
  const auto path = std::filesystem::temp_directory_path() / "cbias_stats_test.json";
  st.save(path);
  const auto back = StatsTables::load(path);
  CHECK(back.s_marg == st.s_marg);
  CHECK(back.o_marg == st.o_marg);
  CHECK(back.freq == st.freq);
  CHECK(back.alpha == st.alpha);
  std::filesystem::remove(path);

  auto params = st.to_params();
  params.get("stats.s_marg").mutable_data()[0] += 0.25;
  CHECK_THROWS(StatsTables::from_params(params));
}

TEST_CASE("dataset file round trip") {
  auto cfg = small_config();
  cfg.num_scenes = 100;
  const auto ds = generate_dataset(cfg);
  const auto text = serialize_dataset(ds);
  const auto back = parse_dataset(text);
  CHECK(back == ds);
  CHECK(codec::fnv1a(serialize_dataset(back)) == codec::fnv1a(text));
  CHECK(dataset_fingerprint(back) == dataset_fingerprint(ds));

  const auto path = std::filesystem::temp_directory_path() / "cbias_dataset_test.jsonl";
  save_dataset(ds, path);
  CHECK(load_dataset(path) == ds);
  std::filesystem::remove(path);

  Dataset empty;
  empty.vocab = ds.vocab;
  empty.dims = ds.dims;
  CHECK(parse_dataset(serialize_dataset(empty)) == empty);
}

TEST_CASE("malformed dataset files report a line number") {
  const auto ds = generate_dataset(small_config());
  const auto text = serialize_dataset(ds);

  // Drop the last record.
  auto cut = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
  try {
    parse_dataset(cut);
    FAIL("truncated file parsed");
  } catch (const ParseError& e) {
    CHECK(e.line() == ds.scenes.size() + 1);
  }
  // Cut mid-record.
  try {
    parse_dataset(text.substr(0, text.size() / 2));
    FAIL("truncated file parsed");
  } catch (const ParseError& e) {
    CHECK(e.line() >= 2);
  }
  // Missing trailing newline only.
  CHECK_THROWS_AS(parse_dataset(text.substr(0, text.size() - 1)), ParseError);
  // Corrupted record on line 3.
  auto bad = text;
  const auto line3 = bad.find('\n', bad.find('\n') + 1) + 1;
  bad.replace(line3, 1, "#");
  try {
    parse_dataset(bad);
    FAIL("corrupted file parsed");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  // Wrong schema version.
  auto header_end = text.find('\n');
  auto header = text.substr(0, header_end);
  auto pos = header.find("\"version\":1");
  REQUIRE(pos != std::string::npos);
  header.replace(pos, 11, "\"version\":9");
  try {
    parse_dataset(header + text.substr(header_end));
    FAIL("wrong version parsed");
  } catch (const ParseError& e) {
    CHECK(e.line() == 1);
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_dataset(""), ParseError);
}
