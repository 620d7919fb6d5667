#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>

#include "hoi/data.hpp"

using namespace hoi;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content)
      : path("/tmp/hoi_test_" + name) {
    std::ofstream out(path);
    out << content;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

data::HOISample bare_sample(int id, std::vector<std::pair<int, int>> classes) {
  data::HOISample s;
  s.id = id;
  s.image_name = "img_" + std::to_string(id);
  s.width = 128;
  s.height = 128;
  for (auto [v, o] : classes) {
    core::HOITriplet g;
    g.human_box = {10, 10, 40, 80};
    g.object_box = {50, 50, 70, 70};
    g.object_category = o;
    g.verb = v;
    s.gts.push_back(g);
  }
  return s;
}

}  // namespace

TEST_CASE("rulebook classifies canonical configurations") {
  auto rb = data::Rulebook::standard();
  core::BoundingBox h{50, 30, 74, 80};  // 24 x 50 person

  REQUIRE(rb.classify(h, {58, 39, 66, 47}) == 2);        // small object held above center
  REQUIRE(rb.classify(h, {58, 63, 66, 71}) == 3);        // same size worn below center
  REQUIRE(rb.classify(h, {48, 49, 76, 91}) == 4);        // large overlapping mount
  REQUIRE(rb.classify(h, {47.5, 72.5, 76.5, 99.5}) == 0);  // seat with slight overlap
  REQUIRE(rb.classify(h, {45, 82, 79, 97}) == 1);        // platform just below the feet
  REQUIRE(rb.classify(h, {70.7, 67.5, 79.7, 78.5}) == 7);  // low diagonal contact
  REQUIRE(rb.classify(h, {75.2, 37.5, 99.2, 72.5}) == 5);  // beside, to the right
  REQUIRE(rb.classify(h, {24.8, 37.5, 48.8, 72.5}) == 6);  // beside, to the left
  REQUIRE(rb.classify(h, {100, 100, 110, 110}) == -1);   // far away
}

TEST_CASE("rulebook tables are consistent") {
  auto rb = data::Rulebook::standard();
  REQUIRE(rb.n_verbs() == 8);
  REQUIRE(rb.categories[0] == "person");
  REQUIRE(rb.placements.size() == 8);
  REQUIRE(rb.triplets.size() == 16);
  REQUIRE_NOTHROW(rb.exclusions.validate(rb.n_verbs()));
  for (const auto& t : rb.triplets) {
    REQUIRE(t.verb >= 0);
    REQUIRE(t.verb < rb.n_verbs());
    REQUIRE(t.object >= 1);
    REQUIRE(t.object < rb.n_categories());
    REQUIRE(t.weight > 0);
  }
  for (int v = 0; v < 8; ++v) REQUIRE(rb.verb_anchor(v).size() == 7);
  REQUIRE((rb.verb_anchor(5) + rb.verb_anchor(6)).segment(2, 1).norm() == 0.0);
  REQUIRE_THROWS_AS(rb.verb_anchor(8), std::invalid_argument);

  auto words = rb.word_list();
  std::set<std::string> uniq(words.begin(), words.end());
  REQUIRE(uniq.size() == words.size());
  REQUIRE(uniq.count(generator::kEosWord) == 1);
  for (const auto& p : rb.verbs)
    for (const auto& w : generator::Tokenizer::split_words(p)) REQUIRE(uniq.count(w) == 1);
  for (const auto& [w, v] : rb.synonyms) {
    REQUIRE(uniq.count(w) == 1);
    REQUIRE(v >= 0);
    REQUIRE(v < rb.n_verbs());
  }
}

TEST_CASE("synthetic scenes are labeled by their own geometry") {
  data::SynthConfig cfg;
  cfg.n_images = 40;
  cfg.seed = 99;
  auto samples = data::synth_generate(cfg);
  REQUIRE(samples.size() == 40);

  int total_gts = 0;
  for (const auto& s : samples) {
    REQUIRE(s.raster.width == cfg.image_size);
    REQUIRE(s.raster.height == cfg.image_size);
    REQUIRE_FALSE(s.gts.empty());
    for (const auto& e : s.entities) {
      REQUIRE(e.box.valid());
      REQUIRE(e.box.x2 <= cfg.image_size);
      REQUIRE(e.box.y2 <= cfg.image_size);
    }
    for (const auto& g : s.gts) {
      ++total_gts;
      REQUIRE(cfg.rulebook.classify(g.human_box, g.object_box) == g.verb);
      REQUIRE(g.object_category >= 1);
    }
  }
  REQUIRE(total_gts >= 40);

  // Bit-reproducible for a fixed seed.
  auto again = data::synth_generate(cfg);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    REQUIRE(samples[i].gts.size() == again[i].gts.size());
    for (std::size_t g = 0; g < samples[i].gts.size(); ++g) {
      REQUIRE(samples[i].gts[g].human_box.x1 == again[i].gts[g].human_box.x1);
      REQUIRE(samples[i].gts[g].object_box.y2 == again[i].gts[g].object_box.y2);
      REQUIRE(samples[i].gts[g].verb == again[i].gts[g].verb);
    }
  }
}

TEST_CASE("appearance changes never change the labels") {
  data::SynthConfig cfg;
  cfg.n_images = 10;
  cfg.seed = 7;
  auto samples = data::synth_generate(cfg);
  for (auto& s : samples) {
    for (auto& e : s.entities) e.color = Eigen::Vector3d(0.5, 0.5, 0.5);  // repaint everything
    s.raster = data::render_scene(s.entities, s.width, s.height);
    for (const auto& g : s.gts)
      REQUIRE(cfg.rulebook.classify(g.human_box, g.object_box) == g.verb);
  }
}

TEST_CASE("held-out combinations are never generated") {
  data::SynthConfig cfg;
  cfg.n_images = 60;
  cfg.seed = 31;
  cfg.avoid = {{0, 1}, {4, 2}};
  auto samples = data::synth_generate(cfg);
  for (const auto& s : samples)
    for (const auto& g : s.gts) {
      REQUIRE_FALSE((g.verb == 0 && g.object_category == 1));
      REQUIRE_FALSE((g.verb == 4 && g.object_category == 2));
    }

  data::SynthConfig all;
  for (const auto& t : all.rulebook.triplets) all.avoid.emplace_back(t.verb, t.object);
  REQUIRE_THROWS_AS(data::synth_image(all, 0), std::invalid_argument);
}

TEST_CASE("two person scenes carry two interactions") {
  data::SynthConfig cfg;
  cfg.n_images = 6;
  cfg.seed = 17;
  cfg.two_person_prob = 1.0;
  auto samples = data::synth_generate(cfg);
  for (const auto& s : samples) {
    int persons = 0;
    for (const auto& e : s.entities)
      if (e.category == 0) ++persons;
    REQUIRE(persons == 2);
    REQUIRE(s.gts.size() == 2);
    // Cross-person pairs stay interaction free.
    std::vector<core::BoundingBox> hb, ob;
    for (const auto& g : s.gts) {
      hb.push_back(g.human_box);
      ob.push_back(g.object_box);
    }
    REQUIRE(cfg.rulebook.classify(hb[0], ob[1]) == -1);
    REQUIRE(cfg.rulebook.classify(hb[1], ob[0]) == -1);
  }
}

TEST_CASE("class frequencies are skewed with both rare and common classes") {
  data::SynthConfig cfg;
  cfg.n_images = 200;
  cfg.seed = 123;
  auto samples = data::synth_generate(cfg);
  auto counts = data::triplet_counts(samples);
  REQUIRE(counts.size() >= 12);
  auto rare = data::rare_classes(counts, 10);
  REQUIRE_FALSE(rare.empty());
  REQUIRE(rare.size() < counts.size());
  int max_count = 0;
  for (const auto& [cls, n] : counts) max_count = std::max(max_count, n);
  REQUIRE(max_count >= 20);
}

TEST_CASE("annotation round trip preserves coordinates exactly") {
  data::SynthConfig cfg;
  cfg.n_images = 5;
  cfg.seed = 55;
  auto samples = data::synth_generate(cfg);
  const std::string path = "/tmp/hoi_test_roundtrip.jsonl";
  data::save_samples(samples, path, cfg.rulebook);
  auto loaded = data::load_samples(path, cfg.rulebook);
  std::remove(path.c_str());

  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& a = samples[i];
    const auto& b = loaded[i];
    REQUIRE(a.image_name == b.image_name);
    REQUIRE(a.entities.size() == b.entities.size());
    for (std::size_t e = 0; e < a.entities.size(); ++e) {
      REQUIRE(a.entities[e].box.x1 == b.entities[e].box.x1);
      REQUIRE(a.entities[e].box.y1 == b.entities[e].box.y1);
      REQUIRE(a.entities[e].box.x2 == b.entities[e].box.x2);
      REQUIRE(a.entities[e].box.y2 == b.entities[e].box.y2);
      REQUIRE(a.entities[e].category == b.entities[e].category);
      REQUIRE((a.entities[e].color - b.entities[e].color).norm() == 0.0);
    }
    REQUIRE(a.gts.size() == b.gts.size());
    for (std::size_t g = 0; g < a.gts.size(); ++g) {
      REQUIRE(a.gts[g].human_box.x2 == b.gts[g].human_box.x2);
      REQUIRE(a.gts[g].object_box.x1 == b.gts[g].object_box.x1);
      REQUIRE(a.gts[g].verb == b.gts[g].verb);
      REQUIRE(a.gts[g].object_category == b.gts[g].object_category);
    }
    // The raster is re-rendered from entities, identically.
    for (int c = 0; c < 3; ++c)
      REQUIRE((a.raster.channel[c] - b.raster.channel[c]).norm() == 0.0);
  }
}

TEST_CASE("annotation loader rejects unknown names") {
  auto rb = data::Rulebook::standard();
  TempFile f("badverb.jsonl",
             R"({"image":"x","id":0,"width":128,"height":128,"interactions":[{"human_box":[1,1,5,9],"object_box":[6,6,9,9],"object_category":"chair","verb":"levitate"}]})"
             "\n");
  REQUIRE_THROWS_WITH(data::load_samples(f.path, rb),
                      Catch::Matchers::ContainsSubstring("record 1") &&
                          Catch::Matchers::ContainsSubstring("levitate"));

  TempFile g("badcat.jsonl",
             R"({"image":"x","id":0,"width":128,"height":128,"interactions":[{"human_box":[1,1,5,9],"object_box":[6,6,9,9],"object_category":"dragon","verb":"hold"}]})"
             "\n");
  REQUIRE_THROWS_AS(data::load_samples(g.path, rb), std::runtime_error);
  REQUIRE_THROWS_AS(data::load_samples("/tmp/definitely_missing_file.jsonl", rb),
                    std::runtime_error);
}

TEST_CASE("vocabulary file loaders") {
  TempFile verbs("verbs.txt", "sit on\nstand on\nhold\n");
  auto lines = data::load_lines(verbs.path);
  REQUIRE(lines == std::vector<std::string>{"sit on", "stand on", "hold"});

  TempFile syn("syn.tsv", "grasp\thold\ncarry\thold\n");
  auto table = data::load_synonyms(syn.path, lines);
  REQUIRE(table.at("grasp") == 2);
  REQUIRE(table.at("carry") == 2);

  TempFile badsyn("badsyn.tsv", "grasp hold\n");
  REQUIRE_THROWS_AS(data::load_synonyms(badsyn.path, lines), std::runtime_error);
  TempFile unksyn("unksyn.tsv", "grasp\tlevitate\n");
  REQUIRE_THROWS_AS(data::load_synonyms(unksyn.path, lines), std::runtime_error);

  TempFile exc("exc.tsv", "sit on\tstand on\n");
  auto m = data::load_exclusions(exc.path, lines);
  REQUIRE(m.pairs == std::vector<std::pair<int, int>>{{0, 1}});
  TempFile badexc("badexc.tsv", "sit on\tsit on\n");
  REQUIRE_THROWS_AS(data::load_exclusions(badexc.path, lines), std::invalid_argument);
}

TEST_CASE("feature bank determinism and shapes") {
  data::FeatureBank bank(42, 12, 32);
  data::FeatureBank same(42, 12, 32);
  data::FeatureBank other(43, 12, 32);
  REQUIRE(bank.checksum() == same.checksum());
  REQUIRE(bank.checksum() != other.checksum());
  REQUIRE_THROWS_AS(data::FeatureBank(1, 12, 30), std::invalid_argument);

  data::SynthConfig cfg;
  cfg.n_images = 2;
  auto samples = data::synth_generate(cfg);
  auto fmap = bank.backbone_map(samples[0].raster);
  REQUIRE(fmap.size() == 8);
  REQUIRE(fmap[0].rows() == 8);
  REQUIRE(fmap[0].cols() == 8);

  auto inst = bank.instance_token({10, 10, 40, 80}, 1, 0.9, 128, 128);
  REQUIRE(inst.size() == 12);
  REQUIRE(inst.cwiseAbs().maxCoeff() <= 1.0);
  REQUIRE_THROWS_AS(bank.instance_token({10, 10, 40, 80}, 9, 0.9, 128, 128),
                    std::invalid_argument);

  auto app = bank.appearance_token(fmap, {10, 10, 40, 80}, 16.0);
  REQUIRE(app.size() == 32);
  REQUIRE(app.allFinite());
}

TEST_CASE("detector stand-in produces usable detections") {
  data::SynthConfig cfg;
  cfg.n_images = 4;
  cfg.seed = 11;
  auto samples = data::synth_generate(cfg);
  data::FeatureBank bank(42, 12, 32);

  for (const auto& s : samples) {
    auto dets = data::detect_entities(s, bank, 5);
    REQUIRE(dets.size() == s.entities.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
      REQUIRE(dets[i].category == s.entities[i].category);
      REQUIRE(dets[i].box.valid());
      REQUIRE(dets[i].confidence > 0.6);
      REQUIRE(dets[i].confidence <= 1.0);
      REQUIRE(dets[i].instance_token.size() == 12);
      REQUIRE(dets[i].appearance_token.size() == 32);
    }
    auto again = data::detect_entities(s, bank, 5);
    REQUIRE(again[0].box.x1 == dets[0].box.x1);
    auto shifted = data::detect_entities(s, bank, 6);
    bool any_diff = false;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (shifted[i].box.x1 != dets[i].box.x1) any_diff = true;
    REQUIRE(any_diff);
  }
}

TEST_CASE("split building by mode") {
  auto rb = data::Rulebook::standard();
  std::vector<data::HOISample> samples{
      bare_sample(0, {{0, 1}}), bare_sample(1, {{4, 2}}), bare_sample(2, {{0, 1}, {4, 2}}),
      bare_sample(3, {{5, 5}}), bare_sample(4, {{0, 1}})};

  data::SplitSpec uv;
  uv.mode = data::SplitMode::kUv;
  uv.held_verbs = {4};
  auto s_uv = data::build_splits(samples, uv, rb);
  REQUIRE(s_uv.held_out == std::vector<std::pair<int, int>>{{4, 2}});
  REQUIRE(s_uv.train.size() == 3);
  for (const auto& s : s_uv.train)
    for (const auto& g : s.gts) REQUIRE(g.verb != 4);

  data::SplitSpec uo;
  uo.mode = data::SplitMode::kUo;
  uo.held_objects = {5};
  auto s_uo = data::build_splits(samples, uo, rb);
  REQUIRE(s_uo.held_out == std::vector<std::pair<int, int>>{{5, 5}});
  REQUIRE(s_uo.train.size() == 4);

  data::SplitSpec rf;
  rf.mode = data::SplitMode::kRfUc;
  rf.n_holdout = 1;
  auto s_rf = data::build_splits(samples, rf, rb);
  REQUIRE(s_rf.held_out == std::vector<std::pair<int, int>>{{5, 5}});  // the rarest class

  rf.n_holdout = 2;
  auto s_rf2 = data::build_splits(samples, rf, rb);
  REQUIRE(s_rf2.held_out == std::vector<std::pair<int, int>>{{4, 2}, {5, 5}});

  data::SplitSpec nf;
  nf.mode = data::SplitMode::kNfUc;
  nf.n_holdout = 1;
  auto s_nf = data::build_splits(samples, nf, rb);
  REQUIRE(s_nf.held_out == std::vector<std::pair<int, int>>{{0, 1}});
  REQUIRE(s_nf.train.size() == 2);

  data::SplitSpec def;
  auto s_def = data::build_splits(samples, def, rb);
  REQUIRE(s_def.held_out.empty());
  REQUIRE(s_def.train.size() == samples.size());
  def.held_triplets = {{0, 1}};
  auto s_exp = data::build_splits(samples, def, rb);
  REQUIRE(s_exp.train.size() == 2);

  // Counts are taken before filtering.
  REQUIRE(s_uv.train_counts.at({4, 2}) == 2);
}

TEST_CASE("split validation rejects degenerate holdouts") {
  auto rb = data::Rulebook::standard();
  std::vector<data::HOISample> samples{bare_sample(0, {{0, 1}})};

  data::SplitSpec all_verbs;
  all_verbs.mode = data::SplitMode::kUv;
  for (int v = 0; v < rb.n_verbs(); ++v) all_verbs.held_verbs.push_back(v);
  REQUIRE_THROWS_AS(data::build_splits(samples, all_verbs, rb), std::invalid_argument);

  data::SplitSpec no_verbs;
  no_verbs.mode = data::SplitMode::kUv;
  REQUIRE_THROWS_AS(data::build_splits(samples, no_verbs, rb), std::invalid_argument);

  data::SplitSpec all_objects;
  all_objects.mode = data::SplitMode::kUo;
  for (int o = 1; o < rb.n_categories(); ++o) all_objects.held_objects.push_back(o);
  REQUIRE_THROWS_AS(data::build_splits(samples, all_objects, rb), std::invalid_argument);

  data::SplitSpec person_object;
  person_object.mode = data::SplitMode::kUo;
  person_object.held_objects = {0};
  REQUIRE_THROWS_AS(data::build_splits(samples, person_object, rb), std::invalid_argument);
}
