#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hoi/core.hpp"
#include "hoi/generator.hpp"
#include "hoi/nn/layers.hpp"
#include "hoi/nn/rng.hpp"
#include "hoi/objectives.hpp"
#include "hoi/perception.hpp"

namespace hoi::data {

// ---- geometric verb rulebook ----

// Pairwise cues the rulebook reads. All relative to the human box.
struct PairFeatures {
  double iou = 0, covered = 0, dx = 0, dy = 0, ar = 0, gap_y = 0;
};

inline PairFeatures pair_features(const core::BoundingBox& h, const core::BoundingBox& o) {
  PairFeatures f;
  f.iou = core::iou(h, o);
  f.covered = core::intersection_area(h, o) / o.area();
  f.dx = (o.cx() - h.cx()) / h.width();
  f.dy = (o.cy() - h.cy()) / h.height();
  f.ar = o.area() / h.area();
  f.gap_y = (o.y1 - h.y2) / h.height();
  return f;
}

// How a verb's object is placed relative to its human when a scene is
// composed. Ranges are uniform; dx_gap builds in horizontal separation.
struct PlacementTemplate {
  double rw_lo, rw_hi;  // object width / human width
  double rh_lo, rh_hi;  // object height / human height
  double dx_lo, dx_hi;  // center offset / human width (sign flipped for mirrored)
  double dy_lo, dy_hi;  // center offset / human height
  bool beside = false;  // place fully beside: dx = sign*(0.5 + rw/2 + gap)
  bool below_gap = false;  // place below with a vertical gap instead of dy
  double gap_lo = 0, gap_hi = 0;
  bool mirror = false;  // negate dx (pull)
  bool random_side = false;  // kick: either side
};

struct TripletTemplate {
  int verb;
  int object;
  double weight;
};

struct Rulebook {
  std::vector<std::string> verbs;       // canonical phrases, id = index
  std::vector<std::string> categories;  // id 0 is always person
  std::vector<PlacementTemplate> placements;  // per verb
  std::vector<TripletTemplate> triplets;
  objectives::ExclusionSet exclusions;
  std::unordered_map<std::string, int> synonyms;  // word -> verb id

  int n_verbs() const { return static_cast<int>(verbs.size()); }
  int n_categories() const { return static_cast<int>(categories.size()); }

  // Priority-ordered geometric classifier; the single source of truth for
  // ground-truth verbs. Returns -1 when no rule fires.
  int classify(const core::BoundingBox& h, const core::BoundingBox& o) const {
    const PairFeatures f = pair_features(h, o);
    if (f.covered >= 0.7 && f.ar <= 0.25 && f.dy <= -0.12) return 2;            // hold
    if (f.covered >= 0.7 && f.ar <= 0.25 && f.dy >= 0.12) return 3;             // wear
    if (f.iou >= 0.22 && f.dy >= 0.15 && f.ar >= 0.45 && std::abs(f.dx) <= 0.35)
      return 4;                                                                 // ride
    if (f.iou >= 0.03 && f.iou <= 0.20 && f.dy >= 0.35 && std::abs(f.dx) <= 0.30)
      return 0;                                                                 // sit on
    if (f.iou <= 0.02 && f.dy >= 0.5 && f.gap_y >= -0.02 && f.gap_y <= 0.18 &&
        std::abs(f.dx) <= 0.35)
      return 1;                                                                 // stand on
    if (f.iou <= 0.08 && f.dy >= 0.25 && std::abs(f.dx) >= 0.35 && std::abs(f.dx) <= 0.90)
      return 7;                                                                 // kick
    if (f.iou <= 0.08 && std::abs(f.dy) <= 0.25 && f.dx >= 0.4 && f.dx <= 1.6)
      return 5;                                                                 // push
    if (f.iou <= 0.08 && std::abs(f.dy) <= 0.25 && f.dx <= -0.4 && f.dx >= -1.6)
      return 6;                                                                 // pull
    return -1;
  }

  // Canonical cue vector per verb: (iou, covered, dx, |dx|, dy, ar, gap_y) at
  // Verbs that can pair with an object category, from the triplet list. The
  // prediction class space is this compatibility relation, as in standard HOI
  // benchmarks where categories are the annotated verb-object combinations.
  std::vector<int> legal_verbs(int object_category) const {
    std::vector<int> out;
    for (const auto& t : triplets)
      if (t.object == object_category &&
          std::find(out.begin(), out.end(), t.verb) == out.end())
        out.push_back(t.verb);
    std::sort(out.begin(), out.end());
    return out;
  }

  // template midpoints. Used as the semantic anchor for generator embeddings.
  Eigen::VectorXd verb_anchor(int verb) const {
    static const double table[8][7] = {
        {0.11, 0.25, 0.0, 0.0, 0.63, 0.67, -0.30},   // sit on
        {0.00, 0.00, 0.0, 0.0, 0.71, 0.44, 0.06},    // stand on
        {0.07, 1.00, 0.0, 0.0, -0.24, 0.07, -0.74},  // hold
        {0.07, 1.00, 0.0, 0.0, 0.24, 0.07, -0.36},   // wear
        {0.45, 0.62, 0.0, 0.0, 0.30, 0.95, -0.62},   // ride
        {0.00, 0.00, 1.1, 1.1, 0.00, 0.65, -0.80},   // push
        {0.00, 0.00, -1.1, 1.1, 0.00, 0.65, -0.80},  // pull
        {0.02, 0.05, 0.0, 0.55, 0.36, 0.09, -0.15},  // kick
    };
    if (verb < 0 || verb >= 8) throw std::invalid_argument("verb_anchor: unknown verb");
    return Eigen::Map<const Eigen::VectorXd>(table[verb], 7);
  }

  static Rulebook standard() {
    Rulebook r;
    r.verbs = {"sit on", "stand on", "hold", "wear", "ride", "push", "pull", "kick"};
    r.categories = {"person", "chair", "horse", "ball", "hat", "cart"};
    r.placements = {
        {1.05, 1.4, 0.45, 0.65, -0.08, 0.08, 0.55, 0.70, false, false, 0, 0, false, false},
        {1.20, 1.7, 0.22, 0.38, -0.12, 0.12, 0, 0, false, true, 0.0, 0.12, false, false},
        {0.28, 0.45, 0.14, 0.24, -0.20, 0.20, -0.32, -0.15, false, false, 0, 0, false, false},
        {0.28, 0.45, 0.14, 0.24, -0.20, 0.20, 0.15, 0.32, false, false, 0, 0, false, false},
        {0.95, 1.3, 0.70, 1.00, -0.08, 0.08, 0.22, 0.38, false, false, 0, 0, false, false},
        {0.85, 1.25, 0.50, 0.80, 0, 0, -0.18, 0.18, true, false, 0.02, 0.30, false, false},
        {0.85, 1.25, 0.50, 0.80, 0, 0, -0.18, 0.18, true, false, 0.02, 0.30, true, false},
        {0.24, 0.40, 0.18, 0.30, 0.50, 0.75, 0.28, 0.45, false, false, 0, 0, false, true},
    };
    r.triplets = {
        {0, 1, 20.0}, {0, 2, 6.0},  {1, 1, 8.0},  {1, 5, 2.0},
        {2, 3, 18.0}, {2, 4, 7.0},  {2, 1, 1.8},  {3, 4, 16.0},
        {4, 2, 14.0}, {4, 5, 2.5},  {5, 5, 12.0}, {5, 1, 2.0},
        {6, 5, 7.0},  {6, 2, 1.5},  {7, 3, 15.0}, {7, 1, 2.0},
    };
    r.exclusions.pairs = {{0, 1}, {5, 6}};
    r.synonyms = {{"sitting", 0}, {"standing", 1}, {"grasp", 2},  {"carry", 2},
                  {"wearing", 3}, {"straddle", 4}, {"riding", 4}, {"shove", 5},
                  {"pushing", 5}, {"drag", 6},     {"pulling", 6}, {"boot", 7},
                  {"kicking", 7}};
    return r;
  }

  // Word list for the toy generator: verb words, inquiry words, category
  // names, synonym words, filler, and the end marker.
  std::vector<std::string> word_list() const {
    std::vector<std::string> words;
    auto push = [&](const std::string& w) {
      if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
    };
    for (const auto& p : verbs)
      for (const auto& w : generator::Tokenizer::split_words(p)) push(w);
    for (const auto& w :
         generator::Tokenizer::split_words("what is the person doing with the object"))
      push(w);
    for (const auto& c : categories) push(c);
    for (const auto& [w, v] : std::map<std::string, int>(synonyms.begin(), synonyms.end()))
      push(w);
    for (const auto& w : {"a", "an", "and", "near", "above", "below", "beside", "scene",
                          "image", "something", "nothing", "interaction", "no"})
      push(w);
    push(generator::kEosWord);
    return words;
  }
};

// ---- samples ----

struct Entity {
  core::BoundingBox box;
  int category = -1;
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

struct HOISample {
  std::string image_name;
  int id = 0;
  int width = 0, height = 0;
  std::vector<Entity> entities;
  std::vector<core::HOITriplet> gts;
  core::Raster raster;
};

// Larger entities first so small ones (held objects) stay visible on top.
inline core::Raster render_scene(const std::vector<Entity>& entities, int w, int h) {
  core::Raster img = core::Raster::filled(w, h, 0.95, 0.95, 0.97);
  std::vector<std::size_t> order(entities.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    double aa = entities[a].box.area(), ab = entities[b].box.area();
    if (aa != ab) return aa > ab;
    return a < b;
  });
  for (std::size_t i : order) {
    const auto& e = entities[i];
    img.fill_rect(e.box, e.color(0), e.color(1), e.color(2));
  }
  return img;
}

// ---- synthetic generation ----

struct SynthConfig {
  int n_images = 200;
  unsigned seed = 123;
  int image_size = 128;
  int min_entities = 2;
  int max_entities = 5;
  double two_person_prob = 0.2;
  Rulebook rulebook = Rulebook::standard();
  // Triplet classes never generated (zero-shot training sets).
  std::vector<std::pair<int, int>> avoid;
};

namespace detail {

inline Eigen::Vector3d category_color(int category, nn::Rng& rng) {
  static const double base[6][3] = {{0.20, 0.30, 0.90}, {0.60, 0.40, 0.20}, {0.50, 0.25, 0.10},
                                    {0.90, 0.10, 0.10}, {0.90, 0.80, 0.10}, {0.40, 0.40, 0.45}};
  std::uniform_real_distribution<double> j(-0.05, 0.05);
  Eigen::Vector3d c;
  for (int i = 0; i < 3; ++i)
    c(i) = std::clamp(base[category][i] + j(rng), 0.0, 1.0);
  return c;
}

inline bool in_bounds(const core::BoundingBox& b, int size) {
  return b.valid() && b.x1 >= 1 && b.y1 >= 1 && b.x2 <= size - 1 && b.y2 <= size - 1 &&
         b.width() >= 4 && b.height() >= 4;
}

inline double uni(nn::Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng);
}

}  // namespace detail

// Composes one scene: one or two persons with one interaction each, plus
// distractor objects with no interaction against any person. Every emitted
// verb is exactly what the rulebook classifier recovers from the geometry.
inline HOISample synth_image(const SynthConfig& cfg, int image_id) {
  using detail::uni;
  const auto& rb = cfg.rulebook;
  nn::Rng rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(image_id + 1)));
  const int S = cfg.image_size;

  std::vector<TripletTemplate> pool;
  for (const auto& t : rb.triplets) {
    bool avoided = false;
    for (const auto& [v, o] : cfg.avoid)
      if (t.verb == v && t.object == o) avoided = true;
    if (!avoided) pool.push_back(t);
  }
  if (pool.empty()) throw std::invalid_argument("synth_image: every triplet class is avoided");
  std::vector<double> weights;
  for (const auto& t : pool) weights.push_back(t.weight);
  std::discrete_distribution<std::size_t> pick_triplet(weights.begin(), weights.end());

  HOISample sample;
  sample.id = image_id;
  {
    std::ostringstream name;
    name << "synth_" << image_id;
    sample.image_name = name.str();
  }
  sample.width = S;
  sample.height = S;

  const int n_persons = (uni(rng, 0, 1) < cfg.two_person_prob) ? 2 : 1;
  std::vector<std::size_t> person_idx;

  for (int p = 0; p < n_persons; ++p) {
    const auto& tpl = pool[pick_triplet(rng)];
    const auto& pl = rb.placements[tpl.verb];
    bool placed = false;
    for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
      double pw = uni(rng, 18, 30), ph = uni(rng, 40, 60);
      core::BoundingBox hb{uni(rng, 8, S - 8 - pw), uni(rng, 12, 40), 0, 0};
      hb.x2 = hb.x1 + pw;
      hb.y2 = hb.y1 + ph;
      if (!detail::in_bounds(hb, S)) continue;

      double rw = uni(rng, pl.rw_lo, pl.rw_hi), rh = uni(rng, pl.rh_lo, pl.rh_hi);
      double ow = rw * pw, oh = rh * ph;
      double dx, dy;
      if (pl.beside) {
        double sign = pl.mirror ? -1.0 : 1.0;
        dx = sign * (0.5 + rw / 2 + uni(rng, pl.gap_lo, pl.gap_hi));
        dy = uni(rng, pl.dy_lo, pl.dy_hi);
      } else if (pl.below_gap) {
        double g = uni(rng, pl.gap_lo, pl.gap_hi);
        dx = uni(rng, pl.dx_lo, pl.dx_hi);
        dy = 0.5 + g + rh / 2;
      } else {
        dx = uni(rng, pl.dx_lo, pl.dx_hi);
        if (pl.random_side && uni(rng, 0, 1) < 0.5) dx = -dx;
        dy = uni(rng, pl.dy_lo, pl.dy_hi);
      }
      double ocx = hb.cx() + dx * pw, ocy = hb.cy() + dy * ph;
      core::BoundingBox ob{ocx - ow / 2, ocy - oh / 2, ocx + ow / 2, ocy + oh / 2};
      if (!detail::in_bounds(ob, S)) continue;
      if (rb.classify(hb, ob) != tpl.verb) continue;

      // No accidental interactions across persons.
      bool clean = true;
      for (std::size_t pi : person_idx) {
        if (rb.classify(sample.entities[pi].box, ob) != -1) clean = false;
        if (core::iou(sample.entities[pi].box, hb) > 0.15) clean = false;
      }
      for (const auto& e : sample.entities)
        if (e.category != 0 && rb.classify(hb, e.box) != -1) clean = false;
      if (!clean) continue;

      Entity person{hb, 0, detail::category_color(0, rng)};
      Entity object{ob, tpl.object, detail::category_color(tpl.object, rng)};
      person_idx.push_back(sample.entities.size());
      sample.entities.push_back(person);
      sample.entities.push_back(object);
      core::HOITriplet gt;
      gt.human_box = hb;
      gt.object_box = ob;
      gt.object_category = tpl.object;
      gt.verb = tpl.verb;
      gt.score = 1.0;
      sample.gts.push_back(gt);
      placed = true;
    }
    if (!placed)
      throw std::runtime_error("synth_image: placement rejection exhausted (rulebook gap)");
  }

  std::uniform_int_distribution<int> n_extra(cfg.min_entities, cfg.max_entities);
  int want = n_extra(rng);
  int n_distract = std::max(0, want - static_cast<int>(sample.entities.size()));
  std::uniform_int_distribution<int> pick_cat(1, rb.n_categories() - 1);
  for (int dcount = 0; dcount < n_distract; ++dcount) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      double w = uni(rng, 6, 20), h = uni(rng, 6, 20);
      core::BoundingBox b{uni(rng, 2, S - 2 - w), uni(rng, 2, S - 2 - h), 0, 0};
      b.x2 = b.x1 + w;
      b.y2 = b.y1 + h;
      if (!detail::in_bounds(b, S)) continue;
      bool clean = true;
      for (std::size_t pi : person_idx)
        if (rb.classify(sample.entities[pi].box, b) != -1) clean = false;
      for (const auto& e : sample.entities)
        if (core::iou(e.box, b) > 0.05) clean = false;
      if (!clean) continue;
      const int cat = pick_cat(rng);
      sample.entities.push_back(Entity{b, cat, detail::category_color(cat, rng)});
      break;
    }
  }

  sample.raster = render_scene(sample.entities, S, S);
  return sample;
}

inline std::vector<HOISample> synth_generate(const SynthConfig& cfg) {
  std::vector<HOISample> out;
  out.reserve(cfg.n_images);
  for (int i = 0; i < cfg.n_images; ++i) out.push_back(synth_image(cfg, i));
  return out;
}

// ---- annotation files ----

inline nlohmann::json box_json(const core::BoundingBox& b) {
  return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2});
}

inline core::BoundingBox box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [x1,y1,x2,y2]");
  return core::BoundingBox{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
                           j[3].get<double>()};
}

inline void save_samples(const std::vector<HOISample>& samples, const std::string& path,
                         const Rulebook& rb) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_samples: cannot open " + path);
  for (const auto& s : samples) {
    nlohmann::json j;
    j["image"] = s.image_name;
    j["id"] = s.id;
    j["width"] = s.width;
    j["height"] = s.height;
    nlohmann::json ents = nlohmann::json::array();
    for (const auto& e : s.entities) {
      nlohmann::json je;
      je["box"] = box_json(e.box);
      je["category"] = rb.categories.at(e.category);
      je["color"] = {e.color(0), e.color(1), e.color(2)};
      ents.push_back(je);
    }
    j["entities"] = ents;
    nlohmann::json ints = nlohmann::json::array();
    for (const auto& g : s.gts) {
      nlohmann::json ji;
      ji["human_box"] = box_json(g.human_box);
      ji["object_box"] = box_json(g.object_box);
      ji["object_category"] = rb.categories.at(g.object_category);
      ji["verb"] = rb.verbs.at(g.verb);
      ints.push_back(ji);
    }
    j["interactions"] = ints;
    out << j.dump() << "\n";
  }
}

inline std::vector<HOISample> load_samples(const std::string& path, const Rulebook& rb) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_samples: cannot open " + path);
  std::unordered_map<std::string, int> verb_id, cat_id;
  for (int i = 0; i < rb.n_verbs(); ++i) verb_id[rb.verbs[i]] = i;
  for (int i = 0; i < rb.n_categories(); ++i) cat_id[rb.categories[i]] = i;

  std::vector<HOISample> out;
  std::string line;
  long record = 0;
  while (std::getline(in, line)) {
    ++record;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      HOISample s;
      s.image_name = j.at("image").get<std::string>();
      s.id = j.at("id").get<int>();
      s.width = j.at("width").get<int>();
      s.height = j.at("height").get<int>();
      if (j.contains("entities"))
        for (const auto& je : j.at("entities")) {
          Entity e;
          e.box = box_from_json(je.at("box"));
          auto it = cat_id.find(je.at("category").get<std::string>());
          if (it == cat_id.end())
            throw std::invalid_argument("unknown category " + je.at("category").get<std::string>());
          e.category = it->second;
          if (je.contains("color")) {
            const auto& c = je.at("color");
            e.color = Eigen::Vector3d(c[0].get<double>(), c[1].get<double>(), c[2].get<double>());
          }
          s.entities.push_back(e);
        }
      for (const auto& ji : j.at("interactions")) {
        core::HOITriplet g;
        g.human_box = box_from_json(ji.at("human_box"));
        g.object_box = box_from_json(ji.at("object_box"));
        auto co = cat_id.find(ji.at("object_category").get<std::string>());
        if (co == cat_id.end())
          throw std::invalid_argument("unknown category " +
                                      ji.at("object_category").get<std::string>());
        g.object_category = co->second;
        auto vo = verb_id.find(ji.at("verb").get<std::string>());
        if (vo == verb_id.end())
          throw std::invalid_argument("unknown verb " + ji.at("verb").get<std::string>());
        g.verb = vo->second;
        g.score = 1.0;
        s.gts.push_back(g);
      }
      if (!s.entities.empty()) s.raster = render_scene(s.entities, s.width, s.height);
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error("load_samples: record " + std::to_string(record) + ": " + e.what());
    }
  }
  return out;
}

// Plain-text vocabulary loaders: one canonical phrase per line; synonyms and
// exclusions are tab-separated referencing canonical phrases.
inline std::vector<std::string> load_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_lines: cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

inline std::unordered_map<std::string, int> load_synonyms(const std::string& path,
                                                          const std::vector<std::string>& verbs) {
  std::unordered_map<std::string, int> verb_id;
  for (std::size_t i = 0; i < verbs.size(); ++i) verb_id[verbs[i]] = static_cast<int>(i);
  std::unordered_map<std::string, int> out;
  for (const auto& line : load_lines(path)) {
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("load_synonyms: expected 'phrase<TAB>verb': " + line);
    std::string phrase = line.substr(0, tab), verb = line.substr(tab + 1);
    auto it = verb_id.find(verb);
    if (it == verb_id.end()) throw std::runtime_error("load_synonyms: unknown verb " + verb);
    out[phrase] = it->second;
  }
  return out;
}

inline objectives::ExclusionSet load_exclusions(const std::string& path,
                                                const std::vector<std::string>& verbs) {
  std::unordered_map<std::string, int> verb_id;
  for (std::size_t i = 0; i < verbs.size(); ++i) verb_id[verbs[i]] = static_cast<int>(i);
  objectives::ExclusionSet m;
  for (const auto& line : load_lines(path)) {
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("load_exclusions: expected 'verbA<TAB>verbB': " + line);
    auto a = verb_id.find(line.substr(0, tab));
    auto b = verb_id.find(line.substr(tab + 1));
    if (a == verb_id.end() || b == verb_id.end())
      throw std::runtime_error("load_exclusions: unknown verb in: " + line);
    m.pairs.emplace_back(a->second, b->second);
  }
  m.validate(static_cast<int>(verbs.size()));
  return m;
}

// ---- stand-in encoders ----

// Frozen projections that play the role of the pretrained detector and
// backbone: a per-cell backbone map for RoI pooling and an instance-token
// encoder over detection attributes. Checksummable like the generator.
struct FeatureBank {
  long d_z, d_a, c_bb, grid;
  nn::ParamStore store;
  nn::Var W_bb, b_bb, W_inst, b_inst;

  FeatureBank(unsigned seed, long dz, long da, long grid_ = 8)
      : d_z(dz), d_a(da), c_bb(da / 4), grid(grid_) {
    if (da % 4 != 0) throw std::invalid_argument("FeatureBank: d_a must be divisible by 4");
    nn::Rng rng(seed);
    W_bb = store.create("bank.W_bb", nn::randn(rng, 5, c_bb, 0.8), false);
    b_bb = store.create("bank.b_bb", nn::randn(rng, 1, c_bb, 0.1), false);
    const long inst_in = 5 + 6;  // normalized box, confidence, category one-hot
    W_inst = store.create("bank.W_inst", nn::randn(rng, inst_in, d_z, 0.8), false);
    b_inst = store.create("bank.b_inst", nn::randn(rng, 1, d_z, 0.1), false);
  }

  std::vector<Eigen::MatrixXd> backbone_map(const core::Raster& img) const {
    Eigen::MatrixXd cells = core::patch_summaries(img, static_cast<int>(grid));
    Eigen::MatrixXd z = cells * W_bb.val();
    z.rowwise() += b_bb.val().row(0);
    z = z.array().tanh().matrix();
    std::vector<Eigen::MatrixXd> fmap(c_bb, Eigen::MatrixXd(grid, grid));
    for (long c = 0; c < c_bb; ++c)
      for (long gy = 0; gy < grid; ++gy)
        for (long gx = 0; gx < grid; ++gx) fmap[c](gy, gx) = z(gy * grid + gx, c);
    return fmap;
  }

  Eigen::VectorXd instance_token(const core::BoundingBox& box, int category, double confidence,
                                 int image_w, int image_h) const {
    if (category < 0 || category >= 6)
      throw std::invalid_argument("instance_token: category out of range");
    Eigen::VectorXd in = Eigen::VectorXd::Zero(11);
    in << box.cx() / image_w, box.cy() / image_h, box.width() / image_w, box.height() / image_h,
        confidence, 0, 0, 0, 0, 0, 0;
    in(5 + category) = 1.0;
    return ((in.transpose() * W_inst.val()).row(0) + b_inst.val().row(0))
        .array()
        .tanh()
        .matrix()
        .transpose();
  }

  Eigen::VectorXd appearance_token(const std::vector<Eigen::MatrixXd>& fmap,
                                   const core::BoundingBox& image_box, double stride) const {
    core::BoundingBox scaled{image_box.x1 / stride, image_box.y1 / stride, image_box.x2 / stride,
                             image_box.y2 / stride};
    return perception::roi_pool(fmap, scaled, 2, 2);
  }

  std::uint64_t checksum() const { return store.checksum_all(); }
};

// Detector stand-in over one sample: jittered GT boxes with IoU confidences
// and both stand-in tokens attached. Deterministic per (seed, image id).
inline std::vector<core::EntityDetection> detect_entities(const HOISample& sample,
                                                          const FeatureBank& bank,
                                                          unsigned seed) {
  nn::Rng rng(static_cast<std::uint64_t>(seed) ^
              (0xd1342543de82ef95ull * static_cast<std::uint64_t>(sample.id + 1)));
  auto fmap = bank.backbone_map(sample.raster);
  const double stride = static_cast<double>(sample.width) / static_cast<double>(bank.grid);
  std::vector<core::EntityDetection> dets;
  for (const auto& e : sample.entities) {
    core::EntityDetection d;
    d.box = perception::jitter_box(e.box, sample.width, sample.height, rng);
    d.category = e.category;
    d.confidence = core::iou(d.box, e.box);
    d.instance_token = bank.instance_token(d.box, d.category, d.confidence, sample.width,
                                           sample.height);
    d.appearance_token = bank.appearance_token(fmap, d.box, stride);
    dets.push_back(std::move(d));
  }
  return dets;
}

// ---- splits ----

enum class SplitMode { kDefault, kRfUc, kNfUc, kUo, kUv };

struct SplitSpec {
  SplitMode mode = SplitMode::kDefault;
  int n_holdout = 4;                              // UC modes
  std::vector<int> held_verbs;                    // UV
  std::vector<int> held_objects;                  // UO
  std::vector<std::pair<int, int>> held_triplets;  // explicit (default/UC override)
};

struct Splits {
  std::vector<HOISample> train;
  std::vector<std::pair<int, int>> held_out;  // triplet classes
  std::map<std::pair<int, int>, int> train_counts;  // pre-filter counts
};

inline std::map<std::pair<int, int>, int> triplet_counts(const std::vector<HOISample>& samples) {
  std::map<std::pair<int, int>, int> counts;
  for (const auto& s : samples)
    for (const auto& g : s.gts) ++counts[{g.verb, g.object_category}];
  return counts;
}

inline std::vector<std::pair<int, int>> rare_classes(
    const std::map<std::pair<int, int>, int>& counts, int threshold = 10) {
  std::vector<std::pair<int, int>> out;
  for (const auto& [cls, n] : counts)
    if (n < threshold) out.push_back(cls);
  return out;
}

// Builds the training set for a zero-shot or default regime. Whole images
// containing a held-out triplet are dropped, so held-out interactions never
// appear in training, not even as salience negatives.
inline Splits build_splits(const std::vector<HOISample>& samples, const SplitSpec& spec,
                           const Rulebook& rb) {
  Splits out;
  out.train_counts = triplet_counts(samples);

  std::vector<std::pair<int, int>> held = spec.held_triplets;
  auto by_count = [&](bool rarest_first) {
    std::vector<std::pair<std::pair<int, int>, int>> items(out.train_counts.begin(),
                                                           out.train_counts.end());
    std::sort(items.begin(), items.end(), [&](const auto& a, const auto& b) {
      if (a.second != b.second) return rarest_first ? a.second < b.second : a.second > b.second;
      return a.first < b.first;
    });
    std::vector<std::pair<int, int>> picked;
    for (int i = 0; i < spec.n_holdout && i < static_cast<int>(items.size()); ++i)
      picked.push_back(items[i].first);
    return picked;
  };

  switch (spec.mode) {
    case SplitMode::kDefault:
      break;
    case SplitMode::kRfUc:
      held = by_count(true);
      break;
    case SplitMode::kNfUc:
      held = by_count(false);
      break;
    case SplitMode::kUo: {
      if (spec.held_objects.empty())
        throw std::invalid_argument("build_splits: UO requires held objects");
      std::vector<bool> is_held(rb.n_categories(), false);
      int held_n = 0;
      for (int o : spec.held_objects) {
        if (o <= 0 || o >= rb.n_categories())
          throw std::invalid_argument("build_splits: bad held object id");
        if (!is_held[o]) ++held_n;
        is_held[o] = true;
      }
      if (held_n >= rb.n_categories() - 1)
        throw std::invalid_argument("build_splits: cannot hold out every object");
      for (const auto& [cls, n] : out.train_counts)
        if (is_held[cls.second]) held.push_back(cls);
      break;
    }
    case SplitMode::kUv: {
      if (spec.held_verbs.empty()) throw std::invalid_argument("build_splits: UV requires verbs");
      std::vector<bool> is_held(rb.n_verbs(), false);
      int held_n = 0;
      for (int v : spec.held_verbs) {
        if (v < 0 || v >= rb.n_verbs())
          throw std::invalid_argument("build_splits: bad held verb id");
        if (!is_held[v]) ++held_n;
        is_held[v] = true;
      }
      if (held_n >= rb.n_verbs())
        throw std::invalid_argument("build_splits: cannot hold out every verb");
      for (const auto& [cls, n] : out.train_counts)
        if (is_held[cls.first]) held.push_back(cls);
      break;
    }
  }

  std::sort(held.begin(), held.end());
  held.erase(std::unique(held.begin(), held.end()), held.end());
  out.held_out = held;

  auto is_held_class = [&](int verb, int object) {
    return std::binary_search(held.begin(), held.end(), std::make_pair(verb, object));
  };
  for (const auto& s : samples) {
    bool drop = false;
    for (const auto& g : s.gts)
      if (is_held_class(g.verb, g.object_category)) drop = true;
    if (!drop) out.train.push_back(s);
  }
  return out;
}

}  // namespace hoi::data
