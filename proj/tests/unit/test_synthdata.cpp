#include <doctest.h>

#include <rapidjson/document.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "tridet/synthdata.hpp"

using namespace tridet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("tridet_data_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<ClassDef> pick(std::initializer_list<int> ids) {
  std::vector<ClassDef> out;
  for (const auto& c : default_classes())
    if (std::find(ids.begin(), ids.end(), c.class_id) != ids.end()) out.push_back(c);
  return out;
}

bool same(const std::vector<Scene>& a, const std::vector<Scene>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].image == b[i].image) || a[i].objects != b[i].objects) return false;
  return true;
}

}  // namespace

TEST_CASE("default classes are distinct") {
  auto classes = default_classes();
  CHECK(classes.size() == 6);
  CHECK_NOTHROW(validate_classes(classes));
  auto dup = classes;
  dup[1].class_id = dup[0].class_id;
  CHECK_THROWS(validate_classes(dup));
  auto twin = classes;
  twin[1].shape = twin[0].shape;
  twin[1].color = twin[0].color;
  CHECK_THROWS(validate_classes(twin));
  CHECK(parse_shape(shape_name(ShapeKind::Ring)) == ShapeKind::Ring);
  CHECK_THROWS(parse_shape("hexagon"));
}

TEST_CASE("generation is a pure function of its inputs") {
  auto classes = default_classes();
  auto a = generate_dataset(classes, 20, 5);
  auto b = generate_dataset(classes, 20, 5);
  CHECK(same(a, b));
  CHECK_FALSE(same(a, generate_dataset(classes, 20, 6)));
  // scene i does not depend on how many scenes were requested
  auto c = generate_dataset(classes, 7, 5);
  CHECK(same(c, std::vector<Scene>(a.begin(), a.begin() + 7)));
}

TEST_CASE("scene contents obey the limits") {
  auto classes = default_classes();
  auto scenes = generate_dataset(classes, 300, 9);
  for (const auto& s : scenes) {
    CHECK(s.image.shape() == Shape{3, 64, 64});
    const auto [lo, hi] = std::minmax_element(s.image.data().begin(), s.image.data().end());
    CHECK(*lo >= 0.0);
    CHECK(*hi <= 1.0);
    CHECK(s.objects.size() >= 1);
    CHECK(s.objects.size() <= 4);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      const auto& b = s.objects[i].bbox;
      CHECK(b.x1 >= 0.0);
      CHECK(b.y1 >= 0.0);
      CHECK(b.x2 <= 64.0);
      CHECK(b.y2 <= 64.0);
      CHECK(b.width() >= 10.0);
      CHECK(b.width() <= 28.0);
      for (std::size_t j = i + 1; j < s.objects.size(); ++j)
        CHECK(iou(b, s.objects[j].bbox) <= 0.2);
    }
  }
}

TEST_CASE("class frequency is uniform") {
  auto classes = default_classes();
  auto scenes = generate_dataset(classes, 1000, 17);
  std::map<int, double> count;
  double total = 0.0;
  for (const auto& s : scenes)
    for (const auto& o : s.objects) count[o.class_id] += 1.0, total += 1.0;
  REQUIRE(count.size() == 6);
  for (const auto& [id, n] : count) {
    CAPTURE(id);
    CHECK(std::fabs(n / total - 1.0 / 6.0) <= 0.1 / 6.0);
  }
}

TEST_CASE("incremental scenes carry only new-class annotations") {
  auto old_c = pick({1, 2, 3}), new_c = pick({4});
  auto scenes = generate_incremental_dataset(old_c, new_c, 200, 3);
  CHECK(scenes.size() == 200);
  for (const auto& s : scenes) {
    REQUIRE_FALSE(s.objects.empty());
    for (const auto& o : s.objects) CHECK(o.class_id == 4);
  }
  // old objects are still painted into a good share of the images
  auto full = generate_incremental_dataset(old_c, new_c, 200, 3, 1.0);
  std::size_t darker = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    double a = 0.0, b = 0.0;
    for (double v : scenes[i].image.data()) a += v;
    for (double v : full[i].image.data()) b += v;
    darker += a != b;
  }
  CHECK(darker > 50);
}

TEST_CASE("subset and restriction") {
  auto scenes = generate_dataset(default_classes(), 100, 21);
  std::vector<int> new_ids{4};
  auto sub = incremental_subset(scenes, new_ids);
  std::size_t expect = 0;
  for (const auto& s : scenes)
    expect += std::any_of(s.objects.begin(), s.objects.end(),
                          [](const LabeledBox& o) { return o.class_id == 4; });
  CHECK(sub.size() == expect);
  for (const auto& s : sub)
    for (const auto& o : s.objects) CHECK(o.class_id == 4);

  std::vector<int> old_ids{1, 2, 3};
  auto only_old = restrict_annotations(scenes, old_ids);
  REQUIRE(only_old.size() == scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    CHECK(only_old[i].image == scenes[i].image);
    for (const auto& o : only_old[i].objects) CHECK(o.class_id <= 3);
  }
}

TEST_CASE("save and load round trip") {
  auto scenes = generate_dataset(default_classes(), 12, 4);
  auto dir = scratch("roundtrip");
  save_dataset(scenes, dir);
  auto back = load_dataset(dir);
  REQUIRE(back.size() == scenes.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    CHECK(back[i].objects == scenes[i].objects);
    for (std::size_t k = 0; k < scenes[i].image.numel(); ++k)
      worst = std::max(worst, std::fabs(back[i].image[k] - scenes[i].image[k]));
  }
  CHECK(worst <= 1.0 / 255.0);
}

TEST_CASE("manifest parses under an independent JSON parser") {
  auto scenes = generate_dataset(default_classes(), 3, 8);
  auto dir = scratch("rapidjson");
  save_dataset(scenes, dir);
  std::ifstream in(dir / "annotations.json");
  std::stringstream buf;
  buf << in.rdbuf();
  rapidjson::Document doc;
  doc.Parse(buf.str().c_str());
  REQUIRE_FALSE(doc.HasParseError());
  const auto& images = doc["images"];
  REQUIRE(images.IsArray());
  REQUIRE(images.Size() == 3);
  for (rapidjson::SizeType i = 0; i < 3; ++i) {
    const auto& im = images[i];
    CHECK(im["width"].GetInt() == 64);
    CHECK(im["height"].GetInt() == 64);
    CHECK(fs::exists(dir / im["file"].GetString()));
    const auto& objs = im["objects"];
    REQUIRE(objs.Size() == scenes[i].objects.size());
    for (rapidjson::SizeType k = 0; k < objs.Size(); ++k) {
      const auto& o = scenes[i].objects[k];
      CHECK(objs[k]["class_id"].GetInt() == o.class_id);
      CHECK(objs[k]["x1"].GetDouble() == o.bbox.x1);
      CHECK(objs[k]["y2"].GetDouble() == o.bbox.y2);
    }
  }
}

TEST_CASE("loader errors name the file") {
  auto dir = scratch("broken");
  CHECK_THROWS_WITH(load_dataset(dir), doctest::Contains("annotations.json"));
  fs::create_directories(dir);
  { std::ofstream(dir / "annotations.json") << R"({"images":[{"file":"nope.ppm","width":64,"height":64,"objects":[]}]})"; }
  CHECK_THROWS_WITH(load_dataset(dir), doctest::Contains("nope.ppm"));
  { std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n"; }
  CHECK_THROWS_WITH(read_ppm(dir / "bad.ppm"), doctest::Contains("bad.ppm"));
}
