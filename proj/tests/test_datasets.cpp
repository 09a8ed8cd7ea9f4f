#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <random>

#include "fixtures.hpp"
#include "support.hpp"
#include "textloc/datasets.hpp"

using namespace textloc;
using testing_support::TempDir;

namespace {

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(std::ifstream(p)); }

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

void write_gray(const fs::path& p, const Matrix& bytes) {
  Image img(static_cast<int>(bytes.cols()), static_cast<int>(bytes.rows()), 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) img.at(x, y, 0) = static_cast<std::uint8_t>(bytes(y, x));
  write_png(p.string(), img);
}

std::string validation_message(const fs::path& manifest, const ManifestOptions& opt = {}) {
  try {
    load_manifest(manifest, opt);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

}  // namespace

TEST(Manifest, TwoConceptsFiveImagesIsValid) {
  TempDir dir("manifest");
  make_shapes_dataset(dir.path(), 5, 1);
  const ConceptManifest m = load_manifest(dir / "manifest.json");
  ASSERT_EQ(m.concepts.size(), 2u);
  for (const auto& c : m.concepts) {
    EXPECT_EQ(c.images.size(), 5u);
    EXPECT_EQ(c.masks.size(), 5u);
  }
  ASSERT_EQ(m.groups.size(), 1u);
  EXPECT_EQ(m.groups[0].masks.size(), 2u);
  EXPECT_TRUE(m.warnings.empty());
  EXPECT_EQ(m.concept_by_id("disc").identifier, "ktn");
  EXPECT_THROW(m.concept_by_id("nope"), ArgumentError);
}

TEST(Manifest, ImageWithoutMaskNamesThePair) {
  TempDir dir("manifest");
  make_shapes_dataset(dir.path(), 3, 1);
  auto j = read_json(dir / "manifest.json");
  j["concepts"][0]["masks"].erase(2);
  write_json(dir / "manifest.json", j);
  const std::string msg = validation_message(dir / "manifest.json");
  EXPECT_TRUE(contains(msg, "concept 'square'")) << msg;
  EXPECT_TRUE(contains(msg, "2.png' has no mask")) << msg;
}

TEST(Manifest, EmptyConceptListRejected) {
  TempDir dir("manifest");
  write_json(dir / "manifest.json", {{"concepts", nlohmann::json::array()}});
  EXPECT_TRUE(contains(validation_message(dir / "manifest.json"), "no concepts"));
  EXPECT_THROW(load_manifest(dir / "absent.json"), ValidationError);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_THROW(load_manifest(dir / "broken.json"), ValidationError);
}

TEST(Manifest, EveryViolationIsReported) {
  TempDir dir("manifest");
  make_shapes_dataset(dir.path(), 3, 1);
  auto j = read_json(dir / "manifest.json");
  j["concepts"][0]["images"][1] = "images/missing.png";
  j["concepts"][1]["identifier"] = "not an identifier";
  j["groups"][0]["masks"].erase("disc");
  write_json(dir / "manifest.json", j);
  const std::string msg = validation_message(dir / "manifest.json");
  EXPECT_TRUE(contains(msg, "missing.png' does not exist")) << msg;
  EXPECT_TRUE(contains(msg, "concept 'disc'")) << msg;
  EXPECT_TRUE(contains(msg, "no masks for member concept 'disc'")) << msg;
}

TEST(Manifest, MaskSizeAndGroupShape) {
  TempDir dir("manifest");
  make_shapes_dataset(dir.path(), 2, 1);
  write_gray(dir / "masks" / "small.png", Matrix::Constant(4, 4, 255));
  auto j = read_json(dir / "manifest.json");
  j["concepts"][0]["masks"][0] = "masks/small.png";
  j["groups"][0]["concepts"] = {"square", "square"};
  write_json(dir / "manifest.json", j);
  const std::string msg = validation_message(dir / "manifest.json");
  EXPECT_TRUE(contains(msg, "size differs")) << msg;
  EXPECT_TRUE(contains(msg, "exactly two distinct")) << msg;
}

TEST(Manifest, SoftMasksWarnOrFailUnderStrict) {
  TempDir dir("manifest");
  make_shapes_dataset(dir.path(), 2, 1);
  Matrix soft = Matrix::Zero(32, 32);
  soft.block(4, 4, 8, 8).setConstant(255);
  soft(3, 4) = 128;
  write_gray(dir / "masks" / "square" / "0.png", soft);
  const ConceptManifest m = load_manifest(dir / "manifest.json");
  ASSERT_FALSE(m.warnings.empty());
  EXPECT_TRUE(contains(m.warnings[0], "soft"));
  EXPECT_TRUE(contains(validation_message(dir / "manifest.json", ManifestOptions{true}), "soft"));
}

TEST(Manifest, SaveLoadRoundTrip) {
  TempDir dir("manifest");
  const ConceptManifest made = make_shapes_dataset(dir.path(), 2, 3);
  const ConceptManifest loaded = load_manifest(dir / "manifest.json");
  ASSERT_EQ(loaded.concepts.size(), made.concepts.size());
  for (std::size_t i = 0; i < made.concepts.size(); ++i) {
    EXPECT_EQ(loaded.concepts[i].images, made.concepts[i].images);
    EXPECT_EQ(loaded.concepts[i].masks, made.concepts[i].masks);
  }
  EXPECT_EQ(loaded.groups[0].masks, made.groups[0].masks);
}

TEST(LoadMask, Examples) {
  TempDir dir("mask");
  write_gray(dir / "ones.png", Matrix::Constant(3, 5, 255));
  const SegMask ones = load_mask(dir / "ones.png");
  EXPECT_EQ(ones.rows(), 3);
  EXPECT_EQ(ones.cols(), 5);
  EXPECT_TRUE(ones.values().isOnes());

  write_gray(dir / "zero.png", Matrix::Zero(4, 4));
  EXPECT_THROW(load_mask(dir / "zero.png"), ValidationError);

  write_gray(dir / "half.png", Matrix::Constant(2, 2, 128));
  EXPECT_NEAR(load_mask(dir / "half.png").values()(1, 1), 128.0 / 255.0, 1e-15);
  EXPECT_NEAR(load_mask(dir / "half.png").values()(0, 0), 0.50196, 1e-5);
}

TEST(LoadMask, ColourAndUnreadableFiles) {
  TempDir dir("mask");
  Image rgb(2, 2, 3);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) rgb.at(x, y, 0) = 200;
  write_png((dir / "rgb.png").string(), rgb);
  EXPECT_THROW(load_mask(dir / "rgb.png"), FormatError);

  // gray stored as RGB collapses trivially
  Image gray3(2, 2, 3);
  std::fill(gray3.pixels.begin(), gray3.pixels.end(), 255);
  write_png((dir / "gray3.png").string(), gray3);
  EXPECT_TRUE(load_mask(dir / "gray3.png").values().isOnes());

  std::ofstream(dir / "junk.png") << "not a png";
  EXPECT_THROW(load_mask(dir / "junk.png"), FormatError);
}

TEST(ResizeMask, Examples) {
  Matrix m(2, 2);
  m << 1, 1, 0, 0;
  const SegMask seg(m, "c");
  EXPECT_DOUBLE_EQ(resize_mask(seg, 1, 1, MaskResizeMode::Soft).values()(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(resize_mask(seg, 1, 1, MaskResizeMode::Binary).values()(0, 0), 1.0);
  EXPECT_THROW(resize_mask(seg, 0, 1, MaskResizeMode::Soft), ArgumentError);
  EXPECT_THROW(resize_mask(seg, 1, -2, MaskResizeMode::Binary), ArgumentError);
}

TEST(ResizeMaskProperty, ConstantsCommute) {
  for (double c : {1.0, 0.25, 0.7}) {
    const SegMask seg(Matrix::Constant(12, 9, c), "c");
    for (auto [h, w] : {std::pair{3, 3}, std::pair{5, 7}, std::pair{24, 18}, std::pair{1, 1}}) {
      EXPECT_TRUE(resize_mask(seg, h, w, MaskResizeMode::Soft).values().isApproxToConstant(c, 1e-12));
      // binary of a positive constant is the constant 1
      EXPECT_TRUE(resize_mask(seg, h, w, MaskResizeMode::Binary).values().isOnes());
    }
  }
}

TEST(ResizeMaskProperty, AreaAveragePreservesMass) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix v = oracle::uniform(24, 24, rng);
    v(0, 0) = 1.0;
    const SegMask seg(v, "c");
    for (int out : {1, 2, 3, 4, 6, 8, 12}) {
      const Matrix r = resize_mask(seg, out, out, MaskResizeMode::Soft).values();
      EXPECT_NEAR(r.mean(), v.mean(), 1e-6);
    }
  }
}

TEST(ResizeMaskProperty, BinaryCoversSoftSupport) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix v = (oracle::uniform(20, 20, rng).array() > 0.8).cast<double>();
    v(5, 5) = 1.0;
    const SegMask seg(v, "c");
    for (int out : {3, 7, 10, 40}) {
      const Matrix soft = resize_mask(seg, out, out, MaskResizeMode::Soft).values();
      const Matrix bin = resize_mask(seg, out, out, MaskResizeMode::Binary).values();
      EXPECT_TRUE(((soft.array() > 0) == (bin.array() > 0)).all());
      EXPECT_TRUE(((bin.array() == 0) || (bin.array() == 1)).all());
    }
  }
}

TEST(GuidanceTargetFromMask, CropsThenResizes) {
  Matrix m = Matrix::Zero(4, 6);
  m.col(0).setOnes();  // lies outside the centre crop
  m.col(1).setOnes();
  m(0, 2) = 1.0;
  const GuidanceTarget t = make_guidance_target(SegMask(m, "c"), 2);
  Matrix expect(2, 2);
  expect << 0.75, 0.0, 0.5, 0.0;
  EXPECT_TRUE(t.seg.values().isApprox(expect));
  Matrix inv(2, 2);
  inv << 0, 1, 0, 1;
  EXPECT_EQ(t.inverse_support, inv);
}

TEST(Priors, DeterministicBytes) {
  TempDir a("priors"), b("priors");
  ToyDenoiser model(fixtures::small_config(3));
  const PriorSet pa = generate_priors(model, "square", 4, 9, a.path());
  const PriorSet pb = generate_priors(model, "square", 4, 9, b.path());
  ASSERT_EQ(pa.images.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(pa.images[i], a / "square" / (std::to_string(i) + ".png"));
    EXPECT_EQ(testing_support::read_bytes(pa.images[i]), testing_support::read_bytes(pb.images[i]));
  }
  // independent streams per image (compared before decoding: an untrained
  // model can saturate every pixel after clamping)
  const TokenSequence tokens = tokenize(model.vocabulary(), "square");
  EXPECT_FALSE(sample_latent(model, tokens, prior_seed(9, 0)).latent.isApprox(
      sample_latent(model, tokens, prior_seed(9, 1)).latent));
}

TEST(Priors, ProvenanceAndReload) {
  TempDir dir("priors");
  ToyDenoiser model(fixtures::small_config(3));
  generate_priors(model, "circle", 2, 5, dir.path());
  const auto prov = read_json(dir / "circle" / "provenance.json");
  EXPECT_EQ(prov["backbone"], model.id());
  EXPECT_EQ(prov["seed"], 5);
  EXPECT_EQ(prov["count"], 2);
  EXPECT_EQ(prov["prompt"], "circle");
  const PriorSet loaded = load_priors(dir.path(), "circle");
  EXPECT_EQ(loaded.images.size(), 2u);
  EXPECT_EQ(loaded.seed, 5u);
  fs::remove(dir / "circle" / "1.png");
  EXPECT_THROW(load_priors(dir.path(), "circle"), ValidationError);
  EXPECT_THROW(load_priors(dir.path(), "nothing"), ValidationError);
}

TEST(Priors, ZeroCountIsEmpty) {
  TempDir dir("priors");
  ToyDenoiser model(fixtures::small_config());
  const PriorSet p = generate_priors(model, "square", 0, 1, dir.path());
  EXPECT_TRUE(p.empty());
  EXPECT_TRUE(fs::exists(dir / "square" / "provenance.json"));
  EXPECT_THROW(generate_priors(model, "square", -1, 1, dir.path()), ArgumentError);
  EXPECT_EQ(kDefaultPriorCount, 200);
}

TEST(Priors, NeedsDecodeCapability) {
  TempDir dir("priors");
  fixtures::RestrictedBackbone b(BackboneCapabilities{true, false, true, true, true, true});
  EXPECT_THROW(generate_priors(b, "square", 2, 1, dir.path()), CapabilityError);
}

TEST(Shapes, MasksAreDisjointAndMatchColours) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    const ShapesSample s = render_shapes(rng);
    EXPECT_GT(s.square_mask.sum(), 0);
    EXPECT_GT(s.disc_mask.sum(), 0);
    EXPECT_EQ(s.square_mask.cwiseProduct(s.disc_mask).sum(), 0);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (s.square_mask(y, x) > 0) EXPECT_GT(s.image.at(x, y, 0), 150);
  }
}
