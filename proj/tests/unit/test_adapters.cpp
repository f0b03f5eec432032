#include <algorithm>
#include <cstring>

#include "busaug/adapters.hpp"
#include "busaug/error.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace busaug;
using namespace busaug::adapters;
using busaug::testing::random_image;
using busaug::testing::random_vector;

namespace {

bool same_tensor(const nn::Matrix& a, const nn::Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

void randomize(nn::Matrix& m, Rng& rng, double scale = 1.0) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
}

}  // namespace

TEST_CASE("prompt encoder") {
  const PromptEncoder enc = busaug::testing::small_encoder();
  const std::string prompt = "ultrasound image of a benign breast lesion";
  const nn::Vector a = enc.encode(prompt);
  CHECK(a.size() == 8);
  CHECK(a == enc.encode(prompt));
  CHECK(enc.tokenize("Ultrasound image, of NORMAL breast tissue.") ==
        std::vector<std::string>{"ultrasound", "image", "of", "normal", "breast", "tissue"});

  // Mean pooling ignores word order.
  Rng rng(12);
  auto words = enc.tokenize(prompt);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> perm = rng.permutation(words.size());
    std::string shuffled;
    for (std::size_t i : perm) shuffled += (shuffled.empty() ? "" : " ") + words[i];
    CHECK(enc.encode(shuffled) == a);
  }

  // A single word is its own mean: compare with an encoder whose table holds only that row.
  const nn::Vector single = enc.encode("lesion");
  PromptEncoder copy = enc;
  copy.register_token("<only>", "lesion");
  CHECK(copy.encode("<only>") == single);

  CHECK_THROWS_WITH_AS(enc.encode("ultrasound image of a cat"), doctest::Contains("cat"), DataError);
  CHECK_FALSE(enc.covers("photo of a cat"));
  CHECK(enc.unknown_words("photo of a cat") == std::vector<std::string>{"photo", "cat"});
}

TEST_CASE("register_token") {
  PromptEncoder enc = busaug::testing::small_encoder();
  const auto& table = enc.store().get("text.embedding").value;
  const auto& vocab = enc.vocabulary();
  const auto image_row = std::find(vocab.begin(), vocab.end(), "image") - vocab.begin();

  const TokenEmbedding e = enc.register_token("<ultrasound>", "image", 2);
  CHECK(e.vectors.rows() == 2);
  for (int r = 0; r < 2; ++r) CHECK(e.vectors.row(r) == table.row(image_row));
  CHECK(enc.encode("<ultrasound> image of normal breast tissue").size() == 8);
  CHECK_THROWS_AS(enc.register_token("<ultrasound>", "image"), DataError);
  CHECK_THROWS_AS(enc.register_token("image", "mean"), DataError);
  CHECK_THROWS_AS(enc.register_token("<x>", "giraffe"), DataError);

  const TokenEmbedding m = enc.register_token("<mean>", "mean");
  const Eigen::RowVectorXd mean = table.colwise().sum() / static_cast<double>(table.rows());
  CHECK((m.vectors.row(0) - mean).cwiseAbs().maxCoeff() < 1e-6);

  busaug::testing::TempDir dir("token");
  save_token(dir.path() / "t.bin", e);
  const TokenEmbedding back = load_token(dir.path() / "t.bin");
  CHECK(back.token == e.token);
  CHECK(back.init_source == "image");
  CHECK(same_tensor(back.vectors, e.vectors));
  PromptEncoder fresh = busaug::testing::small_encoder();
  fresh.load_token(back);
  CHECK(fresh.encode("<ultrasound> image of a benign breast lesion") ==
        enc.encode("<ultrasound> image of a benign breast lesion"));
}

TEST_CASE("LoRA on a dense map matches the dense-matrix oracle") {
  nn::ParameterStore store;
  Rng rng(8);
  nn::DenseMap map("probe", 8, 8);
  map.declare(store, rng);
  randomize(store.get("probe.bias").value, rng);
  map.attach_lora(store, 2, 3.0, rng);
  randomize(store.get(map.lora_b_name()).value, rng);

  const nn::Matrix& w = store.get(map.weight_name()).value;
  const nn::Matrix& a = store.get(map.lora_a_name()).value;
  const nn::Matrix& b = store.get(map.lora_b_name()).value;
  CHECK(a.rows() == 2);
  CHECK(b.cols() == 2);
  const nn::Matrix dense = w + (3.0 / 2.0) * b * a;
  for (int trial = 0; trial < 20; ++trial) {
    nn::Matrix x(8, 3);
    randomize(x, rng);
    const nn::Matrix expect = (dense * x).colwise() + store.get("probe.bias").value.col(0);
    CHECK((map.forward(store, x) - expect).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("LoRA attachment contracts") {
  diffusion::DenoiserModel base(busaug::testing::small_unet(16), 4);
  PromptEncoder enc = busaug::testing::small_encoder();
  const auto targets = default_lora_targets(base);
  CHECK_FALSE(targets.empty());
  for (const auto& t : targets) {
    const bool expected = t.starts_with("cond.") || t.ends_with(".film") ||
                          (t.starts_with("mid.") && (t.ends_with(".conv1") || t.ends_with(".conv2")));
    CHECK_MESSAGE(expected, t);
  }
  CHECK(default_lora_targets(enc) == std::vector<std::string>{"text.proj.0", "text.proj.1"});

  diffusion::DenoiserModel adapted = base;
  const auto adapters = attach_lora(adapted, targets, 4, 4.0, 11);
  CHECK(adapters.size() == targets.size());
  for (const auto& a : adapters) CHECK(a.b.cwiseAbs().maxCoeff() == 0.0);
  for (const auto& t : targets) CHECK(adapted.store().get(adapted.find_dense_map(t)->weight_name()).frozen);

  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Image x = random_image(16, rng);
    const nn::Vector c = random_vector(8, rng);
    const int t = static_cast<int>(rng.uniform_int(1, 200));
    CHECK(bitwise_equal(adapted.predict_eps(x, t, c), base.predict_eps(x, t, c)));
  }

  diffusion::DenoiserModel bad = base;
  CHECK_THROWS_AS(attach_lora(bad, {"no.such.map"}, 2, 2.0, 1), RuntimeError);
  CHECK_THROWS_AS(attach_lora(bad, {targets.front()}, 10000, 2.0, 1), RuntimeError);
  CHECK(bad.store().bitwise_equal(base.store()));

  // Merging a zero delta gives back the base weights exactly.
  diffusion::DenoiserModel merged = adapted;
  merge_lora(merged);
  for (const auto& [name, p] : base.store()) CHECK_MESSAGE(same_tensor(p.value, merged.store().get(name).value), name);
  CHECK(merged.store().size() == base.store().size());
  CHECK_THROWS_AS(merge_lora(merged), RuntimeError);
}

TEST_CASE("LoRA training keeps the base frozen, stays low rank and merges cleanly") {
  const auto manifest = busaug::testing::phantom_split({6, 6, 6}, 16, 3);
  diffusion::DenoiserModel model(busaug::testing::small_unet(16), 4);
  PromptEncoder enc = busaug::testing::small_encoder();
  attach_lora(model, default_lora_targets(model), 2, 4.0, 1);
  attach_lora(enc, default_lora_targets(enc), 2, 4.0, 2);

  diffusion::TrainConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 5e-3;
  tc.trainable_selector = diffusion::select_lora_only();
  tc.selector_description = "lora";
  const auto trained = train_diffusion(model, manifest, enc, diffusion::make_schedule(), tc);

  for (const auto& [name, p] : model.store()) {
    const bool adapter = name.ends_with(".lora_A") || name.ends_with(".lora_B");
    if (!adapter) CHECK_MESSAGE(same_tensor(p.value, trained.model.store().get(name).value), name);
  }
  for (const auto& [name, p] : enc.store()) {
    const bool adapter = name.ends_with(".lora_A") || name.ends_with(".lora_B");
    if (!adapter) CHECK_MESSAGE(same_tensor(p.value, trained.encoder.store().get(name).value), name);
  }

  const auto adapters = export_adapters(trained.model);
  bool any_nonzero = false;
  for (const auto& a : adapters) {
    const nn::Matrix delta = a.b * a.a;
    Eigen::JacobiSVD<nn::Matrix> svd(delta);
    const auto& sv = svd.singularValues();
    if (sv[0] == 0.0) continue;
    any_nonzero = true;
    for (Eigen::Index i = a.rank; i < sv.size(); ++i) CHECK(sv[i] < 1e-6 * sv[0]);
  }
  CHECK(any_nonzero);

  diffusion::DenoiserModel merged = trained.model;
  merge_lora(merged);
  Rng rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Image x = random_image(16, rng);
    const nn::Vector c = random_vector(8, rng);
    const int t = static_cast<int>(rng.uniform_int(1, 200));
    const Image u = trained.model.predict_eps(x, t, c);
    const Image m = merged.predict_eps(x, t, c);
    for (std::size_t i = 0; i < u.size(); ++i) worst = std::max(worst, std::abs(u.pixels[i] - m.pixels[i]));
  }
  CHECK(worst < 1e-5);

  // Adapter files reproduce the trained model.
  busaug::testing::TempDir dir("lora");
  save_adapters(dir.path() / "a.bin", adapters);
  const auto loaded = load_adapters(dir.path() / "a.bin");
  REQUIRE(loaded.size() == adapters.size());
  diffusion::DenoiserModel rebuilt(busaug::testing::small_unet(16), 4);
  apply_adapters(rebuilt, loaded);
  CHECK(rebuilt.store().bitwise_equal(trained.model.store()));
}

TEST_CASE("textual inversion isolation and determinism") {
  const auto manifest = busaug::testing::phantom_split({4, 4, 4}, 16, 9);
  const diffusion::DenoiserModel model(busaug::testing::small_unet(16), 4);
  PromptEncoder base = busaug::testing::small_encoder();
  base.register_token("<ultrasound>", "image");
  std::vector<Image> images;
  std::vector<std::string> prompts;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    images.push_back(manifest.load_image(i));
    prompts.push_back(data::prompt_for_label(manifest.samples[i].label, true, "<ultrasound>"));
  }
  const auto s = diffusion::make_schedule();

  TextualInversionConfig zero;
  zero.steps = 0;
  PromptEncoder untouched = base;
  const auto e0 = train_textual_inversion(model, untouched, "<ultrasound>", images, prompts, s, zero);
  CHECK(same_tensor(e0.vectors, base.token_embedding("<ultrasound>").vectors));

  TextualInversionConfig tc;
  tc.steps = 20;
  tc.learning_rate = 1e-2;
  PromptEncoder a = base;
  const diffusion::DenoiserModel model_before = model;
  const auto ea = train_textual_inversion(model, a, "<ultrasound>", images, prompts, s, tc);
  CHECK(model.store().bitwise_equal(model_before.store()));
  CHECK_FALSE(same_tensor(ea.vectors, e0.vectors));
  for (const auto& [name, p] : base.store()) {
    if (name == PromptEncoder::token_param_name("<ultrasound>")) continue;
    CHECK_MESSAGE(same_tensor(p.value, a.store().get(name).value), name);
  }
  CHECK(same_tensor(a.token_embedding("<ultrasound>").vectors, ea.vectors));

  PromptEncoder b = base;
  const auto eb = train_textual_inversion(model, b, "<ultrasound>", images, prompts, s, tc);
  CHECK(same_tensor(ea.vectors, eb.vectors));

  std::vector<std::string> plain;
  for (const auto& im : images) {
    (void)im;
    plain.push_back("ultrasound image of normal breast tissue");
  }
  PromptEncoder c = base;
  CHECK_THROWS_AS(train_textual_inversion(model, c, "<ultrasound>", images, plain, s, tc), DataError);
}

TEST_CASE("textual inversion gradient matches central differences") {
  const diffusion::DenoiserModel model(busaug::testing::tiny_unet(), 6);
  PromptEncoder enc(PromptEncoder::prompt_vocabulary(), {8, 4}, 5);
  enc.register_token("<ultrasound>", "image");
  const std::string param = PromptEncoder::token_param_name("<ultrasound>");
  const std::string prompt = "<ultrasound> image of a benign breast lesion";
  Rng rng(10);
  const std::vector<Image> batch{random_image(8, rng)};
  const auto s = diffusion::make_schedule();
  const std::uint64_t seed = 19;

  diffusion::DenoiserModel frozen = model;
  auto loss_at = [&](const PromptEncoder& e) {
    const std::vector<nn::Vector> conds{e.encode(prompt)};
    return diffusion::denoising_loss(frozen, batch, conds, s, seed);
  };

  nn::TrainableScope model_scope(frozen.store(), diffusion::select_nothing());
  nn::TrainableScope text_scope(enc.store(), [&](std::string_view n) { return n == param; });
  enc.store().zero_grad();
  EncodeCache cache;
  const std::vector<nn::Vector> conds{enc.encode(prompt, &cache)};
  const auto lg = diffusion::denoising_loss_grad(frozen, batch, conds, s, seed);
  enc.backward(cache, lg.cond_grads[0]);
  const nn::Matrix analytic = enc.store().get(param).grad;
  for (const auto& [name, p] : enc.store())
    if (name != param && p.grad.size() > 0) CHECK_MESSAGE(p.grad.cwiseAbs().maxCoeff() == 0.0, name);

  const double h = 1e-5;
  nn::Matrix& v = enc.store().get(param).value;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double orig = v.data()[i];
    v.data()[i] = orig + h;
    const double up = loss_at(enc);
    v.data()[i] = orig - h;
    const double down = loss_at(enc);
    v.data()[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.data()[i];
    CHECK(std::abs(numeric - a) / std::max({std::abs(numeric), std::abs(a), 1e-6}) < 1e-4);
  }
}
