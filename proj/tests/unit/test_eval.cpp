#include <fstream>

#include "busaug/error.hpp"
#include "busaug/eval.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"
#include "json.hpp"

using namespace busaug;
using namespace busaug::eval;
using busaug::testing::brute_force;
using busaug::testing::Reference;

namespace {

Matrix random_matrix(int rows, int cols, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Matrix random_orthogonal(int d, Rng& rng) {
  Eigen::HouseholderQR<Matrix> qr(random_matrix(d, d, rng));
  return qr.householderQ();
}

}  // namespace

TEST_CASE("fid_stats") {
  Matrix two(2, 3);
  two << 1, 2, 3, 1, 2, 3;
  const FIDStats same = fid_stats(two);
  CHECK(same.sigma.cwiseAbs().maxCoeff() == 0.0);

  Matrix f(2, 2);
  f << 0, 0, 2, 0;
  const FIDStats s = fid_stats(f);
  CHECK(s.mu(0) == 1.0);
  CHECK(s.mu(1) == 0.0);
  CHECK(s.sigma(0, 0) == doctest::Approx(2.0));
  CHECK(s.sigma(0, 1) == 0.0);
  CHECK(s.sigma(1, 1) == 0.0);
  CHECK(s.n == 2);

  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const FIDStats r = fid_stats(random_matrix(10, 6, rng));
    CHECK((r.sigma - r.sigma.transpose()).cwiseAbs().maxCoeff() < 1e-8);
  }
  CHECK_THROWS_AS(fid_stats(Matrix(1, 3)), DataError);
}

TEST_CASE("matrix_sqrt_psd") {
  CHECK(matrix_sqrt_psd(Matrix::Identity(4, 4)).isApprox(Matrix::Identity(4, 4), 1e-12));
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 4;
  d(1, 1) = 9;
  const Matrix sd = matrix_sqrt_psd(d);
  CHECK(sd(0, 0) == doctest::Approx(2.0));
  CHECK(sd(1, 1) == doctest::Approx(3.0));
  CHECK(std::abs(sd(0, 1)) < 1e-12);

  Rng rng(2);
  for (int d_f : {2, 8, 16, 32}) {
    for (int trial = 0; trial < 25; ++trial) {
      const Matrix x = random_matrix(d_f, static_cast<int>(rng.uniform_int(1, 2 * d_f)), rng);
      const Matrix m = x * x.transpose();
      const Matrix s = matrix_sqrt_psd(m);
      CHECK((s * s - m).cwiseAbs().maxCoeff() < 1e-6 * (1.0 + m.cwiseAbs().maxCoeff()));
    }
  }

  Matrix neg = Matrix::Identity(2, 2);
  neg(1, 1) = -0.5;
  CHECK_THROWS(matrix_sqrt_psd(neg));
}

TEST_CASE("fid oracles") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const FIDStats s = fid_stats(random_matrix(40, 8, rng));
    CHECK(fid(s, s) < 1e-6);
    CHECK(fid(s, s) >= 0.0);
  }

  FIDStats a{Vector::Zero(1), Matrix::Identity(1, 1), 100};
  FIDStats b{Vector::Constant(1, 2.0), Matrix::Identity(1, 1), 100};
  CHECK(std::abs(fid(a, b) - 4.0) < 1e-6);

  // Diagonal case against the closed form sum((mu_a - mu_b)^2 + (sqrt(va) - sqrt(vb))^2).
  Vector va(3), vb(3);
  va << 1.0, 4.0, 0.25;
  vb << 9.0, 1.0, 0.25;
  FIDStats da{Vector::Zero(3), va.asDiagonal(), 5};
  FIDStats db{Vector::Ones(3), vb.asDiagonal(), 5};
  double expect = 3.0;
  for (int i = 0; i < 3; ++i) expect += std::pow(std::sqrt(va[i]) - std::sqrt(vb[i]), 2);
  CHECK(std::abs(fid(da, db) - expect) < 1e-9);

  for (int trial = 0; trial < 20; ++trial) {
    const int d = static_cast<int>(rng.uniform_int(2, 12));
    Matrix fa = random_matrix(30, d, rng);
    Matrix fb = random_matrix(25, d, rng) * 1.5;
    fb.rowwise() += Eigen::RowVectorXd::Constant(d, 0.7);
    const FIDStats sa = fid_stats(fa);
    const FIDStats sb = fid_stats(fb);
    const double ab = fid(sa, sb);
    CHECK(std::abs(ab - fid(sb, sa)) < 1e-6);
    CHECK(ab >= 0.0);
    const Matrix q = random_orthogonal(d, rng);
    const double rotated = fid(fid_stats(fa * q), fid_stats(fb * q));
    CHECK(std::abs(rotated - ab) < 1e-4);
  }
  CHECK_THROWS_AS(fid(fid_stats(random_matrix(5, 2, rng)), fid_stats(random_matrix(5, 3, rng))), DataError);
}

TEST_CASE("compute_metrics examples") {
  Matrix onehot = Matrix::Zero(6, 3);
  std::vector<int> labels = {0, 1, 2, 0, 1, 2};
  for (int i = 0; i < 6; ++i) onehot(i, labels[i]) = 1.0;
  const MetricsReport perfect = compute_metrics(onehot, labels);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.f1_macro == 1.0);
  CHECK(perfect.auc_roc_ovr_macro == 1.0);
  CHECK(perfect.ppv_macro == 1.0);
  CHECK(perfect.recall_macro == 1.0);
  CHECK(perfect.flags.empty());

  const Matrix uniform = Matrix::Constant(6, 3, 1.0 / 3.0);
  const MetricsReport chance = compute_metrics(uniform, labels);
  for (const auto& c : chance.per_class) CHECK(*c.auc == doctest::Approx(0.5));
  CHECK(chance.auc_roc_ovr_macro == doctest::Approx(0.5));

  // Fixture: confusion [[2,0,0],[0,1,1],[0,0,2]].
  std::ifstream in(BUSAUG_FIXTURE_DIR "/confusion_2_1_1_2.json");
  REQUIRE(in);
  const auto fx = nlohmann::json::parse(in);
  Matrix probs(6, 3);
  probs << 0.8, 0.1, 0.1,  //
      0.6, 0.3, 0.1,       //
      0.1, 0.7, 0.2,       //
      0.1, 0.3, 0.6,       //
      0.2, 0.2, 0.6,       //
      0.1, 0.1, 0.8;
  const std::vector<int> truth = {0, 0, 1, 1, 2, 2};
  const MetricsReport r = compute_metrics(probs, truth);
  for (int t = 0; t < 3; ++t)
    for (int p = 0; p < 3; ++p) CHECK(r.confusion[t][p] == fx["confusion"][t][p].get<int>());
  CHECK(r.accuracy == doctest::Approx(fx["accuracy"].get<double>()).epsilon(1e-12));
  CHECK(r.ppv_macro == doctest::Approx(fx["ppv_macro"].get<double>()).epsilon(1e-12));
  CHECK(r.recall_macro == doctest::Approx(fx["recall_macro"].get<double>()).epsilon(1e-12));
  CHECK(r.f1_macro == doctest::Approx(fx["f1_macro"].get<double>()).epsilon(1e-12));
  for (int k = 0; k < 3; ++k) {
    CHECK(r.per_class[k].precision == doctest::Approx(fx["per_class"][k]["precision"].get<double>()).epsilon(1e-12));
    CHECK(r.per_class[k].recall == doctest::Approx(fx["per_class"][k]["recall"].get<double>()).epsilon(1e-12));
    CHECK(r.per_class[k].f1 == doctest::Approx(fx["per_class"][k]["f1"].get<double>()).epsilon(1e-12));
  }
}

TEST_CASE("compute_metrics edge cases") {
  // Ties go to the lowest class index.
  Matrix tie(2, 3);
  tie << 0.4, 0.4, 0.2, 0.2, 0.4, 0.4;
  const MetricsReport t = compute_metrics(tie, {0, 1});
  CHECK(t.confusion[0][0] == 1);
  CHECK(t.confusion[1][1] == 1);

  // Class 2 never appears and is never predicted.
  Matrix p(2, 3);
  p << 0.9, 0.1, 0.0, 0.1, 0.9, 0.0;
  const MetricsReport r = compute_metrics(p, {0, 1});
  CHECK(r.per_class[2].precision == 0.0);
  CHECK(r.per_class[2].recall == 0.0);
  CHECK_FALSE(r.per_class[2].auc.has_value());
  auto has = [&](const std::string& f) { return std::find(r.flags.begin(), r.flags.end(), f) != r.flags.end(); };
  CHECK(has("auc_skipped:normal"));
  CHECK(has("ppv_undefined:normal"));
  CHECK(has("recall_undefined:normal"));
  CHECK(r.auc_roc_ovr_macro == 1.0);

  CHECK_THROWS_AS(compute_metrics(p, {0, 3}), DataError);
  CHECK_THROWS_AS(compute_metrics(Matrix(0, 3), {}), DataError);
  Matrix bad(1, 3);
  bad << 0.5, 0.5, 0.5;
  CHECK_THROWS_AS(compute_metrics(bad, {0}), DataError);
}

TEST_CASE("compute_metrics matches the brute-force oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 40));
    Matrix probs(n, 3);
    std::vector<int> labels(n);
    const bool coarse = trial % 2 == 0;  // coarse scores produce many ties
    for (int i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int k = 0; k < 3; ++k) {
        probs(i, k) = coarse ? static_cast<double>(rng.uniform_int(0, 3)) : rng.uniform();
        sum += probs(i, k);
      }
      if (sum == 0.0) {
        probs.row(i).setConstant(1.0 / 3.0);
      } else {
        probs.row(i) /= sum;
      }
      labels[i] = static_cast<int>(rng.uniform_int(0, 2));
    }
    const MetricsReport r = compute_metrics(probs, labels);
    const Reference ref = brute_force(probs, labels);
    CHECK(std::abs(r.accuracy - ref.accuracy) < 1e-9);
    CHECK(std::abs(r.ppv_macro - ref.ppv) < 1e-9);
    CHECK(std::abs(r.recall_macro - ref.recall) < 1e-9);
    CHECK(std::abs(r.f1_macro - ref.f1) < 1e-9);
    if (ref.auc_classes > 0) CHECK(std::abs(r.auc_roc_ovr_macro - ref.auc) < 1e-6);
    int trace = 0, total = 0;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        total += r.confusion[a][b];
        if (a == b) trace += r.confusion[a][b];
      }
    CHECK(r.accuracy == static_cast<double>(trace) / total);
  }
}

TEST_CASE("metrics report serialization") {
  Matrix p(3, 3);
  p << 0.7, 0.2, 0.1, 0.2, 0.5, 0.3, 0.1, 0.1, 0.8;
  MetricsReport r = compute_metrics(p, {0, 1, 1});
  r.fid = 12.5;
  r.metadata["arm"] = "sd";
  const auto j = r.to_json();
  for (const char* key : {"Accuracy", "F1-Score", "AUC-ROC", "PPV", "Recall", "FID"}) CHECK(j.contains(key));
  const MetricsReport back = MetricsReport::from_json(j);
  CHECK(back.to_json() == j);
  MetricsReport none = r;
  none.fid.reset();
  CHECK(none.to_json()["FID"].is_null());
}

TEST_CASE("feature extractors") {
  RandomConvExtractor ex(64, 8, 5);
  CHECK(ex.dim() == 64);
  CHECK(ex.deterministic());
  Rng rng(4);
  const Image a = busaug::testing::random_image(64, rng);
  const Image b = busaug::testing::random_image(64, rng);
  const Matrix f1 = ex.extract({a, b, a}, {"a", "b", "a"});
  const Matrix f2 = ex.extract({a, b, a}, {"a", "b", "a"});
  CHECK(f1 == f2);
  CHECK(f1.row(0) == f1.row(2));
  CHECK(f1.row(0) != f1.row(1));
  RandomConvExtractor threaded(64, 8, 5, 3);
  CHECK(threaded.extract({a, b, a}, {"a", "b", "a"}) == f1);
  // Other sizes are resized first.
  CHECK(ex.extract({busaug::testing::random_image(32, rng)}, {"s"}).cols() == 64);

  busaug::testing::TempDir dir("features");
  write_feature_file(dir.path() / "f.bin", "inception-v3-pool", {"a", "b", "c"}, f1);
  const FeatureFile back = read_feature_file(dir.path() / "f.bin");
  CHECK(back.extractor_name == "inception-v3-pool");
  CHECK(back.dim == 64);
  CHECK(back.keys == std::vector<std::string>{"a", "b", "c"});
  CHECK(std::memcmp(back.features.data(), f1.data(), sizeof(double) * f1.size()) == 0);

  PrecomputedExtractor pre(dir.path() / "f.bin");
  CHECK(pre.name() == "inception-v3-pool");
  CHECK(pre.extract({a, a}, {"b", "a"}).row(0) == f1.row(1));
  CHECK_THROWS_WITH_AS(pre.extract({a}, {"zzz"}), doctest::Contains("zzz"), DataError);
}

TEST_CASE("classifier basics") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector z = busaug::testing::random_vector(3, rng) * rng.uniform(0.1, 50.0);
    CHECK(std::abs(softmax(z).sum() - 1.0) < 1e-6);
  }
  const auto manifest = busaug::testing::phantom_split({6, 6, 6}, 16, 5);
  ClassifierConfig zero;
  zero.epochs = 0;
  zero.seed = 3;
  const ClassifierModel init(16, zero.width, zero.seed);
  const ClassifierModel untrained = train_classifier(manifest, zero);
  CHECK(untrained.store().bitwise_equal(init.store()));
  for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(untrained.predict_proba(manifest.load_image(i)).sum() - 1.0) < 1e-6);

  ClassifierConfig two;
  two.epochs = 2;
  two.seed = 3;
  const ClassifierModel a = train_classifier(manifest, two);
  const ClassifierModel b = train_classifier(manifest, two);
  CHECK(a.store().bitwise_equal(b.store()));
  CHECK_FALSE(a.store().bitwise_equal(init.store()));

  busaug::testing::TempDir dir("cls");
  a.save(dir.path() / "c.bin");
  const ClassifierModel loaded = ClassifierModel::load(dir.path() / "c.bin");
  CHECK(loaded.store().bitwise_equal(a.store()));
  CHECK(loaded.predict_proba(manifest.load_image(0)) == a.predict_proba(manifest.load_image(0)));

  data::Manifest missing = manifest;
  std::erase_if(missing.samples, [](const data::Sample& s) { return s.label == data::ClassLabel::kNormal; });
  CHECK_THROWS_AS(train_classifier(missing, two), DataError);
}

TEST_CASE("classifier reaches 0.80 validation accuracy on phantoms" * doctest::test_suite("slow")) {
  const auto manifest = busaug::testing::phantom_split({100, 100, 100}, 64, 21);
  ClassifierConfig cfg;
  cfg.seed = 4;
  const ClassifierModel model = train_classifier(manifest, cfg);
  const MetricsReport r = evaluate_classifier(model, manifest, data::Split::kVal);
  MESSAGE("val accuracy " << r.accuracy);
  CHECK(r.accuracy > 0.80);
}
