#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ecqx/data.hpp"
#include "ecqx/lrp.hpp"
#include "ecqx/qat.hpp"
#include "ecqx/report.hpp"
#include "support.hpp"

using namespace ecqx;
using namespace ecqx::testing;

namespace {

// Straightforward two-pass recomputation in long double.
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  long double c = 0, vx = 0, vy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    c += (x[i] - mx) * (y[i] - my);
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  return double(c / std::sqrt(vx * vy));
}

std::string slurp(const std::string& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ReportRecord sample_record(int i) {
  return {"mlp_small", i % 2 ? "ecqx" : "ecq", 4, 1e-4 * (i + 1), 0.05, 88.0 + i, 1.0 - 0.1 * i, 71.25 + i,
          12.3456789 * (i + 1), 41.0 / 3.0};
}

}  // namespace

TEST(Pearson, PerfectAndConstant) {
  const std::vector<double> w{0.3, -1.2, 2.0, 0.0, 0.7};
  std::vector<double> neg(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) neg[i] = -w[i];
  EXPECT_DOUBLE_EQ(pearson(w, w), 1.0);
  EXPECT_DOUBLE_EQ(pearson(w, neg), -1.0);
  EXPECT_THROW(pearson(w, std::vector<double>(5, 2.0)), InputError);
  EXPECT_THROW(pearson(w, std::vector<double>(4, 2.0)), InputError);
}

TEST(Pearson, AffineInvarianceAndRange) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = between(rng, 2, 300);
    std::vector<double> x(n), y(n), xa(n), ya(n);
    const double a = rng.uniform(0.1, 5.0), b = rng.uniform(-3, 3), c = rng.uniform(0.1, 5.0), d = rng.uniform(-3, 3);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = 0.3 * x[i] + rng.normal();
      xa[i] = a * x[i] + b;
      ya[i] = c * y[i] + d;
    }
    const double r = pearson(x, y);
    EXPECT_GE(r, -1.0);
    EXPECT_LE(r, 1.0);
    EXPECT_NEAR(pearson(xa, ya), r, 1e-9);
    EXPECT_NEAR(r, pearson_oracle(x, y), 1e-12);
  }
}

TEST(Histogram, MassIsPreserved) {
  Rng rng(2);
  const Tensor w = random_tensor({20, 30}, rng), r = random_tensor({20, 30}, rng, 0.0, 1.0);
  const auto lc = correlate_layer("l", w, r);
  std::size_t n = 0;
  for (auto c : lc.weights.counts) n += c;
  EXPECT_EQ(n, w.size());
  double mass = 0.0;
  for (double m : lc.relevance_mass) mass += m;
  EXPECT_NEAR(mass, r.sum(), 1e-10);
  EXPECT_THROW(correlate_layer("l", w, Tensor({3})), ShapeError);
}

TEST(Correlation, TrainedModelMatchesScriptedRecount) {
  const auto d = gen_blobs(42, 4, 16, 60, 1.5);
  Model m = make_model({16}, {LayerSpec::dense(16, 32), LayerSpec::relu(), LayerSpec::dense(32, 4)}, 1);
  m = pretrain(m, d.train, 5, 1e-3, 32, 3);
  auto [y, cache] = forward(m, d.test.features, false);
  const auto map = lrp_backward(m, cache, init_relevance(y, d.test.labels, SeedMode::unit), Composite::standard());
  const auto rep = correlation_analysis({"a", "b"}, {m.layers[0].weight, m.layers[2].weight},
                                        {map.weight[0], map.weight[2]});
  ASSERT_EQ(rep.layers.size(), 2u);
  EXPECT_NEAR(rep.layers[0].pearson, pearson_oracle(m.layers[0].weight.vec(), map.weight[0].vec()), 1e-12);
  EXPECT_NEAR(rep.layers[1].pearson, pearson_oracle(m.layers[2].weight.vec(), map.weight[2].vec()), 1e-12);
  const auto j = to_json(rep);
  EXPECT_EQ(j.size(), 2u);
  EXPECT_EQ(j[1]["layer"], "b");
}

TEST(Csv, EmptyAndSingleRecord) {
  EXPECT_EQ(report_csv({}), std::string(kReportHeader) + "\n");
  EXPECT_TRUE(parse_report_csv(report_csv({})).empty());
  const std::vector<ReportRecord> one{sample_record(0)};
  const std::string csv = report_csv(one);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(parse_report_csv(csv), one);
}

TEST(Csv, RoundTripAndJsonMirror) {
  std::vector<ReportRecord> recs;
  for (int i = 0; i < 6; ++i) recs.push_back(sample_record(i));
  EXPECT_EQ(parse_report_csv(report_csv(recs)), recs);
  const auto j = report_json(recs);
  ASSERT_EQ(j.size(), recs.size());
  std::istringstream header(kReportHeader);
  std::vector<std::string> cols;
  for (std::string c; std::getline(header, c, ',');) cols.push_back(c);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    ASSERT_EQ(j[i].size(), cols.size());
    for (const auto& c : cols) EXPECT_TRUE(j[i].contains(c)) << c;
    EXPECT_EQ(j[i]["lambda"].get<double>(), recs[i].lambda);
    EXPECT_EQ(j[i]["CR"].get<double>(), recs[i].cr);
  }
  EXPECT_THROW(parse_report_csv("nope\n"), FormatError);
  EXPECT_THROW(parse_report_csv(std::string(kReportHeader) + "\na,b,c\n"), FormatError);
}

TEST(Emit, WritesFilesAndReportsUnwritablePaths) {
  const auto dir = std::filesystem::temp_directory_path() / "ecqx_report_test";
  std::filesystem::create_directories(dir);
  const std::vector<ReportRecord> recs{sample_record(1), sample_record(2)};
  emit_report(recs, (dir / "r.csv").string(), (dir / "r.json").string());
  EXPECT_EQ(parse_report_csv(slurp((dir / "r.csv").string())), recs);
  EXPECT_EQ(nlohmann::json::parse(slurp((dir / "r.json").string())), report_json(recs));
  EXPECT_THROW(emit_report(recs, (dir / "missing" / "r.csv").string(), (dir / "r.json").string()), IoError);
  std::filesystem::remove_all(dir);
}
