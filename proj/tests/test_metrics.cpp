#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "astra/metrics.hpp"
#include "astra/rng.hpp"
#include "oracles.hpp"
#include "temp_files.hpp"

using namespace astra;

namespace {

// Brute-force references, written independently of the library: plain loops,
// no shared helpers.
double ref_ade(const std::vector<Point2>& p, const std::vector<Point2>& g) {
    double total = 0.0;
    for (std::size_t t = 0; t < p.size(); ++t) {
        total += std::sqrt((p[t][0] - g[t][0]) * (p[t][0] - g[t][0]) +
                           (p[t][1] - g[t][1]) * (p[t][1] - g[t][1]));
    }
    return total / static_cast<double>(p.size());
}

double ref_fde(const std::vector<Point2>& p, const std::vector<Point2>& g) {
    const std::size_t t = p.size() - 1;
    return std::sqrt((p[t][0] - g[t][0]) * (p[t][0] - g[t][0]) +
                     (p[t][1] - g[t][1]) * (p[t][1] - g[t][1]));
}

double ref_min_ade(const std::vector<std::vector<Point2>>& samples,
                   const std::vector<Point2>& g) {
    double best = ref_ade(samples[0], g);
    for (const auto& s : samples) {
        best = std::min(best, ref_ade(s, g));
    }
    return best;
}

double ref_min_fde(const std::vector<std::vector<Point2>>& samples,
                   const std::vector<Point2>& g) {
    double best = ref_fde(samples[0], g);
    for (const auto& s : samples) {
        best = std::min(best, ref_fde(s, g));
    }
    return best;
}

std::vector<Point2> ref_centroids(const std::vector<Box4>& boxes) {
    std::vector<Point2> out;
    for (const auto& b : boxes) {
        out.push_back({(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0});
    }
    return out;
}

double ref_arb(const std::vector<Box4>& p, const std::vector<Box4>& g, bool joint) {
    double rb_total = 0.0;
    double sq_total = 0.0;
    for (std::size_t t = 0; t < p.size(); ++t) {
        double sq = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
            sq += (p[t][c] - g[t][c]) * (p[t][c] - g[t][c]);
        }
        rb_total += std::sqrt(sq / 4.0);
        sq_total += sq;
    }
    if (joint) {
        return std::sqrt(sq_total / (4.0 * static_cast<double>(p.size())));
    }
    return rb_total / static_cast<double>(p.size());
}

double ref_frb(const std::vector<Box4>& p, const std::vector<Box4>& g) {
    const std::size_t t = p.size() - 1;
    double sq = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
        sq += (p[t][c] - g[t][c]) * (p[t][c] - g[t][c]);
    }
    return std::sqrt(sq / 4.0);
}

std::vector<Point2> random_track(Rng& rng, std::size_t t_len) {
    std::vector<Point2> out(t_len);
    for (auto& p : out) {
        p = {rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)};
    }
    return out;
}

std::vector<Box4> random_boxes(Rng& rng, std::size_t t_len) {
    std::vector<Box4> out(t_len);
    for (auto& b : out) {
        b = {rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0),
             rng.uniform(-50.0, 50.0)};
    }
    return out;
}

}  // namespace

TEST_CASE("displacement metric hand values") {
    SECTION("exact prediction") {
        const std::vector<Point2> track{{1.0, 2.0}, {3.0, 4.0}};
        CHECK(ade(track, track) == 0.0);
        CHECK(fde(track, track) == 0.0);
    }
    SECTION("constant offset (3,4) scores 5") {
        const std::vector<Point2> gt{{0.0, 0.0}, {1.0, 1.0}, {2.0, 2.0}};
        std::vector<Point2> pred = gt;
        for (auto& p : pred) {
            p[0] += 3.0;
            p[1] += 4.0;
        }
        CHECK(ade(pred, gt) == Catch::Approx(5.0).epsilon(1e-15));
        CHECK(fde(pred, gt) == Catch::Approx(5.0).epsilon(1e-15));
    }
    SECTION("growing offsets average and finish") {
        const std::vector<Point2> gt{{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}};
        const std::vector<Point2> pred{{1.0, 0.0}, {2.0, 0.0}, {3.0, 0.0}};
        CHECK(ade(pred, gt) == Catch::Approx(2.0).epsilon(1e-15));
        CHECK(fde(pred, gt) == Catch::Approx(3.0).epsilon(1e-15));
    }
    SECTION("length mismatch and empty input are rejected") {
        const std::vector<Point2> one{{0.0, 0.0}};
        const std::vector<Point2> two{{0.0, 0.0}, {1.0, 1.0}};
        CHECK_THROWS_AS(ade(one, two), ShapeError);
        CHECK_THROWS_AS(fde(one, two), ShapeError);
        CHECK_THROWS_AS(ade(std::vector<Point2>{}, std::vector<Point2>{}), ShapeError);
    }
    SECTION("symmetry") {
        Rng rng(2);
        const auto a = random_track(rng, 5);
        const auto b = random_track(rng, 5);
        CHECK(ade(a, b) == ade(b, a));
        CHECK(fde(a, b) == fde(b, a));
    }
}

TEST_CASE("best-of-K displacement metrics") {
    const std::vector<Point2> gt{{0.0, 0.0}, {1.0, 0.0}};
    SECTION("one exact sample") {
        const std::vector<std::vector<Point2>> samples{{{9.0, 9.0}, {9.0, 9.0}}, gt};
        const auto best = min_ade_k(samples, gt);
        CHECK(best.value == 0.0);
        CHECK(best.best_index == 1);
        CHECK(min_fde_k(samples, gt).value == 0.0);
    }
    SECTION("picks the minimum") {
        std::vector<Point2> off1 = gt, off2 = gt;
        for (auto& p : off1) {
            p[0] += 5.0;
        }
        for (auto& p : off2) {
            p[0] += 2.0;
        }
        const std::vector<std::vector<Point2>> samples{off1, off2};
        CHECK(min_ade_k(samples, gt).value == Catch::Approx(2.0));
        CHECK(min_ade_k(samples, gt).best_index == 1);
    }
    SECTION("K=1 equals the plain metric") {
        Rng rng(7);
        const auto pred = random_track(rng, 4);
        const auto g = random_track(rng, 4);
        const std::vector<std::vector<Point2>> samples{pred};
        CHECK(min_ade_k(samples, g).value == ade(pred, g));
        CHECK(min_fde_k(samples, g).value == fde(pred, g));
    }
    SECTION("monotone non-increasing in K") {
        Rng rng(8);
        const auto g = random_track(rng, 6);
        std::vector<std::vector<Point2>> samples;
        double prev_ade = 1e300, prev_fde = 1e300;
        for (std::size_t k = 0; k < 10; ++k) {
            samples.push_back(random_track(rng, 6));
            const double a = min_ade_k(samples, g).value;
            const double f = min_fde_k(samples, g).value;
            CHECK(a <= prev_ade);
            CHECK(f <= prev_fde);
            prev_ade = a;
            prev_fde = f;
        }
    }
    SECTION("empty sample set is rejected") {
        CHECK_THROWS_AS(min_ade_k({}, gt), ShapeError);
    }
}

TEST_CASE("bounding-box metric hand values") {
    SECTION("centroid formula") {
        CHECK(bbox_centroid({0, 0, 2, 2}) == Point2{1.0, 1.0});
        CHECK(bbox_centroid({1, 1, 1, 1}) == Point2{1.0, 1.0});
        CHECK(bbox_centroid({0, 0, 4, 2}) == Point2{2.0, 1.0});
    }
    SECTION("exact boxes score zero") {
        const std::vector<Box4> boxes{{0, 0, 1, 1}, {1, 1, 2, 2}};
        const auto [cade, cfde] = cade_cfde(boxes, boxes);
        CHECK(cade == 0.0);
        CHECK(cfde == 0.0);
        const auto [arb, frb] = arb_frb(boxes, boxes);
        CHECK(arb == 0.0);
        CHECK(frb == 0.0);
    }
    SECTION("centroid offset (3,4) gives CADE = CFDE = 5") {
        const std::vector<Box4> gt{{0, 0, 2, 2}, {1, 1, 3, 3}};
        std::vector<Box4> pred = gt;
        for (auto& b : pred) {
            b[0] += 3.0;
            b[2] += 3.0;
            b[1] += 4.0;
            b[3] += 4.0;
        }
        const auto [cade, cfde] = cade_cfde(pred, gt);
        CHECK(cade == Catch::Approx(5.0).epsilon(1e-15));
        CHECK(cfde == Catch::Approx(5.0).epsilon(1e-15));
    }
    SECTION("centroid-preserving corner jitter scores zero") {
        const std::vector<Box4> gt{{0, 0, 2, 2}};
        const std::vector<Box4> pred{{-1, -1, 3, 3}};
        const auto [cade, cfde] = cade_cfde(pred, gt);
        CHECK(cade == 0.0);
        CHECK(cfde == 0.0);
    }
    SECTION("all four coordinates off by 1 gives RB = 1") {
        const std::vector<Box4> gt{{0, 0, 1, 1}, {0, 0, 1, 1}};
        const std::vector<Box4> pred{{1, 1, 2, 2}, {1, 1, 2, 2}};
        const auto [arb, frb] = arb_frb(pred, gt);
        CHECK(arb == Catch::Approx(1.0).epsilon(1e-15));
        CHECK(frb == Catch::Approx(1.0).epsilon(1e-15));
    }
    SECTION("one coordinate off by 2 gives RB = 1") {
        const std::vector<Box4> gt{{0, 0, 1, 1}};
        const std::vector<Box4> pred{{2, 0, 1, 1}};
        const auto [arb, frb] = arb_frb(pred, gt);
        CHECK(arb == Catch::Approx(1.0).epsilon(1e-15));
        CHECK(frb == Catch::Approx(1.0).epsilon(1e-15));
    }
    SECTION("variants agree when all steps have equal error") {
        const std::vector<Box4> gt{{0, 0, 0, 0}, {0, 0, 0, 0}};
        const std::vector<Box4> pred{{1, 1, 1, 1}, {1, 1, 1, 1}};
        const auto mean_variant = arb_frb(pred, gt, ArbVariant::mean_of_rmse);
        const auto joint_variant = arb_frb(pred, gt, ArbVariant::joint_rmse);
        CHECK(mean_variant.first == Catch::Approx(joint_variant.first).epsilon(1e-15));
        CHECK(mean_variant.second == joint_variant.second);
    }
}

TEST_CASE("metrics agree with brute force over 500 random pairs") {
    Rng rng(2024);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t t_len = 1 + rng.index(14);
        const std::size_t k = 1 + rng.index(8);

        const auto gt = random_track(rng, t_len);
        std::vector<std::vector<Point2>> samples;
        for (std::size_t i = 0; i < k; ++i) {
            samples.push_back(random_track(rng, t_len));
        }
        CHECK(ade(samples[0], gt) == Catch::Approx(ref_ade(samples[0], gt)).margin(1e-10));
        CHECK(fde(samples[0], gt) == Catch::Approx(ref_fde(samples[0], gt)).margin(1e-10));
        CHECK(min_ade_k(samples, gt).value ==
              Catch::Approx(ref_min_ade(samples, gt)).margin(1e-10));
        CHECK(min_fde_k(samples, gt).value ==
              Catch::Approx(ref_min_fde(samples, gt)).margin(1e-10));

        const auto gt_boxes = random_boxes(rng, t_len);
        const auto pred_boxes = random_boxes(rng, t_len);
        const auto [cade, cfde] = cade_cfde(pred_boxes, gt_boxes);
        CHECK(cade == Catch::Approx(ref_ade(ref_centroids(pred_boxes),
                                            ref_centroids(gt_boxes)))
                          .margin(1e-10));
        CHECK(cfde == Catch::Approx(ref_fde(ref_centroids(pred_boxes),
                                            ref_centroids(gt_boxes)))
                          .margin(1e-10));
        const auto [arb_mean, frb] = arb_frb(pred_boxes, gt_boxes, ArbVariant::mean_of_rmse);
        const auto [arb_joint, frb2] = arb_frb(pred_boxes, gt_boxes, ArbVariant::joint_rmse);
        CHECK(arb_mean == Catch::Approx(ref_arb(pred_boxes, gt_boxes, false)).margin(1e-10));
        CHECK(arb_joint == Catch::Approx(ref_arb(pred_boxes, gt_boxes, true)).margin(1e-10));
        CHECK(frb == Catch::Approx(ref_frb(pred_boxes, gt_boxes)).margin(1e-10));
        CHECK(frb2 == frb);
    }
}

TEST_CASE("metrics are invariant under shared rigid motion") {
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        const auto pred = random_track(rng, 6);
        const auto gt = random_track(rng, 6);
        const double theta = rng.uniform(0.0, 6.28);
        const double tx = rng.uniform(-5.0, 5.0);
        const double ty = rng.uniform(-5.0, 5.0);
        auto move = [&](const std::vector<Point2>& track) {
            std::vector<Point2> out(track.size());
            for (std::size_t t = 0; t < track.size(); ++t) {
                out[t] = {std::cos(theta) * track[t][0] - std::sin(theta) * track[t][1] + tx,
                          std::sin(theta) * track[t][0] + std::cos(theta) * track[t][1] + ty};
            }
            return out;
        };
        CHECK(ade(move(pred), move(gt)) == Catch::Approx(ade(pred, gt)).margin(1e-10));
        CHECK(fde(move(pred), move(gt)) == Catch::Approx(fde(pred, gt)).margin(1e-10));
    }
}

TEST_CASE("metrics report accumulates and serializes") {
    MetricsReport report;
    report.k_used = 20;
    report.at("ade").add(1.0);
    report.at("ade").add(3.0);
    report.at("fde").add(5.0);
    report.n_samples_evaluated = 2;

    CHECK(report.mean("ade") == 2.0);
    CHECK(report.mean("fde") == 5.0);
    CHECK(report.has("ade"));
    CHECK_FALSE(report.has("min_ade_k"));
    CHECK_THROWS_AS(report.mean("nope"), ContractError);

    const std::string text = report.to_text();
    CHECK(text.find("k_used = 20") != std::string::npos);
    CHECK(text.find("ade = 2") != std::string::npos);

    testutil::TempDir tmp;
    const auto path = tmp.path("metrics.txt");
    report.write_table(path);
    std::ifstream in(path);
    std::string name;
    double value = 0.0;
    std::size_t count = 0;
    in >> name >> value >> count;
    CHECK(name == "ade");
    CHECK(value == 2.0);
    CHECK(count == 2);
    in >> name >> value >> count;
    CHECK(name == "fde");
    CHECK(value == 5.0);
    CHECK(count == 1);
}
