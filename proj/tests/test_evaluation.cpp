#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "dcac/evaluation.hpp"
#include "dcac/image.hpp"
#include "oracles.hpp"

using namespace dcac;

namespace {

ScoredSet make_set(const std::vector<double>& scores, const std::vector<int>& labels) {
    ScoredSet s;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        s.items.push_back({"item_" + std::to_string(i), scores[i], labels[i]});
    }
    return s;
}

}  // namespace

TEST_CASE("auroc endpoints: perfect separation, pure ties, anti-perfect") {
    auto perfect = make_set({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
    CHECK(auroc(perfect) == 1.0);

    auto ties = make_set({0.5, 0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0, 0});
    CHECK(auroc(ties) == 0.5);

    auto inverted = make_set({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0});
    CHECK(auroc(inverted) == 0.0);
}

TEST_CASE("auroc rejects single-class input and bad labels") {
    CHECK_THROWS_WITH_AS(auroc(make_set({0.1, 0.9}, {1, 1})), doctest::Contains("both classes"),
                         Error);
    CHECK_THROWS_WITH_AS(auroc(make_set({0.1, 0.9}, {0, 0})), doctest::Contains("both classes"),
                         Error);
    CHECK_THROWS_AS(auroc(make_set({0.1, 0.9, 0.5}, {0, 1, 2})), Error);
}

TEST_CASE("auroc equals the pairwise oracle on 1000 randomized tied instances") {
    for (int trial = 0; trial < 1000; ++trial) {
        Rng rng(derive_seed(606, trial));
        const auto n = 2 + rng.uniform_below(199);  // n <= 200
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        // A coarse score grid forces plenty of exact ties.
        const auto levels = 2 + rng.uniform_below(18);
        for (std::size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(rng.uniform_below(levels)) /
                        static_cast<double>(levels - 1);
            labels[i] = rng.bernoulli(0.3) ? 1 : 0;
        }
        labels[0] = 1;  // both classes always present
        labels[n - 1] = 0;

        const double fast = auroc(make_set(scores, labels));
        const double slow = oracles::auroc_pairwise(scores, labels);
        CHECK(std::abs(fast - slow) <= 1e-12);
    }
}

TEST_CASE("auroc is invariant under strictly increasing score transforms") {
    Rng rng(607);
    std::vector<double> scores(150);
    std::vector<int> labels(150);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = 0.05 + 0.9 * (static_cast<double>(rng.uniform_below(25)) / 24.0);
        labels[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    labels[0] = 1;
    labels[1] = 0;

    auto raw = make_set(scores, labels);
    auto logit = raw;
    for (auto& it : logit.items) it.score = std::log(it.score / (1.0 - it.score));
    CHECK(auroc(raw) == auroc(logit));
}

TEST_CASE("flipping labels complements the auroc") {
    Rng rng(608);
    std::vector<double> scores(120);
    std::vector<int> labels(120);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = rng.uniform();
        labels[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    labels[0] = 1;
    labels[1] = 0;
    auto s = make_set(scores, labels);
    auto flipped = s;
    for (auto& it : flipped.items) it.label = 1 - it.label;
    CHECK(auroc(flipped) == doctest::Approx(1.0 - auroc(s)).epsilon(1e-12));
}

TEST_CASE("public/private split sizes, determinism, and partition properties") {
    std::vector<std::string> ten;
    for (int i = 0; i < 10; ++i) ten.push_back("id" + std::to_string(i));
    auto [pub, priv] = public_private_split(ten, 0.3, 5);
    CHECK(pub.size() == 3);
    CHECK(priv.size() == 7);

    auto [pub2, priv2] = public_private_split(ten, 0.3, 5);
    CHECK(pub == pub2);
    CHECK(priv == priv2);

    for (int trial = 0; trial < 50; ++trial) {
        Rng rng(derive_seed(609, trial));
        const auto n = 2 + rng.uniform_below(300);
        std::vector<std::string> ids;
        for (std::uint64_t i = 0; i < n; ++i) ids.push_back("x" + std::to_string(i));
        const double frac = rng.uniform(0.1, 0.9);
        auto [a, b] = public_private_split(ids, frac, derive_seed(610, trial));
        CHECK(a.size() == static_cast<std::size_t>(std::llround(frac * static_cast<double>(n))));
        CHECK(a.size() + b.size() == ids.size());
        std::set<std::string> all(a.begin(), a.end());
        for (const auto& id : b) CHECK(all.insert(id).second);  // disjoint
        CHECK(all.size() == ids.size());                        // exhaustive
    }
}

TEST_CASE("a single-class protocol subset reports NaN instead of failing") {
    // 4 items with 1 positive: the public side holds round(0.3 * 4) = 1 item,
    // so it is single-class for every seed.
    auto s = make_set({0.9, 0.4, 0.3, 0.2}, {1, 0, 0, 0});
    const EvalReport rep = evaluate_scores(s, 5);
    CHECK(rep.auroc_full == 1.0);
    CHECK(std::isnan(rep.auroc_public));
    const auto j = rep.to_json();
    CHECK(j.at("auroc_public").is_null());
    CHECK(j.at("auroc_full") == 1.0);
}

TEST_CASE("random scorer lands near 0.5 on both protocol sides") {
    Rng rng(611);
    ScoredSet s;
    for (int i = 0; i < 1000; ++i) {
        s.items.push_back({"n" + std::to_string(i), rng.uniform(), rng.bernoulli(0.5) ? 1 : 0});
    }
    s.items[0].label = 1;
    s.items[1].label = 0;
    auto rep = evaluate_scores(s, 777);
    CHECK(rep.auroc_public >= 0.45);
    CHECK(rep.auroc_public <= 0.55);
    CHECK(rep.auroc_private >= 0.45);
    CHECK(rep.auroc_private <= 0.55);
    CHECK(rep.n_pos + rep.n_neg == 1000);

    auto j = rep.to_json();
    CHECK(j.contains("auroc_full"));
    CHECK(j.contains("auroc_public"));
    CHECK(j.contains("auroc_private"));
    CHECK(j["seed"] == 777);
}

TEST_CASE("constant per-class scores give auroc exactly 1 when ordered correctly") {
    ScoredSet s;
    for (int i = 0; i < 20; ++i) {
        const int label = i % 4 == 0 ? 1 : 0;
        s.items.push_back({"c" + std::to_string(i), label == 1 ? 0.8 : 0.3, label});
    }
    auto rep = evaluate_scores(s, 3);
    CHECK(rep.auroc_full == 1.0);
    CHECK(rep.auroc_public == 1.0);
    CHECK(rep.auroc_private == 1.0);
}

TEST_CASE("scored csv is stable and parseable") {
    auto s = make_set({0.5, 0.125}, {1, 0});
    const std::string csv = scored_csv(s);
    CHECK(csv ==
          "image_name,score,label\n"
          "item_0,0.5,1\n"
          "item_1,0.125,0\n");
}

TEST_CASE("evaluate scores image files end to end") {
    namespace fs = std::filesystem;
    const std::string root = "/tmp/dcac_eval_imgs";
    fs::create_directories(root);

    // Two distinct source images; every class-1 record is a copy of one,
    // every class-0 record a copy of the other. The network then assigns one
    // constant score per class, so the full AUROC is exactly 0 or 1, and
    // flipping labels complements it.
    Rng rng(612);
    auto bright = Tensor::zeros({3, 40, 40});
    auto dark = Tensor::zeros({3, 40, 40});
    for (auto& v : bright->data) v = 0.7 + 0.3 * rng.uniform();
    for (auto& v : dark->data) v = 0.3 * rng.uniform();

    std::vector<SampleRecord> recs;
    for (int i = 0; i < 8; ++i) {
        SampleRecord r;
        r.image_name = "img_" + std::to_string(i);
        r.patient_id = "p" + std::to_string(i);
        r.target = i % 2;
        recs.push_back(r);
        const auto img = (r.target == 1) ? bright : dark;
        // Mix formats to exercise both loaders through the resolver.
        if (i % 4 < 2) {
            save_png(root + "/" + r.image_name + ".png", img);
        } else {
            save_ppm(root + "/" + r.image_name + ".ppm", img);
        }
    }
    auto manifest = Manifest::from_records(recs);

    auto net = build_network(NetworkConfig::tiny(), 99);
    ScoredSet scored;
    auto rep = evaluate(net, manifest, root, 11, &scored);
    REQUIRE(scored.items.size() == 8);
    for (const auto& it : scored.items) {
        CHECK(it.score >= 0.0);
        CHECK(it.score <= 1.0);
    }
    // One constant score per class.
    CHECK(scored.items[0].score == scored.items[2].score);
    CHECK(scored.items[1].score == scored.items[3].score);
    CHECK((rep.auroc_full == 0.0 || rep.auroc_full == 1.0));

    auto flipped = manifest;
    for (auto& r : flipped.records) r.target = 1 - r.target;
    auto rep2 = evaluate(net, flipped, root, 11);
    CHECK(rep2.auroc_full == 1.0 - rep.auroc_full);

    // Determinism: identical call, identical report and csv.
    ScoredSet scored_again;
    auto rep3 = evaluate(net, manifest, root, 11, &scored_again);
    CHECK(rep3.to_json() == rep.to_json());
    CHECK(scored_csv(scored_again) == scored_csv(scored));

    // Missing files are listed, and nothing is scored.
    SampleRecord ghost;
    ghost.image_name = "img_ghost";
    ghost.patient_id = "px";
    ghost.target = 0;
    auto broken_list = manifest.records;
    broken_list.push_back(ghost);
    auto broken = Manifest::from_records(broken_list);
    CHECK_THROWS_WITH_AS(evaluate(net, broken, root, 11), doctest::Contains("img_ghost"), Error);

    fs::remove_all(root);
}
