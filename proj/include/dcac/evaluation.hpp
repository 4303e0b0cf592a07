#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dcac/backbone.hpp"
#include "dcac/datapipe.hpp"

namespace dcac {

struct ScoredItem {
    std::string image_name;
    double score = 0.0;  // in [0,1]
    int label = 0;       // 1 = malignant
};

struct ScoredSet {
    std::vector<ScoredItem> items;

    std::int64_t count_positive() const;
    std::int64_t count_negative() const;
};

// Area under the ROC curve via the rank-sum formula with average ranks for
// ties: AUC = (R+ - n+(n+ + 1)/2) / (n+ * n-). Requires both classes.
double auroc(const ScoredSet& s);

// Seeded uniform partition with |public| = round(public_frac * n).
std::pair<std::vector<std::string>, std::vector<std::string>> public_private_split(
    const std::vector<std::string>& ids, double public_frac, std::uint64_t seed);

struct EvalReport {
    double auroc_full = 0.0;
    double auroc_public = 0.0;
    double auroc_private = 0.0;
    std::int64_t n_pos = 0;
    std::int64_t n_neg = 0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
};

// Metric protocol over an existing scored set: full AUROC plus the seeded
// 30/70 public/private recomputation.
EvalReport evaluate_scores(const ScoredSet& scored, std::uint64_t seed);

// Scores every manifest record by running resized (unaugmented) images
// through the network in inference mode, then applies the metric protocol.
// Image files are resolved as <image_root>/<image_name>.png or .ppm; all
// missing files are listed before any scoring happens.
EvalReport evaluate(const Network& net, const Manifest& manifest, const std::string& image_root,
                    std::uint64_t seed, ScoredSet* scored_out = nullptr);

// image_name,score,label rows; score text is shortest-round-trip.
std::string scored_csv(const ScoredSet& s);

}  // namespace dcac
