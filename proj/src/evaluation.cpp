#include "dcac/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "dcac/augment.hpp"
#include "dcac/image.hpp"
#include "dcac/ops.hpp"

namespace dcac {

std::int64_t ScoredSet::count_positive() const {
    std::int64_t n = 0;
    for (const auto& it : items) n += it.label;
    return n;
}

std::int64_t ScoredSet::count_negative() const {
    return static_cast<std::int64_t>(items.size()) - count_positive();
}

double auroc(const ScoredSet& s) {
    const std::int64_t n_pos = s.count_positive();
    const std::int64_t n_neg = s.count_negative();
    if (n_pos == 0 || n_neg == 0) {
        raise(ErrorCode::DataError, "auroc: both classes required, got " +
                                        std::to_string(n_pos) + " positive and " +
                                        std::to_string(n_neg) + " negative");
    }
    for (const auto& it : s.items) {
        if (it.label != 0 && it.label != 1) {
            raise(ErrorCode::DataError, "auroc: labels must be 0 or 1");
        }
    }

    // Ascending by score; equal scores share the average of their ranks.
    std::vector<std::size_t> order(s.items.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return s.items[a].score < s.items[b].score;
    });

    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() &&
               s.items[order[j + 1]].score == s.items[order[i]].score) {
            ++j;
        }
        // 1-based ranks i+1 .. j+1 tie; each gets their mean.
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) {
            if (s.items[order[k]].label == 1) rank_sum_pos += avg_rank;
        }
        i = j + 1;
    }

    const double np = static_cast<double>(n_pos);
    const double nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

std::pair<std::vector<std::string>, std::vector<std::string>> public_private_split(
    const std::vector<std::string>& ids, double public_frac, std::uint64_t seed) {
    if (!(public_frac > 0.0 && public_frac < 1.0)) {
        raise(ErrorCode::UsageError, "public_private_split: fraction must lie in (0,1)");
    }
    std::vector<std::string> shuffled = ids;
    Rng rng(derive_seed(seed, 0x3070));
    for (std::size_t i = shuffled.size(); i > 1; --i) {
        std::swap(shuffled[i - 1], shuffled[rng.uniform_below(i)]);
    }
    const auto n_public = static_cast<std::size_t>(
        std::llround(public_frac * static_cast<double>(ids.size())));
    std::vector<std::string> pub(shuffled.begin(),
                                 shuffled.begin() + static_cast<std::ptrdiff_t>(n_public));
    std::vector<std::string> priv(shuffled.begin() + static_cast<std::ptrdiff_t>(n_public),
                                  shuffled.end());
    return {std::move(pub), std::move(priv)};
}

nlohmann::json EvalReport::to_json() const {
    auto number_or_null = [](double v) {
        return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
    };
    return nlohmann::json{{"auroc_full", auroc_full},
                          {"auroc_public", number_or_null(auroc_public)},
                          {"auroc_private", number_or_null(auroc_private)},
                          {"n_pos", n_pos},
                          {"n_neg", n_neg},
                          {"seed", seed}};
}

EvalReport evaluate_scores(const ScoredSet& scored, std::uint64_t seed) {
    EvalReport rep;
    rep.seed = seed;
    rep.n_pos = scored.count_positive();
    rep.n_neg = scored.count_negative();
    rep.auroc_full = auroc(scored);

    std::vector<std::string> ids;
    ids.reserve(scored.items.size());
    std::unordered_map<std::string, const ScoredItem*> by_name;
    for (const auto& it : scored.items) {
        ids.push_back(it.image_name);
        by_name[it.image_name] = &it;
    }
    auto [pub_ids, priv_ids] = public_private_split(ids, 0.30, seed);
    // A random subset of a small set can end up single-class; its AUROC is
    // undefined and reported as NaN (null in JSON) rather than an error.
    auto subset_auroc = [&](const std::vector<std::string>& names) {
        ScoredSet out;
        out.items.reserve(names.size());
        for (const auto& n : names) out.items.push_back(*by_name.at(n));
        if (out.count_positive() == 0 || out.count_negative() == 0)
            return std::numeric_limits<double>::quiet_NaN();
        return auroc(out);
    };
    rep.auroc_public = subset_auroc(pub_ids);
    rep.auroc_private = subset_auroc(priv_ids);
    return rep;
}

EvalReport evaluate(const Network& net, const Manifest& manifest, const std::string& image_root,
                    std::uint64_t seed, ScoredSet* scored_out) {
    namespace fs = std::filesystem;
    if (manifest.size() == 0) raise(ErrorCode::DataError, "evaluate: empty manifest");

    // Resolve every path up front so all missing files are reported at once.
    std::vector<std::string> paths(manifest.size());
    std::string missing;
    std::int64_t n_missing = 0;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        const auto& name = manifest.records[i].image_name;
        const std::string png = image_root + "/" + name + ".png";
        const std::string ppm = image_root + "/" + name + ".ppm";
        if (fs::exists(png)) {
            paths[i] = png;
        } else if (fs::exists(ppm)) {
            paths[i] = ppm;
        } else {
            ++n_missing;
            if (n_missing <= 8) {
                if (!missing.empty()) missing += ", ";
                missing += name;
            }
        }
    }
    if (n_missing > 0) {
        raise(ErrorCode::IoError, "evaluate: " + std::to_string(n_missing) +
                                      " image file(s) missing under " + image_root + ": " +
                                      missing + (n_missing > 8 ? ", ..." : ""));
    }

    const std::int64_t in_h = net.config.input_height;
    const std::int64_t in_w = net.config.input_width;
    ScoredSet scored;
    scored.items.resize(manifest.size());

    // Inference is batched only for speed; eval-mode outputs are identical
    // for any batching.
    const std::size_t batch = 16;
    for (std::size_t start = 0; start < manifest.size(); start += batch) {
        const std::size_t n = std::min(batch, manifest.size() - start);
        auto stacked = Tensor::zeros({static_cast<std::int64_t>(n), 3, in_h, in_w});
        const std::int64_t elems = 3 * in_h * in_w;
        for (std::size_t k = 0; k < n; ++k) {
            auto img = resize_bilinear(load_image(paths[start + k]), in_h, in_w);
            std::copy(img->data.begin(), img->data.end(),
                      stacked->data.begin() + static_cast<std::ptrdiff_t>(k * elems));
        }
        auto logits = net.forward(nullptr, stacked, /*training=*/false);
        auto probs = ops::sigmoid(nullptr, logits);
        for (std::size_t k = 0; k < n; ++k) {
            auto& item = scored.items[start + k];
            item.image_name = manifest.records[start + k].image_name;
            item.label = manifest.records[start + k].target;
            item.score = probs->data[k];
        }
    }

    if (scored_out) *scored_out = scored;
    return evaluate_scores(scored, seed);
}

std::string scored_csv(const ScoredSet& s) {
    std::string out = "image_name,score,label\n";
    char buf[64];
    for (const auto& it : s.items) {
        auto [p, ec] = std::to_chars(buf, buf + sizeof buf, it.score);
        out += it.image_name;
        out += ',';
        out.append(buf, p);
        out += ',';
        out += std::to_string(it.label);
        out += '\n';
    }
    return out;
}

}  // namespace dcac
