#pragma once

// Deterministic synthetic dataset shaped like the ISIC 2020 training table:
// 33,126 records over 2,056 patients with 584 malignant, plus a 425-entry
// duplicate-id list containing exactly 3 malignant ids. Dropping the
// duplicates therefore leaves 32,701 records with 581 malignant.

#include <cstdio>
#include <string>
#include <vector>

#include "dcac/datapipe.hpp"
#include "dcac/rng.hpp"

namespace synth {

constexpr std::int64_t kImages = 33126;
constexpr std::int64_t kPatients = 2056;
constexpr std::int64_t kMalignant = 584;
constexpr std::int64_t kMalignantStride = 41;  // coprime with kPatients

inline std::string image_id(std::int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ISIC_%07lld", static_cast<long long>(i));
    return buf;
}

inline std::string patient_id(std::int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "IP_%07lld", static_cast<long long>(i % kPatients));
    return buf;
}

inline bool is_malignant(std::int64_t i) {
    return i % kMalignantStride == 0 && i < kMalignant * kMalignantStride;
}

inline dcac::Manifest make_isic_scale_manifest() {
    std::vector<dcac::SampleRecord> recs;
    recs.reserve(kImages);
    static const char* sites[] = {"torso", "lower extremity", "upper extremity",
                                  "head/neck", "palms/soles", "oral/genital"};
    for (std::int64_t i = 0; i < kImages; ++i) {
        dcac::SampleRecord r;
        r.image_name = image_id(i);
        r.patient_id = patient_id(i);
        if (i % 11 != 3) r.sex = (i % 2 == 0) ? dcac::Sex::female : dcac::Sex::male;
        if (i % 13 != 5) r.age_approx = 10.0 + 5.0 * static_cast<double>(i % 15);
        if (i % 7 != 2) r.anatom_site = sites[i % 6];
        r.target = is_malignant(i) ? 1 : 0;
        r.diagnosis = r.target == 1 ? "melanoma" : (i % 3 == 0 ? "nevus" : "unknown");
        recs.push_back(std::move(r));
    }
    return dcac::Manifest::from_records(std::move(recs));
}

// 3 malignant ids plus 422 benign ids (all of which exist in the manifest).
inline std::vector<std::string> isic_scale_duplicates() {
    std::vector<std::string> ids;
    ids.push_back(image_id(5 * kMalignantStride));
    ids.push_back(image_id(100 * kMalignantStride));
    ids.push_back(image_id(300 * kMalignantStride));
    for (std::int64_t j = 0; j < 422; ++j) {
        ids.push_back(image_id(kMalignant * kMalignantStride + 3 + j));
    }
    return ids;
}

// Small random manifest for property tests: 2..max_patients patients with
// 1..max_images_each images; each image malignant with probability p_mal.
inline dcac::Manifest make_random_manifest(dcac::Rng& rng, int max_patients = 40,
                                           int max_images_each = 20, double p_mal = 0.15) {
    const auto n_patients = 2 + rng.uniform_below(static_cast<std::uint64_t>(max_patients - 1));
    std::vector<dcac::SampleRecord> recs;
    std::int64_t serial = 0;
    for (std::uint64_t p = 0; p < n_patients; ++p) {
        const auto n_img = 1 + rng.uniform_below(static_cast<std::uint64_t>(max_images_each));
        for (std::uint64_t k = 0; k < n_img; ++k) {
            dcac::SampleRecord r;
            r.image_name = "img_" + std::to_string(serial++);
            r.patient_id = "pat_" + std::to_string(p);
            r.target = rng.bernoulli(p_mal) ? 1 : 0;
            recs.push_back(std::move(r));
        }
    }
    return dcac::Manifest::from_records(std::move(recs));
}

}  // namespace synth
