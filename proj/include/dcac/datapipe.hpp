#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dcac/error.hpp"
#include "dcac/rng.hpp"

namespace dcac {

enum class Sex { female, male };

const char* to_string(Sex s);

// One row of the ISIC 2020 training table. Optional fields keep their
// absence explicit instead of smuggling sentinel values.
struct SampleRecord {
    std::string image_name;
    std::string patient_id;
    std::optional<Sex> sex;
    std::optional<double> age_approx;
    std::optional<std::string> anatom_site;
    std::optional<std::string> diagnosis;
    int target = 0;  // 1 = malignant

    bool operator==(const SampleRecord&) const = default;
};

// Ordered collection of records plus a derived patient index.
struct Manifest {
    std::vector<SampleRecord> records;
    std::unordered_map<std::string, std::vector<std::size_t>> by_patient;

    // Builds the patient index and enforces unique image names.
    static Manifest from_records(std::vector<SampleRecord> recs);

    std::size_t size() const { return records.size(); }
    std::int64_t count_malignant() const;
    std::int64_t count_benign() const;
};

// Parses CSV text in the ISIC 2020 layout. The header must contain
// image_name, patient_id and target; other columns are optional.
// Malformed rows are rejected with their line number.
Manifest parse_manifest(const std::string& csv_text);
Manifest load_manifest(const std::string& csv_path);

// Serializes in the canonical ISIC column order. parse(serialize(m)) == m.
std::string manifest_to_csv(const Manifest& m);
void write_manifest_csv(const std::string& path, const Manifest& m);

// Newline-delimited image_name file (comments and blank lines skipped).
std::vector<std::string> load_id_list(const std::string& path);

struct DedupReport {
    std::int64_t removed = 0;  // listed ids found and dropped
    std::int64_t absent = 0;   // listed ids not present in the manifest
};

// Drops every record whose image_name appears in duplicate_ids, preserving
// the order of the remainder. Ids that match nothing are only counted.
Manifest remove_duplicates(const Manifest& m, const std::vector<std::string>& duplicate_ids,
                           DedupReport* report = nullptr);

// Splits by patient so no patient straddles the two sides. A seeded greedy
// assignment targets the requested validation image fraction and keeps the
// malignant fraction close to it; deterministic per seed.
std::pair<Manifest, Manifest> patient_split(const Manifest& m, double val_frac,
                                            std::uint64_t seed);

// Summary of a finished split: seed plus per-side class counts.
nlohmann::json split_summary(const Manifest& train, const Manifest& val, double val_frac,
                             std::uint64_t seed);

// Infinite index stream where each record is drawn with probability
// inversely proportional to its class size, so both classes appear with
// equal frequency regardless of imbalance.
class BalancedSampler {
  public:
    BalancedSampler(const Manifest& m, std::uint64_t seed);

    std::size_t next();

  private:
    std::vector<std::size_t> benign_;
    std::vector<std::size_t> malignant_;
    Rng rng_;
};

}  // namespace dcac
