#include "dcac/datapipe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace dcac {

namespace {

// Splits CSV text into records of fields, honoring double-quoted fields
// (commas and newlines inside quotes, "" as an escaped quote).
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> fields;
    std::string field;
    bool in_quotes = false;
    bool field_was_quoted = false;

    auto end_field = [&] {
        fields.push_back(field);
        field.clear();
        field_was_quoted = false;
    };
    auto end_record = [&] {
        end_field();
        // A record that is a single empty unquoted field is a blank line
        // (or the trailing newline); it carries no data.
        if (!(fields.size() == 1 && fields[0].empty() && !field_was_quoted)) {
            records.push_back(std::move(fields));
        }
        fields.clear();
    };

    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"' && field.empty()) {
            in_quotes = true;
            field_was_quoted = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\n') {
            end_record();
        } else if (c == '\r') {
            if (i + 1 < text.size() && text[i + 1] == '\n') {
                end_record();
                ++i;
            } else {
                field.push_back(c);
            }
        } else {
            field.push_back(c);
        }
    }
    if (in_quotes) raise(ErrorCode::DataError, "manifest: unterminated quoted field");
    if (!field.empty() || !fields.empty()) end_record();
    return records;
}

[[noreturn]] void bad_row(std::size_t row, const std::string& what) {
    raise(ErrorCode::DataError, "manifest row " + std::to_string(row) + ": " + what);
}

double parse_age(const std::string& s, std::size_t row) {
    double v = 0;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [p, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || p != end || !std::isfinite(v) || v < 0) {
        bad_row(row, "bad age_approx '" + s + "'");
    }
    return v;
}

std::string fmt_age(double v) {
    char buf[64];
    if (v == std::floor(v) && std::abs(v) < 1e15) {
        std::snprintf(buf, sizeof buf, "%.1f", v);
        return buf;
    }
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

// Quotes a field only when the CSV grammar requires it.
std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += '"';
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::IoError, "cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

const char* to_string(Sex s) { return s == Sex::female ? "female" : "male"; }

Manifest Manifest::from_records(std::vector<SampleRecord> recs) {
    Manifest m;
    m.records = std::move(recs);
    std::unordered_set<std::string> seen;
    seen.reserve(m.records.size());
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        if (!seen.insert(r.image_name).second) {
            raise(ErrorCode::DataError, "manifest: duplicate image_name '" + r.image_name + "'");
        }
        m.by_patient[r.patient_id].push_back(i);
    }
    return m;
}

std::int64_t Manifest::count_malignant() const {
    std::int64_t n = 0;
    for (const auto& r : records) n += r.target;
    return n;
}

std::int64_t Manifest::count_benign() const {
    return static_cast<std::int64_t>(records.size()) - count_malignant();
}

Manifest parse_manifest(const std::string& csv_text) {
    auto rows = parse_csv(csv_text);
    if (rows.empty()) raise(ErrorCode::DataError, "manifest: empty file, expected a header row");

    const auto& header = rows.front();
    auto col = [&](const std::string& name) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        return std::nullopt;
    };
    auto required = [&](const std::string& name) {
        auto c = col(name);
        if (!c) raise(ErrorCode::DataError, "manifest: missing required column '" + name + "'");
        return *c;
    };

    const std::size_t c_image = required("image_name");
    const std::size_t c_patient = required("patient_id");
    const std::size_t c_target = required("target");
    const auto c_sex = col("sex");
    const auto c_age = col("age_approx");
    auto c_site = col("anatom_site_general_challenge");
    if (!c_site) c_site = col("anatom_site");
    const auto c_diag = col("diagnosis");
    const auto c_bm = col("benign_malignant");

    std::vector<SampleRecord> recs;
    recs.reserve(rows.size() - 1);
    for (std::size_t idx = 1; idx < rows.size(); ++idx) {
        const auto& row = rows[idx];
        const std::size_t rowno = idx + 1;  // header is row 1
        if (row.size() != header.size()) {
            bad_row(rowno, "expected " + std::to_string(header.size()) + " fields, got " +
                               std::to_string(row.size()));
        }
        SampleRecord r;
        r.image_name = row[c_image];
        if (r.image_name.empty()) bad_row(rowno, "empty image_name");
        r.patient_id = row[c_patient];
        if (r.patient_id.empty()) bad_row(rowno, "empty patient_id");

        const std::string& t = row[c_target];
        if (t == "0") r.target = 0;
        else if (t == "1") r.target = 1;
        else bad_row(rowno, "target must be 0 or 1, got '" + t + "'");

        if (c_sex && !row[*c_sex].empty()) {
            const std::string& s = row[*c_sex];
            if (s == "female") r.sex = Sex::female;
            else if (s == "male") r.sex = Sex::male;
            else bad_row(rowno, "bad sex '" + s + "'");
        }
        if (c_age && !row[*c_age].empty()) r.age_approx = parse_age(row[*c_age], rowno);
        if (c_site && !row[*c_site].empty()) r.anatom_site = row[*c_site];
        if (c_diag && !row[*c_diag].empty()) r.diagnosis = row[*c_diag];
        if (c_bm && !row[*c_bm].empty()) {
            const std::string& bm = row[*c_bm];
            if (bm != "benign" && bm != "malignant") bad_row(rowno, "bad benign_malignant '" + bm + "'");
            if ((bm == "malignant") != (r.target == 1)) {
                bad_row(rowno, "benign_malignant '" + bm + "' contradicts target " + t);
            }
        }
        recs.push_back(std::move(r));
    }
    return Manifest::from_records(std::move(recs));
}

Manifest load_manifest(const std::string& csv_path) { return parse_manifest(read_file(csv_path)); }

std::string manifest_to_csv(const Manifest& m) {
    std::string out =
        "image_name,patient_id,sex,age_approx,anatom_site_general_challenge,diagnosis,"
        "benign_malignant,target\n";
    for (const auto& r : m.records) {
        out += csv_field(r.image_name);
        out += ',';
        out += csv_field(r.patient_id);
        out += ',';
        if (r.sex) out += to_string(*r.sex);
        out += ',';
        if (r.age_approx) out += fmt_age(*r.age_approx);
        out += ',';
        if (r.anatom_site) out += csv_field(*r.anatom_site);
        out += ',';
        if (r.diagnosis) out += csv_field(*r.diagnosis);
        out += ',';
        out += (r.target == 1 ? "malignant" : "benign");
        out += ',';
        out += std::to_string(r.target);
        out += '\n';
    }
    return out;
}

void write_manifest_csv(const std::string& path, const Manifest& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) raise(ErrorCode::IoError, "cannot write file: " + path);
    out << manifest_to_csv(m);
    if (!out) raise(ErrorCode::IoError, "write failed: " + path);
}

std::vector<std::string> load_id_list(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<std::string> ids;
    std::string line;
    std::istringstream in(text);
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        ids.push_back(line);
    }
    return ids;
}

Manifest remove_duplicates(const Manifest& m, const std::vector<std::string>& duplicate_ids,
                           DedupReport* report) {
    std::unordered_set<std::string> drop(duplicate_ids.begin(), duplicate_ids.end());
    std::vector<SampleRecord> kept;
    kept.reserve(m.records.size());
    std::int64_t removed = 0;
    for (const auto& r : m.records) {
        if (drop.count(r.image_name)) {
            ++removed;
        } else {
            kept.push_back(r);
        }
    }
    if (report) {
        report->removed = removed;
        report->absent = static_cast<std::int64_t>(drop.size()) - removed;
    }
    return Manifest::from_records(std::move(kept));
}

namespace {

struct PatientStat {
    std::string id;
    std::int64_t images = 0;
    std::int64_t malignant = 0;
};

}  // namespace

std::pair<Manifest, Manifest> patient_split(const Manifest& m, double val_frac,
                                            std::uint64_t seed) {
    if (!(val_frac > 0.0 && val_frac < 1.0)) {
        raise(ErrorCode::UsageError,
              "patient_split: val_frac must lie in (0,1), got " + std::to_string(val_frac));
    }
    if (m.by_patient.size() < 2) {
        raise(ErrorCode::DataError,
              "patient_split: need at least two patients to split, got " +
                  std::to_string(m.by_patient.size()));
    }

    // Stable starting order regardless of hash-map iteration, then a seeded
    // shuffle so different seeds explore different assignments.
    std::vector<PatientStat> patients;
    patients.reserve(m.by_patient.size());
    for (const auto& [id, idxs] : m.by_patient) {
        PatientStat p;
        p.id = id;
        p.images = static_cast<std::int64_t>(idxs.size());
        for (auto i : idxs) p.malignant += m.records[i].target;
        patients.push_back(std::move(p));
    }
    std::sort(patients.begin(), patients.end(),
              [](const PatientStat& a, const PatientStat& b) { return a.id < b.id; });
    Rng rng(derive_seed(seed, 0x5917));
    for (std::size_t i = patients.size(); i > 1; --i) {
        std::swap(patients[i - 1], patients[rng.uniform_below(i)]);
    }
    // Place malignant-bearing patients first, largest malignant load first,
    // while the greedy still has slack; ties keep the shuffled order.
    std::stable_sort(patients.begin(), patients.end(),
                     [](const PatientStat& a, const PatientStat& b) {
                         return (a.malignant > 0 ? -a.malignant : 1) <
                                (b.malignant > 0 ? -b.malignant : 1);
                     });

    const double n_total = static_cast<double>(m.records.size());
    const double m_total = static_cast<double>(m.count_malignant());
    struct Side {
        double img = 0;
        double mal = 0;
        double t_img;
        double t_mal;
        std::vector<const PatientStat*> members;
    };
    Side val{0, 0, val_frac * n_total, val_frac * m_total, {}};
    Side train{0, 0, (1 - val_frac) * n_total, (1 - val_frac) * m_total, {}};

    // Normalized squared distance of both sides from their targets; each
    // patient goes to whichever side leaves the total error smaller.
    auto cost = [&](const Side& s, double extra_img, double extra_mal) {
        const double ei = (s.img + extra_img - s.t_img) / std::max(1.0, n_total);
        const double em = (s.mal + extra_mal - s.t_mal) / std::max(1.0, m_total);
        return ei * ei + em * em;
    };
    for (const auto& p : patients) {
        const double pi = static_cast<double>(p.images);
        const double pm = static_cast<double>(p.malignant);
        const double if_val = cost(val, pi, pm) + cost(train, 0, 0);
        const double if_train = cost(val, 0, 0) + cost(train, pi, pm);
        Side& dst = (if_val <= if_train) ? val : train;
        dst.img += pi;
        dst.mal += pm;
        dst.members.push_back(&p);
    }
    // Both sides must exist; steal the smallest patient if one ended empty.
    auto rescue = [](Side& empty, Side& donor) {
        if (!empty.members.empty()) return;
        auto it = std::min_element(donor.members.begin(), donor.members.end(),
                                   [](const PatientStat* a, const PatientStat* b) {
                                       return std::tie(a->images, a->id) <
                                              std::tie(b->images, b->id);
                                   });
        const PatientStat* moved = *it;
        donor.members.erase(it);
        donor.img -= static_cast<double>(moved->images);
        donor.mal -= static_cast<double>(moved->malignant);
        empty.members.push_back(moved);
        empty.img += static_cast<double>(moved->images);
        empty.mal += static_cast<double>(moved->malignant);
    };
    rescue(val, train);
    rescue(train, val);

    std::unordered_set<std::string> val_ids;
    for (const auto* p : val.members) val_ids.insert(p->id);

    std::vector<SampleRecord> train_recs;
    std::vector<SampleRecord> val_recs;
    for (const auto& r : m.records) {
        (val_ids.count(r.patient_id) ? val_recs : train_recs).push_back(r);
    }
    return {Manifest::from_records(std::move(train_recs)),
            Manifest::from_records(std::move(val_recs))};
}

nlohmann::json split_summary(const Manifest& train, const Manifest& val, double val_frac,
                             std::uint64_t seed) {
    auto side = [](const Manifest& s) {
        return nlohmann::json{{"images", s.size()},
                              {"benign", s.count_benign()},
                              {"malignant", s.count_malignant()},
                              {"patients", s.by_patient.size()}};
    };
    return nlohmann::json{
        {"seed", seed}, {"val_frac", val_frac}, {"train", side(train)}, {"val", side(val)}};
}

BalancedSampler::BalancedSampler(const Manifest& m, std::uint64_t seed) : rng_(seed) {
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        (m.records[i].target == 1 ? malignant_ : benign_).push_back(i);
    }
    if (benign_.empty() || malignant_.empty()) {
        raise(ErrorCode::DataError,
              "balanced sampler needs both classes present, got " +
                  std::to_string(benign_.size()) + " benign and " +
                  std::to_string(malignant_.size()) + " malignant");
    }
}

std::size_t BalancedSampler::next() {
    // Fair class coin then uniform within the class: every record's
    // probability is proportional to the inverse of its class size.
    const auto& pool = rng_.bernoulli(0.5) ? malignant_ : benign_;
    return pool[rng_.uniform_below(pool.size())];
}

}  // namespace dcac
