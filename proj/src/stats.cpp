#include "medpipe/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <yaml-cpp/yaml.h>

#include "medpipe/csv.hpp"
#include "medpipe/error.hpp"
#include "medpipe/fsutil.hpp"
#include "medpipe/volume.hpp"

namespace medpipe::stats {

namespace {

// Continued-fraction evaluation for the incomplete beta (modified Lentz).
double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 3e-16;
    constexpr double kTiny = 1e-300;

    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

double sample_variance(std::span<const double> v, double mean) {
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return acc / double(v.size() - 1);
}

double two_sided_t_pvalue(double t, double df) {
    if (!std::isfinite(t)) return 0.0;
    double x = df / (df + t * t);
    return regularized_incomplete_beta(df / 2.0, 0.5, x);
}

double pearson(std::span<const double> x, std::span<const double> y) {
    double mx = mean_of(x), my = mean_of(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        fail("ConstantInput", "zero rank variance, correlation undefined");
    }
    return sxy / std::sqrt(sxx * syy);
}

} // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log1p(-x);
    double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_cf(a, b, x) / a;
    }
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_sf(double t, double df) {
    if (t < 0) return 1.0 - student_t_sf(-t, df);
    return 0.5 * two_sided_t_pvalue(t, df);
}

TTestResult t_test_independent(std::span<const double> group1, std::span<const double> group2,
                               TTestVariant variant) {
    auto n1 = group1.size(), n2 = group2.size();
    if (n1 < 2 || n2 < 2) {
        fail("DegenerateGroup", "each group needs at least 2 observations (got " +
                                    std::to_string(n1) + " and " + std::to_string(n2) + ")");
    }
    double m1 = mean_of(group1), m2 = mean_of(group2);
    double v1 = sample_variance(group1, m1), v2 = sample_variance(group2, m2);
    if (v1 == 0.0 && v2 == 0.0) {
        fail("DegenerateGroup", "zero variance in both groups");
    }

    TTestResult res;
    res.n1 = int(n1);
    res.n2 = int(n2);
    res.estimate = m1 - m2;
    double fn1 = double(n1), fn2 = double(n2);
    if (variant == TTestVariant::Welch) {
        double se1 = v1 / fn1, se2 = v2 / fn2;
        res.t = res.estimate / std::sqrt(se1 + se2);
        res.df = (se1 + se2) * (se1 + se2) /
                 (se1 * se1 / (fn1 - 1.0) + se2 * se2 / (fn2 - 1.0));
    } else {
        res.df = fn1 + fn2 - 2.0;
        double pooled = ((fn1 - 1.0) * v1 + (fn2 - 1.0) * v2) / res.df;
        res.t = res.estimate / (std::sqrt(pooled) * std::sqrt(1.0 / fn1 + 1.0 / fn2));
    }
    res.p = two_sided_t_pvalue(res.t, res.df);
    return res;
}

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

    std::vector<double> ranks(values.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        double avg = (double(i + 1) + double(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

SpearmanResult spearman(std::span<const double> x, std::span<const double> y,
                        SpearmanPValue method) {
    if (x.size() != y.size()) {
        fail("LengthMismatch", "input lengths differ: " + std::to_string(x.size()) + " vs " +
                                   std::to_string(y.size()));
    }
    if (x.size() < 3) fail("TooFewSamples", "need n >= 3 for a correlation p-value");

    auto rx = average_ranks(x);
    auto ry = average_ranks(y);
    SpearmanResult res;
    res.n = int(x.size());
    res.rho = pearson(rx, ry);

    if (method == SpearmanPValue::ExactPermutation) {
        if (x.size() > 9) {
            fail("TooManySamples", "exact permutation p limited to n <= 9");
        }
        std::vector<std::size_t> perm(y.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::vector<double> permuted(y.size());
        long long hits = 0, total = 0;
        double target = std::abs(res.rho) - 1e-12;
        do {
            for (std::size_t i = 0; i < perm.size(); ++i) permuted[i] = ry[perm[i]];
            double rho = pearson(rx, permuted);
            if (std::abs(rho) >= target) ++hits;
            ++total;
        } while (std::next_permutation(perm.begin(), perm.end()));
        res.p = double(hits) / double(total);
        return res;
    }

    double denom = 1.0 - res.rho * res.rho;
    if (denom <= 0.0) {
        res.p = 0.0;
        return res;
    }
    double t = res.rho * std::sqrt(double(res.n - 2) / denom);
    res.p = two_sided_t_pvalue(t, double(res.n - 2));
    return res;
}

EvalConfig load_eval_config(const std::filesystem::path& file, const SegmentRegistry& segdb) {
    YAML::Node root;
    try {
        root = YAML::LoadFile(file.string());
    } catch (const YAML::Exception& e) {
        fail("SchemaError", "cannot parse evaluation config: " + std::string(e.what()));
    }
    if (!root["labels"] || !root["labels"].IsMap()) {
        fail("SchemaError", "evaluation config requires a `labels` map (numeric -> segment id)");
    }
    EvalConfig config;
    auto read_label_map = [&](const YAML::Node& node, std::map<long long, std::string>& out) {
        for (const auto& kv : node) {
            long long numeric;
            try {
                numeric = kv.first.as<long long>();
            } catch (const YAML::Exception&) {
                fail("SchemaError", "label keys must be integers");
            }
            std::string token = kv.second.as<std::string>();
            segdb.lookup(token); // UnknownSegmentId on bad tokens
            out[numeric] = token;
        }
    };
    read_label_map(root["labels"], config.reference_labels);
    if (root["prediction_labels"]) {
        read_label_map(root["prediction_labels"], config.prediction_labels);
    } else {
        config.prediction_labels = config.reference_labels;
    }
    if (root["aggregation"]) {
        for (const auto& kv : root["aggregation"]) {
            std::string from = kv.first.as<std::string>();
            std::string to = kv.second.as<std::string>();
            segdb.lookup(from);
            segdb.lookup(to);
            config.aggregation[from] = to;
        }
    }
    // Every harmonized token must land on a reference label.
    auto ref_numeric_for = [&](const std::string& token) -> bool {
        for (const auto& [num, tok] : config.reference_labels) {
            if (tok == token) return true;
        }
        return false;
    };
    for (const auto& [num, token] : config.prediction_labels) {
        std::string target = config.aggregation.count(token) ? config.aggregation.at(token) : token;
        if (!ref_numeric_for(target)) {
            fail("SchemaError", "prediction label " + token + " harmonizes to " + target +
                                    ", which is not a reference label");
        }
    }
    return config;
}

namespace {

bool is_volume_file(const std::string& name) {
    return name.ends_with(".nii") || name.ends_with(".nii.gz");
}

std::map<std::string, std::filesystem::path> volume_cases(const std::filesystem::path& dir) {
    std::map<std::string, std::filesystem::path> out;
    for (const auto& rel : fs::list_files(dir)) {
        if (is_volume_file(rel)) out[fs::stem_of(rel)] = dir / rel;
    }
    return out;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return s;
}

} // namespace

CohortResult evaluate_cohort(const std::filesystem::path& pred_dir,
                             const std::filesystem::path& ref_dir,
                             const std::optional<std::filesystem::path>& clinical_csv,
                             const EvalConfig& config, const SegmentRegistry& segdb,
                             const std::string& model_name) {
    for (const auto& [num, token] : config.reference_labels) segdb.lookup(token);

    std::map<std::string, std::map<std::string, std::string>> covariates;
    if (clinical_csv) {
        auto rows = csv::parse(fs::read_text(*clinical_csv));
        if (rows.empty()) fail("SchemaError", "clinical CSV is empty");
        const auto& header = rows[0];
        auto id_col = std::find(header.begin(), header.end(), "case_id");
        if (id_col == header.end()) {
            fail("SchemaError", "clinical CSV lacks required case_id column");
        }
        std::size_t id_idx = std::size_t(id_col - header.begin());
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() != header.size()) {
                fail("SchemaError", "clinical CSV row " + std::to_string(r + 1) +
                                        " has wrong field count");
            }
            auto& entry = covariates[rows[r][id_idx]];
            for (std::size_t c = 0; c < header.size(); ++c) {
                if (c == id_idx) continue;
                entry[lower(header[c])] = rows[r][c];
            }
        }
    }

    // Lower the token-level harmonization to a numeric relabel map.
    std::map<std::string, long long> ref_numeric;
    for (const auto& [num, token] : config.reference_labels) ref_numeric[token] = num;
    std::map<long long, long long> relabel;
    for (const auto& [num, token] : config.prediction_labels) {
        std::string target = config.aggregation.count(token) ? config.aggregation.at(token) : token;
        auto it = ref_numeric.find(target);
        if (it == ref_numeric.end()) {
            fail("SchemaError", "prediction label " + token + " harmonizes to " + target +
                                    ", which is not a reference label");
        }
        relabel[num] = it->second;
    }

    auto preds = volume_cases(pred_dir);
    auto refs = volume_cases(ref_dir);
    std::set<std::string> case_ids;
    for (const auto& [id, p] : preds) case_ids.insert(id);
    for (const auto& [id, p] : refs) case_ids.insert(id);

    CohortResult result;
    for (const auto& case_id : case_ids) {
        auto pi = preds.find(case_id);
        auto ri = refs.find(case_id);
        if (ri == refs.end()) {
            result.excluded.emplace_back(case_id, "MissingReference");
            ++result.missing_reference;
            continue;
        }
        if (pi == preds.end()) {
            result.excluded.emplace_back(case_id, "MissingPrediction");
            ++result.missing_prediction;
            continue;
        }
        VolumeGrid pred, ref;
        try {
            pred = read_nifti(pi->second);
            ref = read_nifti(ri->second);
        } catch (const Error& e) {
            result.excluded.emplace_back(case_id, std::string("unreadable: ") + e.what());
            result.warnings.push_back(case_id + ": " + e.what());
            continue;
        }
        if (pred.dims != ref.dims || !affine_close(pred, ref)) {
            result.excluded.emplace_back(case_id, "geometry mismatch");
            ++result.geometry_exclusions;
            continue;
        }
        VolumeGrid harmonized = merge_labels(pred, relabel);
        std::vector<long long> ids;
        for (const auto& [num, token] : config.reference_labels) ids.push_back(num);
        auto dice_rows = per_segment_dice(harmonized, ref, ids);
        for (const auto& row : dice_rows) {
            CohortRow out;
            out.case_id = case_id;
            out.model = model_name;
            out.segment_id = config.reference_labels.at(row.segment_id);
            out.dice = row.dice;
            auto cov = covariates.find(case_id);
            if (cov != covariates.end()) out.covariates = cov->second;
            result.rows.push_back(std::move(out));
        }
    }
    return result;
}

void export_stats(const std::vector<CohortRow>& rows, const std::vector<TTestRow>& tests,
                  const std::vector<CorrelationRow>& correlations,
                  const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);

    std::set<std::string> covariate_keys;
    for (const auto& row : rows) {
        for (const auto& [k, v] : row.covariates) covariate_keys.insert(k);
    }
    std::string cohort;
    {
        std::vector<std::string> header{"case_id", "model", "segment_id", "dice"};
        header.insert(header.end(), covariate_keys.begin(), covariate_keys.end());
        cohort += csv::format_row(header);
        for (const auto& row : rows) {
            std::vector<std::string> fields{row.case_id, row.model, row.segment_id,
                                            csv::format_double(row.dice)};
            for (const auto& key : covariate_keys) {
                auto it = row.covariates.find(key);
                fields.push_back(it == row.covariates.end() ? "" : it->second);
            }
            cohort += csv::format_row(fields);
        }
    }
    fs::write_text(out_dir / "cohort.csv", cohort);

    std::string ttests = "model,grouping,estimate,p\n";
    for (const auto& row : tests) {
        ttests += csv::format_row({row.model, row.grouping,
                                   csv::format_double(row.result.estimate),
                                   csv::format_double(row.result.p)});
    }
    fs::write_text(out_dir / "ttests.csv", ttests);

    std::string corr = "model,cor_s,p_s,n\n";
    for (const auto& row : correlations) {
        corr += csv::format_row({row.model, csv::format_double(row.result.rho),
                                 csv::format_double(row.result.p),
                                 std::to_string(row.result.n)});
    }
    fs::write_text(out_dir / "correlations.csv", corr);
}

} // namespace medpipe::stats
