#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "medpipe/segdb.hpp"

namespace medpipe::stats {

/// Regularized incomplete beta I_x(a, b).
double regularized_incomplete_beta(double a, double b, double x);

/// One-sided survival P(T > t) of Student's t with `df` degrees of freedom.
double student_t_sf(double t, double df);

enum class TTestVariant { Welch, Pooled };

struct TTestResult {
    double estimate = 0.0; // mean(group1) - mean(group2)
    double t = 0.0;
    double df = 0.0;
    double p = 1.0; // two-sided
    int n1 = 0;
    int n2 = 0;
};

/// Independent two-sample t-test. Welch (unequal variance) by default;
/// pooled-variance selectable. DegenerateGroup on n < 2 or zero variance in
/// both groups.
TTestResult t_test_independent(std::span<const double> group1, std::span<const double> group2,
                               TTestVariant variant = TTestVariant::Welch);

/// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

enum class SpearmanPValue { TApprox, ExactPermutation };

struct SpearmanResult {
    double rho = 0.0;
    double p = 1.0;
    int n = 0;
};

/// Spearman rank correlation with average-rank tie handling. p two-sided via
/// the t approximation; exact permutation enumeration available for n <= 9.
SpearmanResult spearman(std::span<const double> x, std::span<const double> y,
                        SpearmanPValue method = SpearmanPValue::TApprox);

// Cohort evaluation (prediction vs reference volumes + clinical covariates).

/// Binds numeric voxel labels to segment-registry ids and describes the
/// prediction→reference label harmonization.
struct EvalConfig {
    std::map<long long, std::string> reference_labels;   // numeric -> segdb id
    std::map<long long, std::string> prediction_labels;  // defaults to reference_labels
    std::map<std::string, std::string> aggregation;      // segdb id -> segdb id
};

EvalConfig load_eval_config(const std::filesystem::path& file, const SegmentRegistry& segdb);

struct CohortRow {
    std::string case_id;
    std::string model;
    std::string segment_id;
    double dice = 0.0;
    std::map<std::string, std::string> covariates;
};

struct CohortResult {
    std::vector<CohortRow> rows;
    std::vector<std::pair<std::string, std::string>> excluded; // case id, reason
    int geometry_exclusions = 0;
    int missing_reference = 0;
    int missing_prediction = 0;
    std::vector<std::string> warnings;
};

/// Pairs `<case_id>.nii[.gz]` across the two directories, harmonizes
/// prediction labels per config, computes per-segment Dice, joins covariates
/// from the clinical CSV (required column: case_id).
CohortResult evaluate_cohort(const std::filesystem::path& pred_dir,
                             const std::filesystem::path& ref_dir,
                             const std::optional<std::filesystem::path>& clinical_csv,
                             const EvalConfig& config, const SegmentRegistry& segdb,
                             const std::string& model_name);

struct TTestRow {
    std::string model;
    std::string grouping;
    TTestResult result;
};

struct CorrelationRow {
    std::string model;
    SpearmanResult result;
};

/// Writes cohort.csv, ttests.csv (header `model,grouping,estimate,p`), and
/// correlations.csv (header `model,cor_s,p_s,n`) under `out_dir`.
void export_stats(const std::vector<CohortRow>& rows, const std::vector<TTestRow>& tests,
                  const std::vector<CorrelationRow>& correlations,
                  const std::filesystem::path& out_dir);

} // namespace medpipe::stats
