#include "relvit/eval_report.hpp"

#include <algorithm>
#include <memory>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include <json.hpp>

#include "relvit/errors.hpp"

namespace relvit {

namespace {

using json = nlohmann::json;

Eigen::MatrixXd normalized_rows(const Eigen::MatrixXd& m, const char* what) {
    const Eigen::VectorXd norms = m.rowwise().norm();
    if ((norms.array() == 0.0).any()) {
        throw DomainError(std::string(what) + ": zero-norm vector");
    }
    return (m.array().colwise() / norms.array()).matrix();
}

std::ofstream open_for_write(const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream os(path);
    if (!os) {
        throw std::ios_base::failure("cannot write " + path.string());
    }
    os << std::setprecision(17);
    return os;
}

} // namespace

std::optional<double> average_precision(std::span<const double> scores, std::span<const bool> positives) {
    if (scores.size() != positives.size()) {
        throw DomainError("average_precision: scores and labels differ in length");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    for (double s : scores) {
        if (!std::isfinite(s)) {
            throw DomainError("average_precision: non-finite score");
        }
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const auto total_pos = static_cast<std::size_t>(std::count(positives.begin(), positives.end(), true));
    if (total_pos == 0) {
        return std::nullopt;
    }
    double ap = 0.0;
    std::size_t seen = 0;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::size_t group_pos = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            group_pos += positives[order[j]] ? 1 : 0;
            ++j;
        }
        seen += j - i;
        tp += group_pos;
        ap += static_cast<double>(group_pos) * (static_cast<double>(tp) / static_cast<double>(seen));
        i = j;
    }
    return ap / static_cast<double>(total_pos);
}

MeanApResult mean_ap(std::span<const std::optional<double>> per_class, std::span<const int> subset) {
    std::vector<int> classes(subset.begin(), subset.end());
    if (classes.empty()) {
        classes.resize(per_class.size());
        std::iota(classes.begin(), classes.end(), 0);
    }
    MeanApResult r;
    double total = 0.0;
    for (int c : classes) {
        if (c < 0 || static_cast<std::size_t>(c) >= per_class.size()) {
            throw DomainError("mean_ap: class index out of range");
        }
        if (per_class[static_cast<std::size_t>(c)]) {
            r.included.push_back(c);
            total += *per_class[static_cast<std::size_t>(c)];
        } else {
            r.excluded.push_back(c);
        }
    }
    if (r.included.empty()) {
        throw DomainError("mean_ap: no class in the subset has a positive");
    }
    r.map = total / static_cast<double>(r.included.size());
    return r;
}

std::vector<std::optional<double>> per_class_ap(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels) {
    if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
        throw DomainError("per_class_ap: score and label shapes differ");
    }
    std::vector<std::optional<double>> out;
    std::vector<double> s(static_cast<std::size_t>(scores.rows()));
    std::unique_ptr<bool[]> p(new bool[static_cast<std::size_t>(scores.rows())]);
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
        for (Eigen::Index r = 0; r < scores.rows(); ++r) {
            s[static_cast<std::size_t>(r)] = scores(r, c);
            p[static_cast<std::size_t>(r)] = labels(r, c) > 0.5;
        }
        out.push_back(average_precision(s, std::span<const bool>(p.get(), s.size())));
    }
    return out;
}

double accuracy(const Eigen::MatrixXd& scores, std::span<const int> answers) {
    if (static_cast<std::size_t>(scores.rows()) != answers.size() || answers.empty()) {
        throw DomainError("accuracy: one answer per row required");
    }
    int hits = 0;
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        Eigen::Index best = 0;
        scores.row(r).maxCoeff(&best);
        hits += best == answers[static_cast<std::size_t>(r)] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(answers.size());
}

ClusterReport cluster_separation(const Eigen::MatrixXd& features, std::span<const int> labels) {
    if (static_cast<std::size_t>(features.rows()) != labels.size()) {
        throw DomainError("cluster_separation: one label per feature row required");
    }
    std::map<int, std::vector<Eigen::Index>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        members[labels[i]].push_back(static_cast<Eigen::Index>(i));
    }
    std::vector<std::vector<Eigen::Index>> clusters;
    for (auto& [label, idx] : members) {
        if (idx.size() >= 2) {
            clusters.push_back(std::move(idx));
        }
    }
    if (clusters.size() < 2) {
        throw DomainError("cluster_separation: need >= 2 concepts with >= 2 samples each");
    }
    std::vector<Eigen::Index> rows;
    for (const auto& c : clusters) {
        rows.insert(rows.end(), c.begin(), c.end());
    }
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        sub.row(static_cast<Eigen::Index>(i)) = features.row(rows[i]);
    }
    const Eigen::MatrixXd unit = normalized_rows(sub, "cluster_separation");
    const Eigen::MatrixXd dist = (Eigen::MatrixXd::Ones(unit.rows(), unit.rows()) - unit * unit.transpose()).cwiseMax(0.0);

    // Position of each original cluster within `sub`.
    std::vector<std::pair<Eigen::Index, Eigen::Index>> ranges;
    Eigen::Index offset = 0;
    for (const auto& c : clusters) {
        ranges.emplace_back(offset, static_cast<Eigen::Index>(c.size()));
        offset += static_cast<Eigen::Index>(c.size());
    }
    double total = 0.0;
    bool defined = false;
    for (std::size_t k = 0; k < ranges.size(); ++k) {
        const auto [begin, size] = ranges[k];
        for (Eigen::Index i = begin; i < begin + size; ++i) {
            const double a = (dist.row(i).segment(begin, size).sum()) / static_cast<double>(size - 1);
            double b = INFINITY;
            for (std::size_t o = 0; o < ranges.size(); ++o) {
                if (o == k) {
                    continue;
                }
                const auto [ob, os] = ranges[o];
                b = std::min(b, dist.row(i).segment(ob, os).sum() / static_cast<double>(os));
            }
            const double m = std::max(a, b);
            if (m > 0.0) {
                total += (b - a) / m;
                defined = true;
            }
        }
    }
    if (!defined) {
        throw DomainError("cluster_separation: silhouette undefined (all features coincide)");
    }

    ClusterReport report;
    report.silhouette = total / static_cast<double>(sub.rows());
    report.samples = static_cast<int>(sub.rows());
    report.clusters = static_cast<int>(clusters.size());

    const Eigen::MatrixXd centered = features.rowwise() - features.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, features.rows() - 1.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(features.cols(), 2);
    for (int k = 0; k < 2 && k < features.cols(); ++k) {
        Eigen::VectorXd v = eig.eigenvectors().col(features.cols() - 1 - k);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) {
            v = -v;
        }
        basis.col(k) = v;
    }
    report.projection = centered * basis;
    return report;
}

std::vector<TokenMatch> correspondence(const Eigen::MatrixXd& tokens_a, const Eigen::MatrixXd& tokens_b, int grid_cols,
                                       std::size_t top_k) {
    if (tokens_a.cols() != tokens_b.cols()) {
        throw DomainError("correspondence: token dimensions differ");
    }
    if (grid_cols <= 0) {
        throw DomainError("correspondence: grid_cols must be positive");
    }
    const Eigen::MatrixXd sim =
        normalized_rows(tokens_a, "correspondence") * normalized_rows(tokens_b, "correspondence").transpose();
    std::vector<TokenMatch> out;
    for (Eigen::Index i = 0; i < sim.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < sim.cols(); ++j) {
            if (sim(i, j) > sim(i, best)) {
                best = j;
            }
        }
        const int ia = static_cast<int>(i);
        const int ib = static_cast<int>(best);
        out.push_back({ia, ib, std::clamp(sim(i, best), -1.0, 1.0), ia / grid_cols, ia % grid_cols, ib / grid_cols,
                       ib % grid_cols});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const TokenMatch& a, const TokenMatch& b) { return a.similarity > b.similarity; });
    if (out.size() > top_k) {
        out.resize(top_k);
    }
    return out;
}

void emit_report(const Metrics& metrics, const ReportPaths& paths, const FeatureDump* features,
                 const std::vector<TokenMatch>* matches) {
    json doc = {{"schema_version", kReportSchemaVersion}, {"scalars", json::object()}, {"sections", json::object()}};
    for (const auto& [k, v] : metrics.scalars) {
        doc["scalars"][k] = v;
    }
    for (const auto& [name, section] : metrics.sections) {
        doc["sections"][name] = json::object();
        for (const auto& [k, v] : section) {
            doc["sections"][name][k] = v;
        }
    }
    {
        auto os = open_for_write(paths.metrics);
        os << doc.dump(2) << '\n';
        if (!os) {
            throw std::ios_base::failure("failed writing " + paths.metrics.string());
        }
    }
    if (features != nullptr && paths.features) {
        auto os = open_for_write(*paths.features);
        os << "# relvit-features schema_version=" << kReportSchemaVersion << '\n';
        os << "label";
        for (Eigen::Index c = 0; c < features->features.cols(); ++c) {
            os << "\tf" << c;
        }
        os << '\n';
        for (Eigen::Index r = 0; r < features->features.rows(); ++r) {
            os << features->labels[static_cast<std::size_t>(r)];
            for (Eigen::Index c = 0; c < features->features.cols(); ++c) {
                os << '\t' << features->features(r, c);
            }
            os << '\n';
        }
    }
    if (matches != nullptr && paths.correspondence) {
        auto os = open_for_write(*paths.correspondence);
        os << "# relvit-correspondence schema_version=" << kReportSchemaVersion << '\n';
        os << "index_a\trow_a\tcol_a\tindex_b\trow_b\tcol_b\tsimilarity\n";
        for (const TokenMatch& m : *matches) {
            os << m.index_a << '\t' << m.row_a << '\t' << m.col_a << '\t' << m.index_b << '\t' << m.row_b << '\t'
               << m.col_b << '\t' << m.similarity << '\n';
        }
    }
}

Metrics read_metrics(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::ios_base::failure("cannot read " + path.string());
    }
    const json doc = json::parse(is);
    if (doc.at("schema_version").get<int>() != kReportSchemaVersion) {
        throw DataError("unsupported metrics schema version");
    }
    Metrics m;
    for (const auto& [k, v] : doc.at("scalars").items()) {
        m.scalars[k] = v.get<double>();
    }
    for (const auto& [name, section] : doc.at("sections").items()) {
        auto& dst = m.sections[name];
        for (const auto& [k, v] : section.items()) {
            dst[k] = v.get<double>();
        }
    }
    return m;
}

} // namespace relvit
