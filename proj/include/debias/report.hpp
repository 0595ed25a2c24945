#pragma once

// Per-class accuracy, lambda sweeps, and table rendering.

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "debias/data.hpp"
#include "debias/nn.hpp"
#include "debias/pipeline.hpp"

namespace debias {

struct ClassMetrics {
    std::map<ClassId, double> per_class;
    std::map<ClassId, std::size_t> n_per_class;
    double overall = 0.0;
    std::string model_label;

    // Mean accuracy over the given classes.
    double mean_over(std::span<const ClassId> classes) const {
        double s = 0.0;
        for (ClassId c : classes) {
            s += per_class.at(c);
        }
        return s / static_cast<double>(classes.size());
    }

    friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

using PredictFn = std::function<std::vector<ClassId>(const Matrix&)>;

/// Counts correct predictions per class. Classes without test samples are
/// absent from the maps.
inline ClassMetrics evaluate(const PredictFn& predict_fn, const Dataset& test, std::string label) {
    test.validate();
    const std::vector<ClassId> predicted = predict_fn(test.features);
    if (predicted.size() != test.size()) {
        throw DimensionError("predictor returned " + std::to_string(predicted.size()) + " labels for " +
                             std::to_string(test.size()) + " samples");
    }
    std::map<ClassId, std::size_t> correct;
    ClassMetrics m;
    m.model_label = std::move(label);
    std::size_t total_correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const ClassId y = test.labels[i];
        ++m.n_per_class[y];
        if (predicted[i] == y) {
            ++correct[y];
            ++total_correct;
        }
    }
    for (const auto& [c, n] : m.n_per_class) {
        m.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(n);
    }
    m.overall = static_cast<double>(total_correct) / static_cast<double>(test.size());
    return m;
}

inline ClassMetrics evaluate_model(const ParamVector& model, const Dataset& test, std::string label) {
    return evaluate([&](const Matrix& x) { return predict(model, x); }, test, std::move(label));
}

struct SweepResult {
    std::vector<double> lambdas;
    std::vector<ClassMetrics> metrics;
    std::vector<double> anchor_distance;  // ||theta - anchor|| of each fine-tuned model
};

/// One regularized fine-tune and evaluation per lambda. Every entry uses
/// the same training seed so lambda is the only thing that varies.
inline SweepResult lambda_sweep(const ParamVector& anchor, const Dataset& subset, const Dataset& test,
                                std::span<const double> lambdas, const TrainConfig& config, double beta = 0.0) {
    if (lambdas.empty()) {
        throw ValueError("lambda grid is empty");
    }
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        if (!(lambdas[i] >= 0.0) || (i > 0 && !(lambdas[i] > lambdas[i - 1]))) {
            throw ValueError("lambda grid must be nonnegative and strictly increasing");
        }
    }
    SweepResult out;
    for (double lambda : lambdas) {
        RegConfig reg;
        reg.lambda = lambda;
        reg.beta = beta;
        reg.anchor = anchor;
        const ParamVector model = finetune_regularized(anchor, subset, reg, config).model;
        char label[64];
        std::snprintf(label, sizeof(label), "lambda=%g", lambda);
        out.lambdas.push_back(lambda);
        out.metrics.push_back(evaluate_model(model, test, label));
        out.anchor_distance.push_back(anchor_distance(model, anchor));
    }
    return out;
}

enum class ReportFormat { markdown, csv };

inline std::string format_percent(double accuracy) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * accuracy);
    return buf;
}

/// One line per model, one column per class plus Overall, accuracies as
/// percentages with two decimals.
inline std::string render_report(std::span<const ClassMetrics> rows, std::span<const std::string> class_names,
                                 ReportFormat format) {
    if (rows.empty()) {
        throw ValueError("report has no rows");
    }
    std::vector<ClassId> classes;
    for (const auto& [c, acc] : rows.front().per_class) {
        classes.push_back(c);
    }
    for (const auto& row : rows) {
        if (row.per_class.size() != classes.size()) {
            throw ValueError("report rows cover different classes");
        }
        for (ClassId c : classes) {
            if (!row.per_class.contains(c)) {
                throw ValueError("report rows cover different classes");
            }
        }
    }
    auto name_of = [&](ClassId c) {
        const auto i = static_cast<std::size_t>(c);
        return i < class_names.size() ? class_names[i] : "class " + std::to_string(c);
    };
    std::string out;
    if (format == ReportFormat::markdown) {
        out += "| Model |";
        for (ClassId c : classes) {
            out += " " + name_of(c) + " |";
        }
        out += " Overall |\n|---|";
        for (std::size_t i = 0; i < classes.size(); ++i) {
            out += "---:|";
        }
        out += "---:|\n";
        for (const auto& row : rows) {
            out += "| " + row.model_label + " |";
            for (ClassId c : classes) {
                out += " " + format_percent(row.per_class.at(c)) + " |";
            }
            out += " " + format_percent(row.overall) + " |\n";
        }
    } else {
        out += "Model";
        for (ClassId c : classes) {
            out += "," + name_of(c);
        }
        out += ",Overall\n";
        for (const auto& row : rows) {
            out += row.model_label;
            for (ClassId c : classes) {
                out += "," + format_percent(row.per_class.at(c));
            }
            out += "," + format_percent(row.overall) + "\n";
        }
    }
    return out;
}

struct PlotSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;  // (lambda, accuracy)
};

// One series per selected class, then one for overall accuracy.
inline std::vector<PlotSeries> sweep_plot_data(const SweepResult& sweep, std::span<const ClassId> classes,
                                               std::span<const std::string> class_names = {}) {
    std::vector<PlotSeries> series;
    for (ClassId c : classes) {
        if (sweep.metrics.empty() || !sweep.metrics.front().per_class.contains(c)) {
            throw ValueError("class " + std::to_string(c) + " is not part of the sweep");
        }
        const auto i = static_cast<std::size_t>(c);
        PlotSeries s{i < class_names.size() ? class_names[i] : "class_" + std::to_string(c), {}};
        for (std::size_t k = 0; k < sweep.lambdas.size(); ++k) {
            s.points.emplace_back(sweep.lambdas[k], sweep.metrics[k].per_class.at(c));
        }
        series.push_back(std::move(s));
    }
    PlotSeries overall{"overall", {}};
    for (std::size_t k = 0; k < sweep.lambdas.size(); ++k) {
        overall.points.emplace_back(sweep.lambdas[k], sweep.metrics[k].overall);
    }
    series.push_back(std::move(overall));
    return series;
}

inline std::string shortest_decimal(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// Tab-separated table: each series contributes a (lambda, value) column
/// pair, headed "lambda" and the series name.
inline std::string render_plot_table(std::span<const PlotSeries> series) {
    std::string out;
    for (std::size_t s = 0; s < series.size(); ++s) {
        out += (s ? "\t" : "") + std::string("lambda\t") + series[s].name;
    }
    out += '\n';
    const std::size_t rows = series.empty() ? 0 : series.front().points.size();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t s = 0; s < series.size(); ++s) {
            const auto& [x, y] = series[s].points.at(r);
            out += (s ? "\t" : "") + shortest_decimal(x) + "\t" + shortest_decimal(y);
        }
        out += '\n';
    }
    return out;
}

} // namespace debias
