#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "splab/io.hpp"
#include "splab/metrics.hpp"

namespace splab {

// ---------------------------------------------------------------------------
// score-versus-accuracy trend
// ---------------------------------------------------------------------------

struct TrendRow {
    int bin = 0;
    double bin_lo = 0.0, bin_hi = 0.0;
    int prompt_length = -1;  // -1 aggregates every length
    double mean_class_rate = 0.0;
    double mean_rouge1 = 0.0;
    int count = 0;
};

struct TrendTable {
    double bin_width = 0.1;
    std::vector<TrendRow> rows;
};

/// Bucket score records by task accuracy: bin floor(acc / width), with the
/// top edge folded into the last bin. Emits one row per populated
/// (bin, prompt length) and a per-bin aggregate row (length -1).
inline TrendTable build_trend_table(const std::vector<ScoreRecord>& records, double bin_width) {
    if (records.empty()) throw std::invalid_argument("trend table: no records");
    if (!(bin_width > 0.0 && bin_width <= 1.0))
        throw std::invalid_argument("trend table: bin width must be in (0, 1]");
    const int nbins = static_cast<int>(std::ceil(1.0 / bin_width - 1e-12));

    struct Acc {
        double cr = 0.0, r1 = 0.0;
        int n = 0;
    };
    std::map<std::pair<int, int>, Acc> cells;  // (bin, length) with -1 = all
    for (const auto& rec : records) {
        if (!(rec.accuracy >= 0.0 && rec.accuracy <= 1.0))
            throw std::invalid_argument("trend table: accuracy outside [0, 1]");
        const int bin = std::min(static_cast<int>(rec.accuracy / bin_width), nbins - 1);
        for (const int len : {rec.prompt_length, -1}) {
            Acc& a = cells[{bin, len}];
            a.cr += rec.class_rate_mean;
            a.r1 += rec.rouge1_mean;
            ++a.n;
        }
    }

    TrendTable table;
    table.bin_width = bin_width;
    for (const auto& [key, acc] : cells) {
        TrendRow row;
        row.bin = key.first;
        row.bin_lo = key.first * bin_width;
        row.bin_hi = std::min(1.0, (key.first + 1) * bin_width);
        row.prompt_length = key.second;
        row.mean_class_rate = acc.cr / acc.n;
        row.mean_rouge1 = acc.r1 / acc.n;
        row.count = acc.n;
        table.rows.push_back(row);
    }
    return table;  // map iteration gives (bin asc, length asc with -1 first)
}

inline std::string trend_csv(const TrendTable& table) {
    std::string out = "bin_lo,bin_hi,prompt_length,mean_class_rate,mean_rouge1,count\n";
    for (const auto& r : table.rows)
        out += io::csv_number(r.bin_lo) + "," + io::csv_number(r.bin_hi) + "," +
               (r.prompt_length < 0 ? std::string("all") : std::to_string(r.prompt_length)) +
               "," + io::csv_number(r.mean_class_rate) + "," + io::csv_number(r.mean_rouge1) +
               "," + std::to_string(r.count) + "\n";
    return out;
}

/// Static line chart of the aggregate rows: interpretability versus task
/// accuracy bins. Pure geometry, fixed canvas, reproducible bytes.
inline std::string trend_svg(const TrendTable& table) {
    const int W = 640, H = 400, ML = 60, MR = 20, MT = 30, MB = 50;
    const double plot_w = W - ML - MR, plot_h = H - MT - MB;
    auto sx = [&](double acc) { return ML + acc * plot_w; };
    auto sy = [&](double score) { return MT + (1.0 - score) * plot_h; };

    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
        "\" height=\"" + std::to_string(H) + "\">\n<rect width=\"100%\" height=\"100%\" "
        "fill=\"white\"/>\n";
    for (int i = 0; i <= 10; ++i) {
        const double v = i / 10.0;
        svg += "<line x1=\"" + io::csv_number(sx(v)) + "\" y1=\"" + std::to_string(MT) +
               "\" x2=\"" + io::csv_number(sx(v)) + "\" y2=\"" + std::to_string(H - MB) +
               "\" stroke=\"#eeeeee\"/>\n";
        svg += "<text x=\"" + io::csv_number(sx(v)) + "\" y=\"" + std::to_string(H - MB + 18) +
               "\" font-size=\"11\" text-anchor=\"middle\">" + io::csv_number(v).substr(0, 3) +
               "</text>\n";
        svg += "<text x=\"" + std::to_string(ML - 8) + "\" y=\"" + io::csv_number(sy(v) + 4) +
               "\" font-size=\"11\" text-anchor=\"end\">" + io::csv_number(v).substr(0, 3) +
               "</text>\n";
    }
    auto polyline = [&](const char* color, bool rouge) {
        std::string pts;
        for (const auto& r : table.rows) {
            if (r.prompt_length != -1) continue;
            const double mid = (r.bin_lo + r.bin_hi) / 2.0;
            pts += io::csv_number(sx(mid)) + "," +
                   io::csv_number(sy(rouge ? r.mean_rouge1 : r.mean_class_rate)) + " ";
        }
        return "<polyline fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    };
    svg += polyline("#1f77b4", false);
    svg += polyline("#d62728", true);
    svg += "<text x=\"" + std::to_string(W / 2) + "\" y=\"" + std::to_string(H - 12) +
           "\" font-size=\"13\" text-anchor=\"middle\">task accuracy</text>\n";
    svg += "<text x=\"" + std::to_string(ML) + "\" y=\"" + std::to_string(MT - 10) +
           "\" font-size=\"13\" fill=\"#1f77b4\">class rate</text>\n";
    svg += "<text x=\"" + std::to_string(ML + 120) + "\" y=\"" + std::to_string(MT - 10) +
           "\" font-size=\"13\" fill=\"#d62728\">unigram overlap</text>\n";
    svg += "</svg>\n";
    return svg;
}

// ---------------------------------------------------------------------------
// rank correlation
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> ranks_with_ties(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

}  // namespace detail

struct SpearmanResult {
    double rho = 0.0;
    double p_value = 1.0;  // one-sided, rho > 0, via the t approximation
};

/// Spearman rank correlation with midrank ties; one-sided p for positive
/// association using the t distribution approximation.
inline SpearmanResult spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
    const std::size_t n = x.size();
    if (n < 3) throw std::invalid_argument("spearman: need at least 3 points");
    const auto rx = detail::ranks_with_ties(x);
    const auto ry = detail::ranks_with_ties(y);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw std::runtime_error("spearman: constant input");
    SpearmanResult r;
    r.rho = sxy / std::sqrt(sxx * syy);

    const double rho = std::clamp(r.rho, -0.999999, 0.999999);
    const double df = static_cast<double>(n - 2);
    const double t = rho * std::sqrt(df / (1.0 - rho * rho));
    // one-sided survival of Student's t via the incomplete-beta identity,
    // evaluated with a continued fraction
    auto betacf = [](double va, double vb, double vx) {
        double qab = va + vb, qap = va + 1.0, qam = va - 1.0;
        double c = 1.0, d = 1.0 - qab * vx / qap;
        if (std::fabs(d) < 1e-30) d = 1e-30;
        d = 1.0 / d;
        double h = d;
        for (int mi = 1; mi <= 200; ++mi) {
            const double m2 = 2.0 * mi;
            double aa = mi * (vb - mi) * vx / ((qam + m2) * (va + m2));
            d = 1.0 + aa * d;
            if (std::fabs(d) < 1e-30) d = 1e-30;
            c = 1.0 + aa / c;
            if (std::fabs(c) < 1e-30) c = 1e-30;
            d = 1.0 / d;
            h *= d * c;
            aa = -(va + mi) * (qab + mi) * vx / ((va + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if (std::fabs(d) < 1e-30) d = 1e-30;
            c = 1.0 + aa / c;
            if (std::fabs(c) < 1e-30) c = 1e-30;
            d = 1.0 / d;
            const double del = d * c;
            h *= del;
            if (std::fabs(del - 1.0) < 1e-12) break;
        }
        return h;
    };
    auto betai = [&](double va, double vb, double vx) {
        if (vx <= 0.0) return 0.0;
        if (vx >= 1.0) return 1.0;
        const double bt = std::exp(std::lgamma(va + vb) - std::lgamma(va) - std::lgamma(vb) +
                                   va * std::log(vx) + vb * std::log(1.0 - vx));
        if (vx < (va + 1.0) / (va + vb + 2.0)) return bt * betacf(va, vb, vx) / va;
        return 1.0 - bt * betacf(vb, va, 1.0 - vx) / vb;
    };
    const double two_sided = betai(df / 2.0, 0.5, df / (df + t * t));
    r.p_value = t > 0.0 ? two_sided / 2.0 : 1.0 - two_sided / 2.0;
    return r;
}

// ---------------------------------------------------------------------------
// run manifest
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string command;
    std::string config_path;
    std::uint64_t seed = 0;
    std::string started_at, finished_at;  // UTC, ISO 8601
    std::map<std::string, std::string> inputs;   // path -> content hash
    std::map<std::string, std::string> outputs;

    json to_json() const {
        json j;
        j["command"] = command;
        j["config_path"] = config_path;
        j["seed"] = seed;
        j["started_at"] = started_at;
        j["finished_at"] = finished_at;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        return j;
    }

    void add_input(const std::filesystem::path& path) {
        inputs[path.string()] = io::hex64(io::hash_file(path));
    }

    void add_output(const std::filesystem::path& path) {
        outputs[path.string()] = io::hex64(io::hash_file(path));
    }

    void write(const std::filesystem::path& dir) const {
        io::write_text_file(dir / ("manifest-" + command + ".json"),
                            io::canonical(to_json()) + "\n");
    }
};

inline std::string iso_utc_now() {
    const std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return std::string(buf);
}

}  // namespace splab
