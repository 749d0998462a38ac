#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "incseg/cli.hpp"

namespace incseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (global epoch, IoU)
};

struct Figure {
  std::string title;
  std::vector<Series> series;
};

const cv::Scalar kColors[] = {
    {200, 80, 30}, {40, 40, 220}, {40, 160, 40}, {180, 40, 180}, {20, 140, 220}, {120, 120, 0}, {90, 90, 90},
};

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' ? c : '_';
  return out;
}

void dashed_line(cv::Mat& img, cv::Point a, cv::Point b, const cv::Scalar& color, int dash) {
  const double len = std::hypot(b.x - a.x, b.y - a.y);
  const int steps = std::max(1, static_cast<int>(len / dash));
  for (int i = 0; i < steps; i += 2) {
    const double t0 = static_cast<double>(i) / steps;
    const double t1 = std::min(1.0, static_cast<double>(i + 1) / steps);
    cv::line(img, {a.x + static_cast<int>((b.x - a.x) * t0), a.y + static_cast<int>((b.y - a.y) * t0)},
             {a.x + static_cast<int>((b.x - a.x) * t1), a.y + static_cast<int>((b.y - a.y) * t1)}, color, 1,
             cv::LINE_AA);
  }
}

void render(const Figure& fig, const std::vector<double>& markers, double max_epoch, const fs::path& file) {
  const int W = 720;
  const int H = 440;
  const int left = 60;
  const int right = 180;
  const int top = 40;
  const int bottom = 50;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  const int pw = W - left - right;
  const int ph = H - top - bottom;
  auto to_px = [&](double e, double v) {
    return cv::Point(left + static_cast<int>(e / max_epoch * pw), top + static_cast<int>((1.0 - v) * ph));
  };
  cv::rectangle(img, {left, top}, {left + pw, top + ph}, {0, 0, 0}, 1);
  for (int t = 0; t <= 5; ++t) {
    const double v = t / 5.0;
    const auto p = to_px(0, v);
    cv::line(img, {left - 4, p.y}, {left, p.y}, {0, 0, 0}, 1);
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << v;
    cv::putText(img, os.str(), {left - 40, p.y + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
  }
  for (int t = 0; t <= 5; ++t) {
    const double e = max_epoch * t / 5.0;
    const auto p = to_px(e, 0);
    cv::line(img, {p.x, top + ph}, {p.x, top + ph + 4}, {0, 0, 0}, 1);
    std::ostringstream os;
    os << static_cast<long long>(std::llround(e));
    cv::putText(img, os.str(), {p.x - 8, top + ph + 18}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
  }
  cv::putText(img, "epoch", {left + pw / 2 - 20, H - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
  cv::putText(img, fig.title, {left, 26}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
  for (double m : markers) {
    dashed_line(img, to_px(m, 0), to_px(m, 1), {120, 120, 120}, 6);
  }
  for (std::size_t i = 0; i < fig.series.size(); ++i) {
    const auto& s = fig.series[i];
    const cv::Scalar color = kColors[i % std::size(kColors)];
    for (std::size_t k = 1; k < s.points.size(); ++k) {
      cv::line(img, to_px(s.points[k - 1].first, s.points[k - 1].second), to_px(s.points[k].first, s.points[k].second),
               color, 2, cv::LINE_AA);
    }
    if (s.points.size() == 1) cv::circle(img, to_px(s.points[0].first, s.points[0].second), 3, color, cv::FILLED);
    const int ly = top + 10 + static_cast<int>(i) * 20;
    cv::line(img, {left + pw + 12, ly}, {left + pw + 36, ly}, color, 2, cv::LINE_AA);
    cv::putText(img, s.label, {left + pw + 42, ly + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
  }
  if (!cv::imwrite(file.string(), img)) throw IoError("cannot write plot " + file.string());
}

}  // namespace

std::vector<fs::path> plot_metrics(const std::vector<fs::path>& metrics_files, const fs::path& out_dir) {
  // figure name -> series label -> points
  std::map<std::string, std::map<std::string, std::vector<std::pair<double, double>>>> data;
  std::vector<std::string> series_order;
  std::vector<double> markers;
  double max_epoch = 1.0;
  std::size_t evals = 0;
  for (std::size_t f = 0; f < metrics_files.size(); ++f) {
    std::ifstream in(metrics_files[f]);
    if (!in) throw IoError("cannot open metrics file " + metrics_files[f].string());
    std::string line;
    int last_stage = 0;
    double last_epoch = 0.0;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json r;
      try {
        r = json::parse(line);
      } catch (const json::parse_error& e) {
        throw DataError("metrics file " + metrics_files[f].string() + " has a malformed line: " + e.what());
      }
      if (r.value("type", "") != "eval") continue;
      ++evals;
      const int stage = r.at("stage").get<int>();
      const auto epoch = r.at("global_epoch").get<double>();
      if (!first && stage != last_stage &&
          std::find(markers.begin(), markers.end(), last_epoch) == markers.end()) {
        markers.push_back(last_epoch);
      }
      first = false;
      last_stage = stage;
      last_epoch = epoch;
      max_epoch = std::max(max_epoch, epoch);
      std::string label = r.value("strategy", "run");
      if (metrics_files.size() > 1) label += " #" + std::to_string(f + 1);
      if (std::find(series_order.begin(), series_order.end(), label) == series_order.end()) {
        series_order.push_back(label);
      }
      const auto& metrics = r.at("metrics");
      for (const auto& [val, report] : metrics.items()) {
        const std::string prefix = metrics.size() > 1 ? val + " " : "";
        data[prefix + "overall"][label].emplace_back(epoch, report.at("overall").at("iou").get<double>());
        for (const auto& [cls, m] : report.at("per_class").items()) {
          data[prefix + cls][label].emplace_back(epoch, m.at("iou").get<double>());
        }
      }
    }
  }
  if (evals == 0) throw DataError("metrics stream holds no evaluation records");
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& [name, by_series] : data) {
    Figure fig;
    fig.title = name + " IoU";
    for (const auto& label : series_order) {
      auto it = by_series.find(label);
      if (it != by_series.end()) fig.series.push_back({label, it->second});
    }
    const bool overall = name.ends_with("overall");
    const fs::path file = out_dir / (overall ? sanitize(name) + "_iou.png" : "class_" + sanitize(name) + ".png");
    render(fig, markers, max_epoch, file);
    written.push_back(file);
  }
  return written;
}

}  // namespace incseg
