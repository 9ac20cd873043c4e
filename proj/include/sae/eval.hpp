#ifndef SAE_EVAL_HPP
#define SAE_EVAL_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "sae/error.hpp"
#include "sae/prior.hpp"
#include "sae/volume.hpp"

namespace sae::eval {

// Volumetric overlap for one label. Both-empty pairs score 1, one-empty
// pairs score 0; absent structures are never averaged into the paper-style
// tables anyway.
inline double dice(const LabelVolume& a, const LabelVolume& b, int label) {
  require_same_grid(a.meta, b.meta, "dice");
  std::int64_t na = 0, nb = 0, ni = 0;
  for (std::size_t j = 0; j < a.labels.size(); ++j) {
    const bool ia = a.labels[j] == label;
    const bool ib = b.labels[j] == label;
    na += ia;
    nb += ib;
    ni += ia && ib;
  }
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  return 2.0 * double(ni) / double(na + nb);
}

namespace detail {

struct VoxelPos {
  int z, y, x;
};

// Boundary voxels: mask voxels with at least one 6-connected face neighbor
// outside the mask; out-of-volume counts as outside.
inline std::vector<VoxelPos> boundary_voxels(const LabelVolume& v, int label) {
  static constexpr std::array<std::array<int, 3>, 6> faces{
      {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  const int D = v.meta.shape[0], H = v.meta.shape[1], W = v.meta.shape[2];
  std::vector<VoxelPos> out;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (v.at(z, y, x) != label) continue;
        bool edge = false;
        for (const auto& f : faces) {
          const int zz = z + f[0], yy = y + f[1], xx = x + f[2];
          if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W ||
              v.at(zz, yy, xx) != label) {
            edge = true;
            break;
          }
        }
        if (edge) out.push_back({z, y, x});
      }
  return out;
}

// Directed 95th-percentile boundary distance (nearest-rank percentile).
inline double directed_hd95(const std::vector<VoxelPos>& from,
                            const std::vector<VoxelPos>& to,
                            const std::array<double, 3>& spacing) {
  std::vector<double> dists(from.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < std::int64_t(from.size()); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dz = (from[std::size_t(i)].z - q.z) * spacing[0];
      const double dy = (from[std::size_t(i)].y - q.y) * spacing[1];
      const double dx = (from[std::size_t(i)].x - q.x) * spacing[2];
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    dists[std::size_t(i)] = std::sqrt(best);
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t k = std::size_t(
      std::ceil(0.95 * double(dists.size())));
  return dists[std::max<std::size_t>(k, 1) - 1];
}

}  // namespace detail

// Symmetric 95%-Hausdorff distance in mm: max of the two directed
// 95th-percentile boundary distances. Errors if either mask is empty.
inline double hd95(const LabelVolume& a, const LabelVolume& b, int label,
                   const std::array<double, 3>& spacing) {
  require_same_grid(a.meta, b.meta, "hd95");
  const auto ba = detail::boundary_voxels(a, label);
  const auto bb = detail::boundary_voxels(b, label);
  require(!ba.empty() && !bb.empty(), ErrorCode::ArgumentError,
          "hd95: undefined distance for an empty mask");
  return std::max(detail::directed_hd95(ba, bb, spacing),
                  detail::directed_hd95(bb, ba, spacing));
}

inline double hd95(const LabelVolume& a, const LabelVolume& b, int label) {
  return hd95(a, b, label, a.meta.spacing);
}

// Most probable label at each voxel of the prior; the prediction every
// subject gets from a static atlas.
inline LabelVolume naive_baseline(const prior::ProbabilisticAtlas& atlas) {
  return argmax_labels(atlas.as_field());
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct SubjectLabelMetrics {
  std::string subject;
  int label = 0;
  double dice = 0.0;
  double hd95 = std::numeric_limits<double>::quiet_NaN();
  bool hd_valid = false;
};

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  int n = 0;
};

inline MeanSe mean_se(const std::vector<double>& xs) {
  MeanSe out;
  out.n = int(xs.size());
  if (xs.empty()) return out;
  double s = 0.0;
  for (double x : xs) s += x;
  out.mean = s / double(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.se = std::sqrt(ss / double(xs.size() - 1)) / std::sqrt(double(xs.size()));
  }
  return out;
}

// Per-label and global Dice / HD95 across a set of subjects. Regions are
// weighted equally in the global scores; missing HD values (empty masks) are
// skipped rather than imputed.
struct RegionReport {
  std::string method;
  std::vector<int> labels;
  std::vector<std::string> subjects;
  std::vector<SubjectLabelMetrics> rows;        // subjects x labels
  std::vector<double> subject_global_dice;      // per subject, mean over labels
  std::map<int, MeanSe> label_dice, label_hd;
  MeanSe global_dice, global_hd;
};

using LabeledSet = std::vector<std::pair<std::string, LabelVolume>>;

inline RegionReport evaluate(const LabeledSet& pred, const LabeledSet& truth,
                             std::vector<int> labels = {},
                             std::string method = "method") {
  require(pred.size() == truth.size(), ErrorCode::ArgumentError,
          "evaluate: prediction/truth subject counts differ");
  require(!pred.empty(), ErrorCode::ArgumentError, "evaluate: empty subject set");

  std::map<std::string, const LabelVolume*> truth_by_id;
  for (const auto& [id, vol] : truth) truth_by_id[id] = &vol;

  if (labels.empty()) {
    // Default: all non-background labels present in the truth set.
    for (int l = 1; l < truth.front().second.num_labels; ++l) labels.push_back(l);
  }

  RegionReport rep;
  rep.method = std::move(method);
  rep.labels = labels;

  std::map<int, std::vector<double>> dice_by_label, hd_by_label;
  for (const auto& [id, pv] : pred) {
    const auto it = truth_by_id.find(id);
    require(it != truth_by_id.end(), ErrorCode::ArgumentError,
            "evaluate: no ground truth for subject " + id);
    const LabelVolume& tv = *it->second;
    rep.subjects.push_back(id);
    std::vector<double> subject_dice;
    for (int l : labels) {
      SubjectLabelMetrics m;
      m.subject = id;
      m.label = l;
      m.dice = dice(pv, tv, l);
      try {
        m.hd95 = hd95(pv, tv, l, tv.meta.spacing);
        m.hd_valid = true;
      } catch (const SaeError&) {
        m.hd_valid = false;  // reported as missing
      }
      rep.rows.push_back(m);
      subject_dice.push_back(m.dice);
      dice_by_label[l].push_back(m.dice);
      if (m.hd_valid) hd_by_label[l].push_back(m.hd95);
    }
    double s = 0.0;
    for (double d : subject_dice) s += d;
    rep.subject_global_dice.push_back(s / double(subject_dice.size()));
  }

  std::vector<double> all_hd_per_subject;
  for (int l : labels) {
    rep.label_dice[l] = mean_se(dice_by_label[l]);
    rep.label_hd[l] = mean_se(hd_by_label[l]);
  }
  rep.global_dice = mean_se(rep.subject_global_dice);
  // Global HD: per-subject mean over labels with valid distances.
  std::vector<double> subj_hd;
  for (std::size_t si = 0; si < rep.subjects.size(); ++si) {
    double s = 0.0;
    int n = 0;
    for (std::size_t li = 0; li < labels.size(); ++li) {
      const auto& m = rep.rows[si * labels.size() + li];
      if (m.hd_valid) {
        s += m.hd95;
        ++n;
      }
    }
    if (n > 0) subj_hd.push_back(s / double(n));
  }
  rep.global_hd = mean_se(subj_hd);
  return rep;
}

struct CompareResult {
  std::string method_a, method_b;
  double mean_diff = 0.0;
  double t = 0.0;
  double p = 1.0;  // two-sided
  int n = 0;
};

// Paired t-test on per-subject global Dice. Zero-variance differences use
// the declared conventions: p = 1 when the methods agree everywhere, p = 0
// for a constant nonzero gap.
inline CompareResult compare(const RegionReport& a, const RegionReport& b) {
  require(a.subjects == b.subjects, ErrorCode::ArgumentError,
          "compare: subject sets differ");
  const int n = int(a.subjects.size());
  require(n >= 2, ErrorCode::ArgumentError, "compare: need at least 2 subjects");
  CompareResult out;
  out.method_a = a.method;
  out.method_b = b.method;
  out.n = n;
  std::vector<double> d(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    d[std::size_t(i)] = a.subject_global_dice[std::size_t(i)] -
                        b.subject_global_dice[std::size_t(i)];
  const auto ms = mean_se(d);
  out.mean_diff = ms.mean;
  if (ms.se == 0.0) {
    if (ms.mean == 0.0) {
      out.t = 0.0;
      out.p = 1.0;
    } else {
      out.t = ms.mean > 0 ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
      out.p = 0.0;
    }
    return out;
  }
  out.t = ms.mean / ms.se;
  boost::math::students_t dist(double(n - 1));
  out.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(out.t)));
  return out;
}

inline nlohmann::json compare_to_json(const CompareResult& c) {
  return {{"method_a", c.method_a}, {"method_b", c.method_b},
          {"mean_diff", c.mean_diff}, {"t", c.t}, {"p", c.p}, {"n", c.n}};
}

// ---------------------------------------------------------------------------
// CSV emission (schemas documented in docs/file_formats.md)
// ---------------------------------------------------------------------------

inline void write_subject_csv(const RegionReport& rep, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCode::IoUnreadable, "cannot write: " + path);
  out << "subject,label,dice,hd95\n";
  out.precision(17);
  for (const auto& m : rep.rows) {
    out << m.subject << "," << m.label << "," << m.dice << ",";
    if (m.hd_valid)
      out << m.hd95;
    else
      out << "nan";
    out << "\n";
  }
}

inline void write_summary_csv(const std::vector<RegionReport>& reports,
                              const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCode::IoUnreadable, "cannot write: " + path);
  out << "method,label,mean_hd95,se_hd95,mean_dice,se_dice\n";
  out.precision(10);
  for (const auto& rep : reports) {
    for (int l : rep.labels) {
      const auto& hd = rep.label_hd.at(l);
      const auto& dc = rep.label_dice.at(l);
      out << rep.method << "," << l << "," << hd.mean << "," << hd.se << ","
          << dc.mean << "," << dc.se << "\n";
    }
    out << rep.method << ",global," << rep.global_hd.mean << ","
        << rep.global_hd.se << "," << rep.global_dice.mean << ","
        << rep.global_dice.se << "\n";
  }
}

struct SubjectCsvRow {
  std::string subject;
  int label;
  double dice;
  double hd95;
};

inline std::vector<SubjectCsvRow> read_subject_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::IoUnreadable, "cannot open: " + path);
  std::string line;
  require(bool(std::getline(in, line)), ErrorCode::IoHeaderMismatch,
          "empty CSV: " + path);
  std::vector<SubjectCsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    SubjectCsvRow r;
    std::size_t p0 = line.find(',');
    std::size_t p1 = line.find(',', p0 + 1);
    std::size_t p2 = line.find(',', p1 + 1);
    require(p0 != std::string::npos && p1 != std::string::npos &&
                p2 != std::string::npos,
            ErrorCode::IoHeaderMismatch, "bad CSV row: " + line);
    r.subject = line.substr(0, p0);
    r.label = std::atoi(line.c_str() + p0 + 1);
    r.dice = std::atof(line.c_str() + p1 + 1);
    r.hd95 = std::atof(line.c_str() + p2 + 1);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace sae::eval

#endif  // SAE_EVAL_HPP
