#include "neuroretrieve/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "neuroretrieve/error.hpp"
#include "neuroretrieve/rng.hpp"

namespace nr::eval {

void validate(const EncodedSet& set) {
  if (set.ids.empty()) fail(Errc::invalid_argument, "encoded set is empty");
  if (set.labels.size() != set.ids.size()) {
    fail(Errc::dim_mismatch, "encoded set has " + std::to_string(set.ids.size()) +
                                 " ids but " + std::to_string(set.labels.size()) +
                                 " labels");
  }
  if (set.vectors.rank() != 2 || set.vectors.dim(0) != set.ids.size()) {
    fail(Errc::shape_mismatch,
         "encoded set vectors must be count x width, got " +
             set.vectors.shape_str() + " for " + std::to_string(set.ids.size()) +
             " ids");
  }
  if (!set.vectors.all_finite()) {
    fail(Errc::non_finite, "encoded set contains non-finite vectors");
  }
}

namespace {

double row_cosine(const Tensor& query, const Tensor& rows, std::size_t r) {
  double dot = 0.0, nq = 0.0, nr = 0.0;
  const std::size_t width = rows.dim(1);
  for (std::size_t d = 0; d < width; ++d) {
    const double a = query[d], b = rows.at(r, d);
    dot += a * b;
    nq += a * a;
    nr += b * b;
  }
  if (nq == 0.0 || nr == 0.0) {
    fail(Errc::invalid_argument, "cosine of a zero-norm vector is undefined");
  }
  return dot / std::sqrt(nq * nr);
}

}  // namespace

std::vector<std::size_t> rank_gallery(const Tensor& query,
                                      const EncodedSet& gallery) {
  validate(gallery);
  if (query.rank() != 1 || query.dim(0) != gallery.vectors.dim(1)) {
    fail(Errc::dim_mismatch, "query width " + query.shape_str() +
                                 " does not match gallery " +
                                 gallery.vectors.shape_str());
  }
  const std::size_t g = gallery.count();
  std::vector<double> cos(g);
  for (std::size_t r = 0; r < g; ++r) cos[r] = row_cosine(query, gallery.vectors, r);
  std::vector<std::size_t> order(g);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (cos[a] != cos[b]) return cos[a] > cos[b];
    return gallery.ids[a] < gallery.ids[b];
  });
  return order;
}

double mrr(const std::vector<std::size_t>& ranks) {
  if (ranks.empty()) fail(Errc::invalid_argument, "mrr of no ranks");
  double acc = 0.0;
  for (std::size_t r : ranks) {
    if (r < 1) fail(Errc::out_of_range, "ranks are 1-based");
    acc += 1.0 / static_cast<double>(r);
  }
  return acc / static_cast<double>(ranks.size());
}

double average_precision(const std::vector<std::string>& ranked_labels,
                         const std::string& relevant) {
  std::size_t hits = 0;
  double acc = 0.0;
  for (std::size_t pos = 0; pos < ranked_labels.size(); ++pos) {
    if (ranked_labels[pos] != relevant) continue;
    ++hits;
    acc += static_cast<double>(hits) / static_cast<double>(pos + 1);
  }
  return hits == 0 ? 0.0 : acc / static_cast<double>(hits);
}

std::string classify_via_retrieval(const Tensor& query,
                                   const EncodedSet& gallery) {
  return gallery.labels[rank_gallery(query, gallery).front()];
}

double label_prevalence(const EncodedSet& gallery, const std::string& label) {
  validate(gallery);
  const auto n = std::count(gallery.labels.begin(), gallery.labels.end(), label);
  return static_cast<double>(n) / static_cast<double>(gallery.count());
}

RetrievalReport evaluate(const EncodedSet& queries, const EncodedSet& gallery) {
  validate(queries);
  validate(gallery);
  const std::size_t width = gallery.vectors.dim(1);
  if (queries.vectors.dim(1) != width) {
    fail(Errc::dim_mismatch, "query and gallery widths differ");
  }

  RetrievalReport report;
  report.queries.reserve(queries.count());
  double rr_acc = 0.0;
  std::size_t rr_n = 0;
  double ap_acc = 0.0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_class;  // hit, total

  Tensor query({width});
  for (std::size_t q = 0; q < queries.count(); ++q) {
    for (std::size_t d = 0; d < width; ++d) query[d] = queries.vectors.at(q, d);
    const std::vector<std::size_t> order = rank_gallery(query, gallery);

    QueryOutcome out;
    out.pair_id = queries.ids[q];
    out.label = queries.labels[q];
    out.ranked_ids.reserve(order.size());
    std::vector<std::string> ranked_labels;
    ranked_labels.reserve(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const std::size_t g = order[pos];
      out.ranked_ids.push_back(gallery.ids[g]);
      ranked_labels.push_back(gallery.labels[g]);
      if (gallery.ids[g] == out.pair_id) out.rank_of_correct = pos + 1;
    }
    out.top1 = gallery.labels[order.front()];
    out.ap = average_precision(ranked_labels, out.label);

    if (out.rank_of_correct > 0) {
      rr_acc += 1.0 / static_cast<double>(out.rank_of_correct);
      ++rr_n;
    }
    ap_acc += out.ap;
    auto& cls = per_class[out.label];
    cls.second += 1;
    if (out.top1 == out.label) cls.first += 1;
    report.queries.push_back(std::move(out));
  }

  report.mrr = rr_n == 0 ? 0.0 : rr_acc / static_cast<double>(rr_n);
  report.map = ap_acc / static_cast<double>(queries.count());
  for (const auto& [label, counts] : per_class) {
    report.class_accuracy[label] =
        static_cast<double>(counts.first) / static_cast<double>(counts.second);
  }
  return report;
}

void write_report(const std::string& path, const RetrievalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open " + path + " for writing");
  nlohmann::json header = {{"format", "retrieval-report"},
                           {"version", 1},
                           {"queries", report.queries.size()},
                           {"mrr", report.mrr},
                           {"map", report.map},
                           {"class_accuracy", report.class_accuracy}};
  out << header.dump() << "\n";
  for (const QueryOutcome& q : report.queries) {
    nlohmann::json line = {{"pair_id", q.pair_id},
                           {"class", q.label},
                           {"rank_of_correct", q.rank_of_correct},
                           {"ap", q.ap},
                           {"top1", q.top1},
                           {"ranked", q.ranked_ids}};
    out << line.dump() << "\n";
  }
  if (!out) fail(Errc::io_failure, "short write to " + path);
}

SplitPlan make_splits(const dataio::PairManifest& manifest, std::size_t n_sets,
                      std::uint64_t seed) {
  if (n_sets < 2) fail(Errc::invalid_argument, "need at least 2 sets");
  if (manifest.entries.empty()) fail(Errc::invalid_argument, "empty manifest");

  std::map<std::string, std::vector<std::string>> by_class;
  SplitPlan plan;
  plan.n_sets = n_sets;
  plan.pair_ids.reserve(manifest.entries.size());
  for (const auto& entry : manifest.entries) {
    plan.pair_ids.push_back(entry.pair_id);
    by_class[entry.class_label].push_back(entry.pair_id);
  }

  std::string complaints;
  for (const auto& [label, ids] : by_class) {
    if (ids.size() % n_sets != 0) {
      complaints += (complaints.empty() ? "" : "; ") + ("class '" + label + "': " +
                    std::to_string(ids.size()) + " % " + std::to_string(n_sets) +
                    " leaves " + std::to_string(ids.size() % n_sets));
    }
  }
  if (!complaints.empty()) {
    fail(Errc::invalid_argument,
         "class counts must divide evenly into sets: " + complaints);
  }

  for (auto& [label, ids] : by_class) {
    Rng rng(Rng::mix(seed, Rng::hash_str(label)));
    rng.shuffle(ids);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      plan.set_of[ids[i]] = i % n_sets;
    }
  }
  return plan;
}

Fold make_fold(const SplitPlan& plan, std::uint64_t seed) {
  if (plan.n_sets < 2) fail(Errc::invalid_argument, "split plan has no sets");
  Rng rng(seed);
  Fold fold;
  fold.val_set = rng.below(plan.n_sets);
  fold.test_set = rng.below(plan.n_sets - 1);
  if (fold.test_set >= fold.val_set) ++fold.test_set;
  for (const std::string& id : plan.pair_ids) {
    const std::size_t set = plan.set_of.at(id);
    if (set == fold.val_set) {
      fold.val.push_back(id);
    } else if (set == fold.test_set) {
      fold.test.push_back(id);
    } else {
      fold.train.push_back(id);
    }
  }
  return fold;
}

}  // namespace nr::eval
