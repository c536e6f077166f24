#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "neuroretrieve/dataio.hpp"
#include "neuroretrieve/tensor.hpp"

namespace nr::eval {

// Aligned ids/labels/vectors; used for both the query side and the gallery.
struct EncodedSet {
  std::vector<std::string> ids;
  std::vector<std::string> labels;
  Tensor vectors;  // count × width

  std::size_t count() const { return ids.size(); }
};

void validate(const EncodedSet& set);

// Gallery indices by descending cosine similarity; exact ties resolve by
// ascending pair_id so rankings are stable across platforms.
std::vector<std::size_t> rank_gallery(const Tensor& query,
                                      const EncodedSet& gallery);

// Mean of 1/rank over 1-based ranks.
double mrr(const std::vector<std::size_t>& ranks);

// Mean precision-at-rank over the relevant positions; 0 when nothing in the
// ranking carries the relevant label.
double average_precision(const std::vector<std::string>& ranked_labels,
                         const std::string& relevant);

// Label of the top-1 gallery item.
std::string classify_via_retrieval(const Tensor& query,
                                   const EncodedSet& gallery);

// Fraction of gallery items carrying `label`.
double label_prevalence(const EncodedSet& gallery, const std::string& label);

struct QueryOutcome {
  std::string pair_id;
  std::string label;
  std::size_t rank_of_correct = 0;  // 1-based; 0 = pair not in gallery
  double ap = 0.0;
  std::string top1;
  std::vector<std::string> ranked_ids;
};

struct RetrievalReport {
  double mrr = 0.0;  // over queries whose pair is present in the gallery
  double map = 0.0;
  std::map<std::string, double> class_accuracy;
  std::vector<QueryOutcome> queries;
};

RetrievalReport evaluate(const EncodedSet& queries, const EncodedSet& gallery);

// JSONL: one header line with the aggregates, then one line per query.
void write_report(const std::string& path, const RetrievalReport& report);

// Disjoint, class-stratified partition of the manifest's pairs.
struct SplitPlan {
  std::size_t n_sets = 0;
  std::vector<std::string> pair_ids;          // manifest order
  std::map<std::string, std::size_t> set_of;  // pair_id → set index
};

// Shuffles within each class (stream derived from seed and class) and deals
// round-robin; every class count must divide evenly into n_sets.
SplitPlan make_splits(const dataio::PairManifest& manifest, std::size_t n_sets,
                      std::uint64_t seed);

struct Fold {
  std::size_t val_set = 0;
  std::size_t test_set = 0;  // always distinct from val_set
  std::vector<std::string> train, val, test;  // manifest order
};

Fold make_fold(const SplitPlan& plan, std::uint64_t seed);

}  // namespace nr::eval
