#include "neuroretrieve/montage.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <vector>

#include "neuroretrieve/error.hpp"

namespace nr::montage {

namespace {

void require_positions(const Tensor& positions) {
  if (positions.rank() != 2 || positions.dim(1) != 3) {
    fail(Errc::shape_mismatch,
         "positions must be Vx3, got " + positions.shape_str());
  }
  if (positions.dim(0) < 2) {
    fail(Errc::invalid_argument, "montage needs at least 2 nodes");
  }
  if (!positions.all_finite()) {
    fail(Errc::non_finite, "positions contain non-finite values");
  }
}

double sqdist(const Tensor& p, std::size_t i, std::size_t j) {
  double acc = 0.0;
  for (std::size_t d = 0; d < 3; ++d) {
    const double diff = p.at(i, d) - p.at(j, d);
    acc += diff * diff;
  }
  return acc;
}

}  // namespace

Tensor build_knn_adjacency(const Tensor& positions, std::size_t k) {
  require_positions(positions);
  const std::size_t v = positions.dim(0);
  if (k < 1 || k >= v) {
    fail(Errc::invalid_argument,
         "k must be in [1, V-1], got k=" + std::to_string(k) +
             " with V=" + std::to_string(v));
  }
  for (std::size_t i = 0; i < v; ++i) {
    for (std::size_t j = i + 1; j < v; ++j) {
      if (sqdist(positions, i, j) == 0.0) {
        fail(Errc::duplicate_id, "nodes " + std::to_string(i) + " and " +
                                     std::to_string(j) +
                                     " share a position");
      }
    }
  }

  Tensor w = Tensor::zeros({v, v});
  std::vector<std::size_t> order(v);
  for (std::size_t i = 0; i < v; ++i) {
    order.resize(v);
    std::iota(order.begin(), order.end(), std::size_t{0});
    order.erase(order.begin() + static_cast<std::ptrdiff_t>(i));
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       const double da = sqdist(positions, i, a);
                       const double db = sqdist(positions, i, b);
                       if (da != db) return da < db;
                       return a < b;
                     });
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t j = order[r];
      w.at(i, j) = 1.0;
      w.at(j, i) = 1.0;  // OR-symmetrization
    }
  }
  for (std::size_t i = 0; i < v; ++i) w.at(i, i) = 1.0;
  return w;
}

Tensor transition_matrix(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    fail(Errc::shape_mismatch,
         "adjacency must be square, got " + adjacency.shape_str());
  }
  const std::size_t v = adjacency.dim(0);
  Tensor p = Tensor::zeros({v, v});
  for (std::size_t i = 0; i < v; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      if (adjacency.at(i, j) < 0.0) {
        fail(Errc::out_of_range, "adjacency has a negative entry at row " +
                                     std::to_string(i));
      }
      row += adjacency.at(i, j);
    }
    if (row <= 0.0) {
      fail(Errc::invalid_argument,
           "adjacency row " + std::to_string(i) + " sums to zero");
    }
    for (std::size_t j = 0; j < v; ++j) p.at(i, j) = adjacency.at(i, j) / row;
  }
  return p;
}

Tensor adaptive_adjacency(const Tensor& theta_x, const Tensor& theta_xp) {
  if (theta_x.rank() != 2 || !theta_x.same_shape(theta_xp)) {
    fail(Errc::shape_mismatch, "node embeddings must share shape VxC, got " +
                                   theta_x.shape_str() + " and " +
                                   theta_xp.shape_str());
  }
  const std::size_t v = theta_x.dim(0);
  const std::size_t c = theta_x.dim(1);
  Tensor a = Tensor::zeros({v, v});
  for (std::size_t i = 0; i < v; ++i) {
    for (std::size_t j = 0; j < v; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < c; ++d) {
        dot += theta_x.at(i, d) * theta_xp.at(j, d);
      }
      a.at(i, j) = dot > 0.0 ? dot : 0.0;  // relu
    }
  }
  for (std::size_t i = 0; i < v; ++i) {
    double mx = a.at(i, 0);
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, a.at(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      a.at(i, j) = std::exp(a.at(i, j) - mx);
      denom += a.at(i, j);
    }
    for (std::size_t j = 0; j < v; ++j) a.at(i, j) /= denom;
  }
  return a;
}

Tensor default_positions(std::size_t v) {
  if (v < 2) fail(Errc::invalid_argument, "montage needs at least 2 nodes");
  // Golden-angle spiral over a spherical cap of half-angle 80 degrees:
  // area-uniform in cos(theta), strictly distinct azimuths.
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double cap = 80.0 / 180.0 * std::numbers::pi;
  const double cos_cap = std::cos(cap);
  Tensor p = Tensor::zeros({v, 3});
  for (std::size_t i = 0; i < v; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(v);
    const double ct = 1.0 - u * (1.0 - cos_cap);
    const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
    const double phi = golden * static_cast<double>(i);
    p.at(i, 0) = st * std::cos(phi);
    p.at(i, 1) = st * std::sin(phi);
    p.at(i, 2) = ct;
  }
  return p;
}

Tensor load_positions(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io_failure, "cannot open " + path);
  struct Row {
    std::size_t id;
    double x, y, z;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    long long id = -1;
    Row r{};
    if (!(ls >> id >> r.x >> r.y >> r.z) || id < 0) {
      fail(Errc::invalid_argument,
           path + ":" + std::to_string(lineno) + ": expected 'node_id x y z'");
    }
    std::string extra;
    if (ls >> extra) {
      fail(Errc::invalid_argument, path + ":" + std::to_string(lineno) +
                                       ": trailing content '" + extra + "'");
    }
    r.id = static_cast<std::size_t>(id);
    rows.push_back(r);
  }
  if (rows.empty()) fail(Errc::invalid_argument, path + ": no positions");
  const std::size_t v = rows.size();
  Tensor p = Tensor::zeros({v, 3});
  std::vector<bool> seen(v, false);
  for (const Row& r : rows) {
    if (r.id >= v) {
      fail(Errc::out_of_range, path + ": node_id " + std::to_string(r.id) +
                                   " outside 0.." + std::to_string(v - 1));
    }
    if (seen[r.id]) {
      fail(Errc::duplicate_id,
           path + ": node_id " + std::to_string(r.id) + " repeated");
    }
    seen[r.id] = true;
    p.at(r.id, 0) = r.x;
    p.at(r.id, 1) = r.y;
    p.at(r.id, 2) = r.z;
  }
  if (!p.all_finite()) fail(Errc::non_finite, path + ": non-finite position");
  return p;
}

Montage make_montage(const Tensor& positions, std::size_t k) {
  Montage m;
  m.positions = positions;
  m.k = k;
  m.adjacency = build_knn_adjacency(positions, k);
  m.transition = transition_matrix(m.adjacency);
  return m;
}

}  // namespace nr::montage
