#ifndef UCR_GRADCHECK_HPP
#define UCR_GRADCHECK_HPP

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ucr/model.hpp"

namespace ucr {

struct GradCheckGroup {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  bool passed = true;
  std::string worst_group;
  double worst_error = 0.0;
};

/// Compares analytic gradients against central differences for every dense
/// parameter and every embedding row the example touches. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor). `corrupt`
/// may tamper with the analytic gradients (fault injection in tests).
template <class Real>
GradCheckReport grad_check(RankingModel<Real>& model, const Example& ex, double h = 1e-4, double tol = 1e-4,
                           const std::function<void(Gradients<Real>&)>& corrupt = {}, double abs_floor = 1e-6) {
  model.record_lookups(ex);  // make every touched slot live
  auto grads = model.make_gradients();
  model.loss_and_backward(ex, model.forward(ex), grads);
  if (corrupt) corrupt(grads);

  auto numeric = [&](Real& param) {
    const Real saved = param;
    param = saved + static_cast<Real>(h);
    const double up = static_cast<double>(model.loss(ex));
    param = saved - static_cast<Real>(h);
    const double down = static_cast<double>(model.loss(ex));
    param = saved;
    return (up - down) / (2.0 * h);
  };
  auto rel = [abs_floor](double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), abs_floor});
  };

  GradCheckReport report;
  auto& dense = model.dense();
  for (std::size_t b = 0; b < dense.blocks().size(); ++b) {
    const auto& blk = dense.blocks()[b];
    GradCheckGroup grp{blk.name, 0.0, 0};
    auto values = dense.block(b);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double a = static_cast<double>(grads.dense[blk.offset + i]);
      grp.max_rel_error = std::max(grp.max_rel_error, rel(a, numeric(values[i])));
      ++grp.checked;
    }
    report.groups.push_back(grp);
  }

  auto check_table = [&](HashedEmbeddingTable<Real>* table, const SparseGradients<Real>& sg, const char* name) {
    if (!table) return;
    GradCheckGroup grp{name, 0.0, 0};
    std::map<std::size_t, std::size_t> slots;
    for (std::size_t i = 0; i < sg.size(); ++i) slots[sg.slot(i)] = i;
    for (const auto& [slot, i] : slots) {
      auto row = table->mutable_row(slot);
      auto g = sg.grad(i);
      for (std::size_t c = 0; c < row.size(); ++c) {
        grp.max_rel_error = std::max(grp.max_rel_error, rel(static_cast<double>(g[c]), numeric(row[c])));
        ++grp.checked;
      }
    }
    report.groups.push_back(grp);
  };
  check_table(model.item_table(), grads.item, "item_table");
  check_table(model.user_table(), grads.user, "user_table");

  for (const auto& g : report.groups) {
    if (g.max_rel_error > report.worst_error) {
      report.worst_error = g.max_rel_error;
      report.worst_group = g.name;
    }
    if (g.max_rel_error >= tol) report.passed = false;
  }
  return report;
}

}  // namespace ucr

#endif  // UCR_GRADCHECK_HPP
