// SPDX-License-Identifier: Apache-2.0
//
// Independent gradient oracle: central finite differences in double
// precision, compared against the tape's gradients. Used by the unit
// suite and the acceptance suite.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ebkit/rng.hpp"
#include "ebkit/tensor.hpp"

namespace ebkit_test {

inline ebkit::Tensor<double> random_tensor(ebkit::Shape shape, ebkit::CounterRng& rng,
                                           double lo = -1.0, double hi = 1.0,
                                           bool needs_grad = true) {
    std::vector<double> values(ebkit::numel(shape));
    for (double& v : values) v = lo + (hi - lo) * rng.next_unit();
    auto t = ebkit::Tensor<double>::from_data(std::move(shape), std::move(values));
    t.set_requires_grad(needs_grad);
    return t;
}

struct FdReport {
    bool ok = true;
    double worst_gap = 0.0;      // |autodiff - finite difference| at the worst element
    double worst_allowed = 0.0;  // tolerance at that element
    std::string worst_where;
    int checked = 0;
};

// loss_fn must rebuild the forward pass from the params' current data on
// every call. Tolerance rule: |ad - fd| <= abs_floor + rel_tol*max(|ad|,|fd|).
inline FdReport finite_diff_check(std::vector<ebkit::Tensor<double>> params,
                                  const std::function<ebkit::Tensor<double>()>& loss_fn,
                                  double h = 1e-5, double rel_tol = 1e-6,
                                  double abs_floor = 1e-9) {
    using ebkit::Tape;

    Tape<double>::current().clear();
    for (auto& p : params) p.clear_grad();
    ebkit::Tensor<double> loss = loss_fn();
    ebkit::backward(loss);

    std::vector<std::vector<double>> autodiff;
    autodiff.reserve(params.size());
    for (auto& p : params) {
        auto g = p.grad();
        autodiff.emplace_back(g.begin(), g.end());
    }

    FdReport report;
    ebkit::NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto data = params[pi].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            double saved = data[i];
            data[i] = saved + h;
            double lp = loss_fn().item();
            data[i] = saved - h;
            double lm = loss_fn().item();
            data[i] = saved;
            double fd = (lp - lm) / (2.0 * h);
            double ad = autodiff[pi][i];
            double gap = std::abs(ad - fd);
            double allowed = abs_floor + rel_tol * std::max(std::abs(ad), std::abs(fd));
            ++report.checked;
            if (gap > allowed) {
                report.ok = false;
                if (gap - allowed > report.worst_gap - report.worst_allowed) {
                    report.worst_gap = gap;
                    report.worst_allowed = allowed;
                    report.worst_where =
                        "param " + std::to_string(pi) + " elem " + std::to_string(i);
                }
            }
        }
    }
    return report;
}

}  // namespace ebkit_test
