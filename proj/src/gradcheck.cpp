#include "cacheproc/gradcheck.h"

#include <cmath>

#include "cacheproc/common.h"
#include "cacheproc/tape.h"

namespace cacheproc {

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps) {
    check(eps > 0, "finite_diff_check: eps must be positive");
    for (const Tensor& p : params) {
        check(p.dtype() == DType::F64, "finite_diff_check requires f64 parameters");
        check(p.requires_grad(), "finite_diff_check: parameter does not require grad");
    }

    const auto eval = [&]() -> double {
        NoGradScope no_grad;
        Tensor loss = f();
        check(loss.numel() == 1, "finite_diff_check: f must return a scalar");
        return loss.item();
    };

    {
        const double v1 = eval();
        const double v2 = eval();
        check(v1 == v2, "finite_diff_check: f is not deterministic (" + std::to_string(v1) +
                            " vs " + std::to_string(v2) + ")");
    }

    // Analytic gradients.
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        for (const Tensor& p : params) {
            Tensor q = p;
            q.zero_grad();
        }
        Tensor loss = f();
        tape.backward(loss);
        for (const Tensor& p : params) {
            std::vector<double> g(p.numel());
            for (size_t i = 0; i < g.size(); ++i) g[i] = p.grad_at(i);
            analytic.push_back(std::move(g));
        }
    }

    double max_rel_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (size_t i = 0; i < p.numel(); ++i) {
            const double orig = p.at(i);
            p.set(i, orig + eps);
            const double up = eval();
            p.set(i, orig - eps);
            const double down = eval();
            p.set(i, orig);
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
            max_rel_err = std::max(max_rel_err, std::fabs(a - numeric) / denom);
        }
    }
    return max_rel_err;
}

}  // namespace cacheproc
