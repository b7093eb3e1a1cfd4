#pragma once

// Gradient checks of every tape op against central differences of an
// independent double-precision forward oracle. Shared by the unit tests and
// the acceptance binary.

#include <string>
#include <vector>

#include "loraview/numerics/tape.hpp"
#include "oracles.hpp"

namespace opcheck {

using loraview::Matrix;
using loraview::Rng;
using loraview::Tape;
using loraview::Transpose;
using loraview::Var;
using oracle::DMat;

struct OpCase {
    std::string name;
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    std::function<Var(Tape&, const std::vector<Var>&)> tape_fn;
    std::function<DMat(const std::vector<DMat>&)> oracle_fn;
    double input_scale = 1.0;
};

inline DMat oracle_matmul(const DMat& a, const DMat& b, bool ta, bool tb) {
    return oracle::matmul(ta ? oracle::transpose(a) : a, tb ? oracle::transpose(b) : b);
}

inline std::vector<OpCase> all_cases() {
    using namespace loraview;
    std::vector<OpCase> cases;
    for (int ta = 0; ta < 2; ++ta)
        for (int tb = 0; tb < 2; ++tb) {
            const std::size_t m = 3, k = 4, n = 5;
            std::pair<std::size_t, std::size_t> sa = ta ? std::pair{k, m} : std::pair{m, k};
            std::pair<std::size_t, std::size_t> sb = tb ? std::pair{n, k} : std::pair{k, n};
            cases.push_back({"matmul" + std::string(ta ? "_T" : "_N") + (tb ? "T" : "N"),
                             {sa, sb},
                             [ta, tb](Tape&, const std::vector<Var>& x) {
                                 return matmul(x[0], x[1], ta ? Transpose::yes : Transpose::no,
                                               tb ? Transpose::yes : Transpose::no);
                             },
                             [ta, tb](const std::vector<DMat>& x) { return oracle_matmul(x[0], x[1], ta, tb); }});
        }
    cases.push_back({"add", {{3, 4}, {3, 4}}, [](Tape&, const std::vector<Var>& x) { return add(x[0], x[1]); },
                     [](const std::vector<DMat>& x) {
                         DMat o = x[0];
                         for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] += x[1].v[i];
                         return o;
                     }});
    cases.push_back({"hadamard", {{3, 4}, {3, 4}},
                     [](Tape&, const std::vector<Var>& x) { return hadamard(x[0], x[1]); },
                     [](const std::vector<DMat>& x) {
                         DMat o = x[0];
                         for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] *= x[1].v[i];
                         return o;
                     }});
    cases.push_back({"scale", {{3, 4}}, [](Tape&, const std::vector<Var>& x) { return scale(x[0], -1.75f); },
                     [](const std::vector<DMat>& x) {
                         DMat o = x[0];
                         for (auto& v : o.v) v *= -1.75;
                         return o;
                     }});
    cases.push_back({"row_softmax", {{3, 5}}, [](Tape&, const std::vector<Var>& x) { return row_softmax(x[0]); },
                     [](const std::vector<DMat>& x) { return oracle::softmax_rows(x[0]); }});
    cases.push_back({"gelu", {{3, 5}}, [](Tape&, const std::vector<Var>& x) { return gelu(x[0]); },
                     [](const std::vector<DMat>& x) {
                         DMat o = x[0];
                         for (auto& v : o.v) v = oracle::gelu(v);
                         return o;
                     }});
    cases.push_back({"layer_norm", {{3, 6}, {1, 6}, {1, 6}},
                     [](Tape&, const std::vector<Var>& x) { return layer_norm(x[0], x[1], x[2]); },
                     [](const std::vector<DMat>& x) { return oracle::layer_norm(x[0], x[1], x[2]); }});
    cases.push_back({"mse_loss", {{3, 4}, {3, 4}},
                     [](Tape&, const std::vector<Var>& x) { return mse_loss(x[0], x[1]); },
                     [](const std::vector<DMat>& x) {
                         DMat o(1, 1);
                         for (std::size_t i = 0; i < x[0].v.size(); ++i)
                             o.v[0] += (x[0].v[i] - x[1].v[i]) * (x[0].v[i] - x[1].v[i]);
                         o.v[0] /= static_cast<double>(x[0].v.size());
                         return o;
                     }});
    cases.push_back({"concat_rows", {{2, 4}, {3, 4}, {1, 4}},
                     [](Tape&, const std::vector<Var>& x) { return concat_rows(x); },
                     [](const std::vector<DMat>& x) {
                         DMat o(6, 4);
                         std::size_t r = 0;
                         for (const auto& p : x)
                             for (std::size_t i = 0; i < p.r; ++i, ++r)
                                 for (std::size_t j = 0; j < 4; ++j) o(r, j) = p(i, j);
                         return o;
                     }});
    cases.push_back({"slice_rows", {{5, 3}}, [](Tape&, const std::vector<Var>& x) { return slice_rows(x[0], 1, 4); },
                     [](const std::vector<DMat>& x) {
                         DMat o(3, 3);
                         for (std::size_t i = 0; i < 3; ++i)
                             for (std::size_t j = 0; j < 3; ++j) o(i, j) = x[0](i + 1, j);
                         return o;
                     }});
    cases.push_back({"broadcast_row", {{1, 4}},
                     [](Tape&, const std::vector<Var>& x) { return broadcast_row(x[0], 3); },
                     [](const std::vector<DMat>& x) {
                         DMat o(3, 4);
                         for (std::size_t i = 0; i < 3; ++i)
                             for (std::size_t j = 0; j < 4; ++j) o(i, j) = x[0](0, j);
                         return o;
                     }});
    cases.push_back({"abs_cosine", {{1, 6}, {1, 6}},
                     [](Tape&, const std::vector<Var>& x) { return abs_cosine(x[0], x[1]); },
                     [](const std::vector<DMat>& x) {
                         double dot = 0, na = 0, nb = 0;
                         for (std::size_t i = 0; i < x[0].v.size(); ++i) {
                             dot += x[0].v[i] * x[1].v[i];
                             na += x[0].v[i] * x[0].v[i];
                             nb += x[1].v[i] * x[1].v[i];
                         }
                         DMat o(1, 1);
                         o.v[0] = std::abs(dot) / (std::sqrt(na) * std::sqrt(nb) + 1e-8);
                         return o;
                     }});
    return cases;
}

struct CheckResult {
    double forward_rel = 0;   // tape value vs oracle value
    double gradient_rel = 0;  // worst input, tape gradient vs central differences
};

/// One seeded instance of an op: random inputs and a random contraction
/// weight, so every output entry contributes to the checked scalar.
inline CheckResult check(const OpCase& c, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Matrix> inputs;
    for (auto [r, k] : c.shapes) inputs.push_back(rng.normal_matrix(r, k, c.input_scale));
    Tape tape;
    std::vector<Var> vars;
    for (const auto& m : inputs) vars.push_back(tape.parameter(m));
    Var out = c.tape_fn(tape, vars);
    const Matrix weight = rng.normal_matrix(out.rows(), out.cols());
    Var loss = loraview::sum_all(hadamard(out, tape.constant(weight)));
    tape.backward(loss);

    std::vector<DMat> dinputs;
    for (const auto& m : inputs) dinputs.emplace_back(m);
    const DMat dweight(weight);
    CheckResult res;
    res.forward_rel = oracle::relative_error(out.value(), c.oracle_fn(dinputs));
    auto fd = oracle::central_differences(
        [&](const std::vector<DMat>& x) { return oracle::contract(c.oracle_fn(x), dweight); }, dinputs);
    for (std::size_t k = 0; k < vars.size(); ++k)
        res.gradient_rel = std::max(res.gradient_rel, oracle::relative_error(tape.grad(vars[k]), fd[k]));
    return res;
}

}  // namespace opcheck
