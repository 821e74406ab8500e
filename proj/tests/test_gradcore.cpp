#include "lyapreg/gradcore/adam.hpp"
#include "lyapreg/gradcore/checkpoint.hpp"
#include "lyapreg/gradcore/tape.hpp"
#include "lyapreg/lyapunov.hpp"
#include "lyapreg/policy_training.hpp"
#include "fd_cases.hpp"
#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

using namespace lyapreg;
using namespace testing_support;

TEST_CASE("forward evaluates elementary graphs", "[gradcore]") {
    Tape t;
    const Var zero = t.input("x", std::vector<double>{0.0});
    CHECK(grad::tanh(zero).scalar() == 0.0);

    const Var m1 = t.input("y", std::vector<double>{-1.0});
    CHECK(grad::elu(m1).scalar() == Catch::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));
    CHECK(grad::elu(m1).scalar() == Catch::Approx(-0.6321).margin(1e-4));
}

TEST_CASE("unbound leaves are reported by name", "[gradcore]") {
    Tape t;
    const Var x = t.input("speed", 2);
    const Var y = grad::sum(x * x);
    CHECK_FALSE(t.evaluated(y));
    REQUIRE_THROWS_WITH(t.forward(), Catch::Matchers::ContainsSubstring("speed"));
    t.set_value(x, std::vector<double>{1.0, 2.0});
    t.forward();
    CHECK(y.scalar() == 5.0);
}

TEST_CASE("backward of a product", "[gradcore]") {
    Tape t;
    const Var x = t.input("x", std::vector<double>{2.0});
    const Var y = t.input("y", std::vector<double>{3.0});
    const auto g = t.backward(x * y);
    CHECK(g.at("x")[0] == 3.0);
    CHECK(g.at("y")[0] == 2.0);
}

TEST_CASE("relu subgradient", "[gradcore]") {
    for (auto [x, expected] : {std::pair{-0.5, 0.0}, std::pair{0.5, 1.0}, std::pair{0.0, 0.0}}) {
        Tape t;
        const Var v = t.input("x", std::vector<double>{x});
        CHECK(t.backward(grad::relu(v)).at("x")[0] == expected);
    }
}

TEST_CASE("clip passes gradient only inside the bounds", "[gradcore]") {
    for (auto [x, expected] : {std::pair{-2.0, 0.0}, std::pair{0.3, 1.0}, std::pair{2.0, 0.0}}) {
        Tape t;
        const Var v = t.input("x", std::vector<double>{x});
        const Var out = grad::clip(v, t.constant(-1.0), t.constant(1.0));
        CHECK(out.scalar() == std::clamp(x, -1.0, 1.0));
        CHECK(t.backward(out).at("x")[0] == expected);
    }
}

TEST_CASE("non-scalar roots are rejected", "[gradcore]") {
    Tape t;
    const Var x = t.input("x", std::vector<double>{1.0, 2.0});
    CHECK_THROWS_AS(t.backward(x * 2.0), ValidationError);
}

TEST_CASE("max_over_axis routes the subgradient to the earliest maximum", "[gradcore]") {
    Tape t;
    const Var a = t.input("a", std::vector<double>{1.0, 5.0});
    const Var b = t.input("b", std::vector<double>{1.0, 7.0});
    const Var c = t.input("c", std::vector<double>{0.5, 7.0});
    const Var parts[] = {a, b, c};
    const Var m = t.max_over_axis(parts);
    CHECK(m[0] == 1.0);
    CHECK(m[1] == 7.0);
    const auto g = t.backward(grad::sum(m));
    CHECK(g.at("a") == std::vector<double>{1.0, 0.0});
    CHECK(g.at("b") == std::vector<double>{0.0, 1.0});
    CHECK(g.at("c") == std::vector<double>{0.0, 0.0});
}

TEST_CASE("every primitive matches central differences", "[gradcore][fd]") {
    std::mt19937_64 rng(20240601);
    for (const PrimitiveCase& c : primitive_cases()) {
        INFO(c.name);
        CHECK(worst_primitive_error(c, rng, 100) <= 1e-4);
    }
}

TEST_CASE("affine matches central differences in weights, bias and input", "[gradcore][fd]") {
    std::mt19937_64 rng(7);
    for (int p = 0; p < 100; ++p) {
        const Vec w = uniform_vec(rng, 12, -1, 1);
        const Vec x = uniform_vec(rng, 4, -1, 1);
        const Vec b = uniform_vec(rng, 3, -1, 1);
        const bool transpose = p % 2 == 1;
        // y = W x + b with W 3×4, or y = Wᵀ x with W 4×3
        auto root = [&](Tape& t, const Vec& wv, const Vec& xv, const Vec& bv) {
            const Var wm = transpose ? t.parameter("w", wv, 4, 3) : t.parameter("w", wv, 3, 4);
            const Var xin = t.input("x", xv);
            const Var out = transpose ? grad::affine_transposed(wm, xin) : grad::affine(wm, xin, t.parameter("b", bv));
            return grad::sum(grad::tanh(out));
        };
        auto f = [&](const Vec& wv, const Vec& xv, const Vec& bv) {
            Tape t;
            return root(t, wv, xv, bv).scalar();
        };
        Tape t;
        const auto g = t.backward(root(t, w, x, b));
        for (std::size_t i = 0; i < w.size(); ++i) {
            CHECK(rel_err(g.at("w")[i], central_diff([&](const Vec& v) { return f(v, x, b); }, w, i)) <= 1e-4);
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(rel_err(g.at("x")[i], central_diff([&](const Vec& v) { return f(w, v, b); }, x, i)) <= 1e-4);
        }
        if (!transpose) {
            for (std::size_t i = 0; i < b.size(); ++i) {
                CHECK(rel_err(g.at("b")[i], central_diff([&](const Vec& v) { return f(w, x, v); }, b, i)) <= 1e-4);
            }
        }
    }
}

TEST_CASE("one-hidden-layer ELU network parameter gradients match central differences", "[gradcore][fd]") {
    std::mt19937_64 rng(11);
    const Vec x = uniform_vec(rng, 6, -2, 2);
    LyapunovNet net = initialize_lyapunov(3, 50, 5);
    const Vec theta = net.flat();

    auto loss_at = [&](const Vec& th) {
        LyapunovNet n = net;
        n.set_flat(th);
        Tape t;
        const LyapunovGraph g(t, n, true);
        return g.evaluate(t.constant(x)).value.scalar();
    };

    Tape t;
    const LyapunovGraph g(t, net, true);
    const Var v = g.evaluate(t.constant(x)).value;
    t.propagate(v);
    const Vec grads = g.flat_gradient();
    REQUIRE(grads.size() == theta.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        worst = std::max(worst, rel_err(grads[i], central_diff(loss_at, theta, i)));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("graph swing dynamics reproduce swing_rhs bit for bit", "[gradcore]") {
    const NetworkCase c = two_bus(1.0, 0.0, {0.0, 0.0});
    const PowerSystem sys(c, Equilibrium{SystemState::zeros(2), {0.0, 0.0}, 0.0, 0});
    const SystemState s{{std::numbers::pi / 2, 0.0}, {0.0, 0.0}};
    const Vec u{0.0, 0.0};
    const StateDerivative f = swing_rhs(sys.network, sys.flows, s, u);
    CHECK(f.omega_dot == Vec{-1.0, 1.0});

    Tape t;
    const DynamicsGraph dyn(t, sys, 0.02);
    const Var w = dyn.omega_dot(t.constant(s.delta), t.constant(s.omega), t.constant(u));
    CHECK(w[0] == f.omega_dot[0]);
    CHECK(w[1] == f.omega_dot[1]);

    // lossy, damped, nonzero action
    const NetworkCase c3 = three_bus();
    const PowerSystem sys3 = PowerSystem::from_case(c3);
    std::mt19937_64 rng(3);
    for (int p = 0; p < 20; ++p) {
        const SystemState s3{uniform_vec(rng, 3, -2, 2), uniform_vec(rng, 3, -1, 1)};
        const Vec u3 = uniform_vec(rng, 3, -1, 1);
        const StateDerivative f3 = swing_rhs(sys3.network, sys3.flows, s3, u3);
        Tape t3;
        const DynamicsGraph d3(t3, sys3, 0.02);
        const Var w3 = d3.omega_dot(t3.constant(s3.delta), t3.constant(s3.omega), t3.constant(u3));
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(w3[i] == f3.omega_dot[i]);
        }
    }
}

TEST_CASE("input gradient", "[gradcore][lyapunov]") {
    std::mt19937_64 rng(23);
    LyapunovNet net = initialize_lyapunov(3, 50, 9);
    const SystemState s{uniform_vec(rng, 3, -1, 1), uniform_vec(rng, 3, -1, 1)};

    SECTION("zero output weights give a zero gradient") {
        LyapunovNet z = net;
        std::fill(z.w2.begin(), z.w2.end(), 0.0);
        const InputGradient g = input_gradient(z, s);
        for (double x : g.d_delta) {
            CHECK(x == 0.0);
        }
        for (double x : g.d_omega) {
            CHECK(x == 0.0);
        }
    }

    SECTION("matches central differences") {
        Vec x = s.delta;
        x.insert(x.end(), s.omega.begin(), s.omega.end());
        auto f = [&](const Vec& v) {
            return value(net, SystemState{Vec(v.begin(), v.begin() + 3), Vec(v.begin() + 3, v.end())});
        };
        const InputGradient g = input_gradient(net, s);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(rel_err(g.d_delta[i], central_diff(f, x, i)) <= 1e-4);
            CHECK(rel_err(g.d_omega[i], central_diff(f, x, i + 3)) <= 1e-4);
        }
    }

    SECTION("duplicating a hidden unit with halved output weights changes nothing") {
        LyapunovNet d = net;
        const std::size_t r = 4;
        d.hidden += 1;
        d.w1.insert(d.w1.end(), net.w1.begin() + r * 6, net.w1.begin() + (r + 1) * 6);
        d.b1.push_back(net.b1[r]);
        d.w2[r] = net.w2[r] / 2.0;
        d.w2.push_back(net.w2[r] / 2.0);
        const InputGradient a = input_gradient(net, s);
        const InputGradient b = input_gradient(d, s);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(std::abs(a.d_delta[i] - b.d_delta[i]) <= 1e-10);
            CHECK(std::abs(a.d_omega[i] - b.d_omega[i]) <= 1e-10);
        }
    }

    SECTION("graph and plain paths agree exactly") {
        Tape t;
        const LyapunovGraph g(t, net, false);
        const auto node = g.evaluate(s);
        const LyapunovEval e = evaluate(net, s);
        CHECK(node.value.scalar() == e.value);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(node.grad_delta[i] == e.gradient.d_delta[i]);
            CHECK(node.grad_omega[i] == e.gradient.d_omega[i]);
        }
    }
}

TEST_CASE("gradients replay identically", "[gradcore]") {
    auto run = [] {
        LyapunovNet net = initialize_lyapunov(3, 50, 42);
        Tape t;
        const LyapunovGraph g(t, net, true);
        const auto node = g.evaluate(SystemState{{0.1, -0.2, 0.3}, {0.5, 0.0, -0.5}});
        t.propagate(node.value + grad::sum(node.grad_omega * node.grad_omega));
        return g.flat_gradient();
    };
    CHECK(run() == run());
}

TEST_CASE("Adam", "[gradcore]") {
    SECTION("step decay schedule") {
        const grad::StepDecaySchedule s{0.05, 0.9, 100};
        CHECK(s.at(0) == 0.05);
        CHECK(s.at(99) == 0.05);
        CHECK(s.at(100) == Catch::Approx(0.045).epsilon(1e-15));
        CHECK(s.at(250) == Catch::Approx(0.05 * 0.81).epsilon(1e-15));
    }
    SECTION("first step moves each coordinate by the learning rate against the gradient sign") {
        grad::Adam adam(3, {0.1, 1.0, 1});
        Vec p{1.0, 1.0, 1.0};
        adam.step(p, Vec{2.0, -0.5, 0.0});
        CHECK(p[0] == Catch::Approx(0.9).epsilon(1e-7));
        CHECK(p[1] == Catch::Approx(1.1).epsilon(1e-7));
        CHECK(p[2] == 1.0);
    }
    SECTION("minimizes a quadratic") {
        grad::Adam adam(2, {0.05, 1.0, 1});
        Vec p{3.0, -2.0};
        for (int i = 0; i < 2000; ++i) {
            adam.step(p, Vec{2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)});
        }
        CHECK(p[0] == Catch::Approx(1.0).margin(1e-3));
        CHECK(p[1] == Catch::Approx(-0.5).margin(1e-3));
    }
}

TEST_CASE("checkpoint round trip is bit exact", "[gradcore]") {
    std::mt19937_64 rng(99);
    grad::Checkpoint ck;
    ck.arch = {{"type", "test"}, {"width", 3}};
    ck.parameters["a"] = uniform_vec(rng, 17, -1e3, 1e3);
    ck.parameters["b"] = {std::numbers::pi, 1e-300, -0.0, 0.1};
    ck.rng_seed = 12345678901234ULL;
    ck.episode = 77;
    const grad::Checkpoint back = grad::checkpoint_from_json(Json::parse(grad::to_json(ck).dump()));
    CHECK(back.parameters == ck.parameters);
    CHECK(back.rng_seed == ck.rng_seed);
    CHECK(back.episode == ck.episode);
    CHECK(back.arch == ck.arch);

    Json j = grad::to_json(ck);
    j["version"] = 99;
    CHECK_THROWS_AS(grad::checkpoint_from_json(j), ValidationError);
}
