#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "lossnet/models.hpp"
#include "test_util.hpp"

using namespace lossnet;

namespace {

std::map<std::size_t, double> rate_by_jump(const std::vector<RateEntry>& table) {
    std::map<std::size_t, double> m;
    for (const auto& e : table) m[e.jump] = e.rate;
    return m;
}

Jump make_jump(std::vector<std::pair<std::size_t, int>> d) {
    Jump j;
    j.delta = std::move(d);
    return j;
}

std::size_t find_jump(const ModelSpec& model, const Jump& j) {
    const auto& js = model.jumps();
    for (std::size_t i = 0; i < js.size(); ++i)
        if (js[i] == j) return i;
    return StateSpace::npos;
}

// random point on the shell [I, y] = lambda, built as a convex mix of
// interior samples lying on both sides of the shell
Simplex random_on_shell(Rng& rng, const StateSpace& ss, double lambda) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        Simplex a = testutil::random_interior(rng, ss.size());
        Simplex b = testutil::random_interior(rng, ss.size());
        const double ma = marginal_mean(ss, a)[0];
        const double mb = marginal_mean(ss, b)[0];
        if ((ma - lambda) * (mb - lambda) > 0.0) continue;
        const double t = (lambda - ma) / (mb - ma);
        Vec w(ss.size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = (1.0 - t) * a[i] + t * b[i];
        return Simplex::normalized(std::move(w));
    }
    throw std::runtime_error("random_on_shell: could not bracket the shell");
}

} // namespace

TEST_CASE("jump_set: Open C=1 is {e1-e0, e0-e1}") {
    ModelSpec m = ModelSpec::open(1, 0.5);
    REQUIRE(m.jumps().size() == 2);
    CHECK(find_jump(m, make_jump({{0, -1}, {1, 1}})) != StateSpace::npos);
    CHECK(find_jump(m, make_jump({{0, 1}, {1, -1}})) != StateSpace::npos);
}

TEST_CASE("jump_set: MobileSplit has elementary jumps only") {
    ModelSpec m = ModelSpec::mobile_split(4, {1, 2}, {1.0, 0.5}, {1.0, 1.0}, {2.0, 0.7});
    CHECK(m.jumps().size() > 0);
    for (const auto& j : m.jumps()) {
        REQUIRE(j.delta.size() == 2);  // one up, one down coordinate
        int plus = 0, minus = 0;
        for (auto& [i, c] : j.delta) {
            if (c == 1) ++plus;
            if (c == -1) ++minus;
        }
        CHECK(plus == 1);
        CHECK(minus == 1);
    }
}

TEST_CASE("jump_set: Closed C=2 includes the move between two state-1 nodes") {
    ModelSpec m = ModelSpec::closed(2, 1.0);
    CHECK(find_jump(m, make_jump({{0, 1}, {1, -2}, {2, 1}})) != StateSpace::npos);
    // moves n -> n-1 are null events and never appear as jumps
    for (const auto& j : m.jumps()) CHECK(!j.delta.empty());
}

TEST_CASE("jump_set: every jump sums to zero") {
    Rng rng(3);
    std::vector<ModelSpec> models;
    models.push_back(ModelSpec::rerouting(4, 2.0));
    models.push_back(ModelSpec::mobile(4, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::mobile_split(4, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::closed(3, 1.5));
    models.push_back(ModelSpec::open(3, 1.5));
    for (const auto& m : models) {
        for (const auto& j : m.jumps()) {
            int s = 0;
            for (auto& [i, c] : j.delta) s += c;
            CHECK(s == 0);
        }
    }
}

TEST_CASE("finite_rates: Open at delta_0 has the single arrival entry with rate lambda N") {
    ModelSpec m = ModelSpec::open(2, 0.8);
    const long N = 57;
    EmpiricalVector y({N, 0, 0}, N);
    const auto table = finite_rates(m, y);
    REQUIRE(table.size() == 1);
    CHECK(m.jumps()[table[0].jump] == make_jump({{0, -1}, {1, 1}}));
    CHECK(table[0].rate == doctest::Approx(0.8 * N).epsilon(1e-15));
}

TEST_CASE("finite_rates: Rerouting C=1, N=3, counts=(1,2) matches hand enumeration") {
    const double lambda = 1.7;
    ModelSpec m = ModelSpec::rerouting(1, lambda);
    EmpiricalVector y({1, 2}, 3);
    const auto table = finite_rates(m, y);
    // one empty node receives arrivals at rate lambda; two occupied nodes
    // each complete service at rate 1; every rerouting pair hits a full node
    REQUIRE(table.size() == 2);
    const auto rates = rate_by_jump(table);
    CHECK(rates.at(find_jump(m, make_jump({{0, -1}, {1, 1}}))) == doctest::Approx(lambda));
    CHECK(rates.at(find_jump(m, make_jump({{0, 1}, {1, -1}}))) == doctest::Approx(2.0));
}

TEST_CASE("finite_rates: Mobile same-state move rate vanishes when a single node occupies the level") {
    ModelSpec m = ModelSpec::mobile(2, {1}, {1.0}, {1.0}, {3.0});
    // N=4 nodes: counts (2,1,1): exactly one node at level 1
    EmpiricalVector y({2, 1, 1}, 4);
    const auto rates = rate_by_jump(finite_rates(m, y));
    const std::size_t same_move = find_jump(m, make_jump({{0, 1}, {1, -2}, {2, 1}}));
    REQUIRE(same_move != StateSpace::npos);
    CHECK(rates.count(same_move) == 0);  // (N y_1 - 1) = 0
}

TEST_CASE("finite_rates enforces family N floors and Closed saturation") {
    CHECK_THROWS_AS(finite_rates(ModelSpec::rerouting(1, 1.0), EmpiricalVector({1, 1}, 2)), std::invalid_argument);
    CHECK_THROWS_AS(finite_rates(ModelSpec::mobile(1, {1}, {1.0}, {1.0}, {1.0}), EmpiricalVector({1, 0}, 1)),
                    std::invalid_argument);
    CHECK_THROWS_AS(finite_rates(ModelSpec::closed(1, 0.5), EmpiricalVector({0, 3}, 3)), std::invalid_argument);
}

TEST_CASE("limit_rates: Rerouting upgrade rates reproduce the mean-field multiplier") {
    ModelSpec m = ModelSpec::rerouting(3, 1.3);
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        Simplex y = testutil::random_interior(rng, m.space().size());
        const Vec mf = mean_field(m, y);
        const double rho = rho_of_y(m, y).rho[0];
        // birth-death closed form with arrival rho(y), service 1
        for (std::size_t n = 0; n < m.space().size(); ++n) {
            double expect = 0.0;
            if (n >= 1) expect += rho * y[n - 1];
            if (n + 1 < m.space().size()) expect += static_cast<double>(n + 1) * y[n + 1];
            expect -= (static_cast<double>(n) + (n + 1 < m.space().size() ? rho : 0.0)) * y[n];
            CHECK(std::abs(mf[n] - expect) < 1e-13);
        }
    }
}

TEST_CASE("limit_rates: MobileSplit arrival entries carry rate (lambda_k + gamma_k [I_k,y]) y_n") {
    ModelSpec m = ModelSpec::mobile_split(3, {1, 3}, {1.0, 0.4}, {1.0, 2.0}, {2.5, 0.3});
    Rng rng(7);
    const StateSpace& ss = m.space();
    for (int t = 0; t < 10; ++t) {
        Simplex y = testutil::random_interior(rng, ss.size());
        const Vec totals = marginal_mean(ss, y);
        const auto rates = rate_by_jump(limit_rates(m, y));
        for (std::size_t i = 0; i < ss.size(); ++i) {
            for (std::size_t k = 0; k < ss.num_classes(); ++k) {
                const std::size_t u = ss.up(i, k);
                if (u == StateSpace::npos) continue;
                const std::size_t j = find_jump(m, make_jump({{std::min(i, u), u > i ? -1 : 1}, {std::max(i, u), u > i ? 1 : -1}}));
                // delta sorted by index; i < u always for arrivals
                REQUIRE(j != StateSpace::npos);
                const double expect = (m.lambda()[k] + m.gamma()[k] * totals[k]) * y[i];
                CHECK(rates.at(j) == doctest::Approx(expect).epsilon(1e-13));
            }
        }
    }
}

TEST_CASE("finite rates over N converge to limit rates at O(1/N)") {
    std::vector<ModelSpec> models;
    models.push_back(ModelSpec::rerouting(2, 1.5));
    models.push_back(ModelSpec::mobile(2, {1}, {1.0}, {1.0}, {2.0}));
    models.push_back(ModelSpec::closed(2, 1.0));
    for (const auto& m : models) {
        Vec err;
        for (long N : {100, 1000, 10000}) {
            // representable empirical state: fractions in fiftieths
            std::vector<long> counts = {N / 2, 3 * N / 10, N - N / 2 - 3 * N / 10};
            EmpiricalVector y(counts, N);
            if (m.family() == Family::Closed && y.counts[2] == N) continue;
            const auto fin = rate_by_jump(finite_rates(m, y));
            const auto lim = rate_by_jump(limit_rates(m, y.to_simplex()));
            double e = 0.0;
            for (const auto& [j, r] : lim) {
                const double f = fin.count(j) ? fin.at(j) / static_cast<double>(N) : 0.0;
                e = std::max(e, std::abs(f - r));
            }
            err.push_back(e);
        }
        REQUIRE(err.size() == 3);
        // error shrinks ~10x per decade of N
        CHECK(err[0] > 30.0 * err[2]);
        CHECK(err[0] < 1.0);
    }
}

TEST_CASE("generator rows sum to zero and Rerouting C=1 has the closed form") {
    ModelSpec m = ModelSpec::rerouting(1, 2.0);
    Simplex y = Simplex::normalized({0.25, 0.75});
    const double rho = 2.0 * (1.0 + 2.0 * 0.75 * 0.25);
    Eigen::MatrixXd L = generator(m, y);
    CHECK(L(0, 0) == doctest::Approx(-rho));
    CHECK(L(0, 1) == doctest::Approx(rho));
    CHECK(L(1, 0) == doctest::Approx(1.0));
    CHECK(L(1, 1) == doctest::Approx(-1.0));

    Rng rng(9);
    std::vector<ModelSpec> models;
    models.push_back(ModelSpec::rerouting(4, 2.0));
    models.push_back(ModelSpec::mobile(4, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::open(3, 1.5));
    for (const auto& mm : models) {
        Simplex yy = testutil::random_interior(rng, mm.space().size());
        Eigen::MatrixXd G = generator(mm, yy);
        for (Eigen::Index r = 0; r < G.rows(); ++r) CHECK(std::abs(G.row(r).sum()) < 1e-12);
    }
}

TEST_CASE("erlang measure of rho(y) is stationary for L_y") {
    Rng rng(11);
    std::vector<ModelSpec> models;
    models.push_back(ModelSpec::rerouting(4, 2.0));
    models.push_back(ModelSpec::mobile(5, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::open(3, 1.5));
    for (const auto& m : models) {
        for (int t = 0; t < 10; ++t) {
            Simplex y = testutil::random_interior(rng, m.space().size());
            const Simplex nu = erlang_measure(m.space(), rho_of_y(m, y));
            Eigen::MatrixXd L = generator(m, y);
            Eigen::RowVectorXd v(static_cast<Eigen::Index>(nu.size()));
            for (std::size_t i = 0; i < nu.size(); ++i) v(static_cast<Eigen::Index>(i)) = nu[i];
            CHECK((v * L).cwiseAbs().maxCoeff() < 1e-13);
        }
    }
}

TEST_CASE("rho_of_y worked examples") {
    ModelSpec r = ModelSpec::rerouting(2, 1.1);
    CHECK(rho_of_y(r, Simplex::checked({0.5, 0.5, 0.0})).rho[0] == doctest::Approx(1.1));
    CHECK(rho_of_y(r, Simplex::checked({0.25, 0.25, 0.5})).rho[0] == doctest::Approx(1.65));

    ModelSpec o = ModelSpec::open(2, 0.8);
    CHECK(rho_of_y(o, Simplex::checked({0.4, 0.4, 0.2})).rho[0] == doctest::Approx(1.0));
    CHECK_THROWS_AS(rho_of_y(o, Simplex::dirac(2, 3)), std::invalid_argument);
}

TEST_CASE("mean field vanishes at the Erlang fixed point and always sums to zero") {
    ModelSpec o = ModelSpec::open(2, 0.8);
    const Vec mf = mean_field(o, Simplex::checked({0.4, 0.4, 0.2}));
    CHECK(sup_norm(mf) < 1e-13);

    Rng rng(13);
    std::vector<ModelSpec> models;
    models.push_back(ModelSpec::rerouting(4, 2.0));
    models.push_back(ModelSpec::mobile(4, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::mobile_split(4, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::closed(3, 1.5));
    models.push_back(ModelSpec::open(3, 1.5));
    for (const auto& m : models) {
        for (int t = 0; t < 20; ++t) {
            Simplex y = testutil::random_interior(rng, m.space().size());
            CHECK(std::abs(sum(mean_field(m, y))) < 1e-12);
        }
    }
}

TEST_CASE("Mobile and MobileSplit share the limiting vector field") {
    ModelSpec mob = ModelSpec::mobile(5, {1, 5}, {2.0, 10.0}, {1.0, 1.0}, {3.0, 3.0});
    ModelSpec split = make_split(mob);
    Rng rng(17);
    for (int t = 0; t < 100; ++t) {
        Simplex y = testutil::random_interior(rng, mob.space().size());
        CHECK(sup_dist(mean_field(mob, y), mean_field(split, y)) < 1e-12);
    }
}

TEST_CASE("make_split keeps parameters and drops composite jumps") {
    ModelSpec mob = ModelSpec::mobile(4, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7});
    ModelSpec split = make_split(mob);
    CHECK(split.family() == Family::MobileSplit);
    CHECK(split.lambda() == mob.lambda());
    CHECK(split.mu() == mob.mu());
    CHECK(split.gamma() == mob.gamma());
    for (const auto& j : split.jumps()) CHECK(j.delta.size() == 2);
    CHECK_THROWS_AS(make_split(split), std::invalid_argument);
    CHECK_THROWS_AS(make_split(ModelSpec::open(2, 1.0)), std::invalid_argument);
}

TEST_CASE("boundary rule: jumps leaving the simplex carry zero rate") {
    Rng rng(19);
    std::vector<ModelSpec> models;
    models.push_back(ModelSpec::rerouting(3, 2.0));
    models.push_back(ModelSpec::mobile(3, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::mobile_split(3, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::closed(3, 1.5));
    models.push_back(ModelSpec::open(3, 1.5));
    for (const auto& m : models) {
        for (int t = 0; t < 10; ++t) {
            // zero out a random subset of coordinates
            Vec w(m.space().size());
            for (auto& x : w) x = rng.uniform() < 0.4 ? 0.0 : 0.1 + rng.uniform();
            w[0] = std::max(w[0], 0.05);
            if (m.family() == Family::Closed || m.family() == Family::Open) w[m.space().size() - 1] = 0.0;
            Simplex y = Simplex::normalized(std::move(w));

            const auto table = limit_rates(m, y);
            for (const auto& e : table) {
                for (auto& [i, c] : m.jumps()[e.jump].delta) {
                    if (c < 0) CHECK(y[i] > 0.0);
                }
            }
        }
    }
}

TEST_CASE("conservation laws of the mean field") {
    // Closed: <I, m_y> = 0 for every y (moves conserve customers)
    ModelSpec cl = ModelSpec::closed(4, 2.0);
    Rng rng(23);
    for (int t = 0; t < 50; ++t) {
        Simplex y = testutil::random_interior(rng, cl.space().size());
        const Vec mf = mean_field(cl, y);
        double s = 0.0;
        for (std::size_t n = 0; n < mf.size(); ++n) s += static_cast<double>(n) * mf[n];
        CHECK(std::abs(s) < 1e-12);
    }
    // Open: <I, m_y> = lambda - [I, y]
    ModelSpec op = ModelSpec::open(4, 2.0);
    for (int t = 0; t < 50; ++t) {
        Simplex y = testutil::random_interior(rng, op.space().size());
        const Vec mf = mean_field(op, y);
        double s = 0.0;
        for (std::size_t n = 0; n < mf.size(); ++n) s += static_cast<double>(n) * mf[n];
        CHECK(std::abs(s - (2.0 - marginal_mean(op.space(), y)[0])) < 1e-12);
    }
}

TEST_CASE("mean field agrees with y L_y across families") {
    Rng rng(29);
    std::vector<ModelSpec> models;
    models.push_back(ModelSpec::rerouting(4, 2.0));
    models.push_back(ModelSpec::mobile(4, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::mobile_split(4, {1, 2}, {1.0, 0.5}, {1.0, 2.0}, {2.0, 0.7}));
    models.push_back(ModelSpec::open(3, 1.5));
    for (const auto& m : models) {
        for (int t = 0; t < 100; ++t) {
            Simplex y = testutil::random_interior(rng, m.space().size());
            CHECK(sup_dist(mean_field(m, y), flow_field(m, y)) < 1e-12);
        }
    }
    // Closed agrees on the invariant shell [I,y] = lambda
    ModelSpec cl = ModelSpec::closed(3, 1.5);
    for (int t = 0; t < 100; ++t) {
        Simplex y = random_on_shell(rng, cl.space(), 1.5);
        CHECK(sup_dist(mean_field(cl, y), flow_field(cl, y)) < 1e-12);
    }
}

TEST_CASE("total finite rate at delta_0 for Open equals lambda N exactly") {
    ModelSpec m = ModelSpec::open(3, 1.2);
    EmpiricalVector y({40, 0, 0, 0}, 40);
    CHECK(total_rate(finite_rates(m, y)) == doctest::Approx(1.2 * 40).epsilon(1e-15));
}

TEST_CASE("Mobile with gamma = 0 decouples into independent Erlang loads") {
    ModelSpec m = ModelSpec::mobile(4, {1, 2}, {2.0, 1.5}, {1.0, 3.0}, {0.0, 0.0});
    // no move events at all
    for (const auto& ev : m.events()) CHECK(ev.kind != detail::EventKind::Move);
    Rng rng(31);
    for (int t = 0; t < 10; ++t) {
        Simplex y = testutil::random_interior(rng, m.space().size());
        const LoadVector rho = rho_of_y(m, y);
        CHECK(rho.rho[0] == doctest::Approx(2.0));
        CHECK(rho.rho[1] == doctest::Approx(0.5));
    }
}

TEST_CASE("splitting preserves the finite-N mean drift exactly") {
    ModelSpec mob = ModelSpec::mobile(4, {1, 2}, {1.0, 0.6}, {1.0, 1.4}, {2.0, 0.8});
    ModelSpec split = make_split(mob);
    Rng rng(37);
    const long N = 23;
    for (int t = 0; t < 30; ++t) {
        // random occupancy of N nodes
        std::vector<long> c(mob.space().size(), 0);
        for (long i = 0; i < N; ++i) c[rng.uniform_index(c.size())] += 1;
        EmpiricalVector y(c, N);

        auto drift = [](const ModelSpec& m, const EmpiricalVector& s) {
            Vec d(m.space().size(), 0.0);
            for (const auto& e : finite_rates(m, s))
                for (const auto& [i, coef] : m.jumps()[e.jump].delta) d[i] += coef * e.rate;
            return d;
        };
        CHECK(sup_dist(drift(mob, y), drift(split, y)) < 1e-10);
    }
}

TEST_CASE("MobileSplit accepts a single node; move arrivals have no peer source") {
    ModelSpec m = ModelSpec::mobile_split(2, {1}, {0.7}, {1.0}, {3.0});
    EmpiricalVector y({0, 1, 0}, 1);
    const auto rates = rate_by_jump(finite_rates(m, y));
    // arrival into level 2: lambda only, no other nodes to move from
    const std::size_t up = find_jump(m, make_jump({{1, -1}, {2, 1}}));
    const std::size_t down = find_jump(m, make_jump({{0, 1}, {1, -1}}));
    CHECK(rates.at(up) == doctest::Approx(0.7));
    CHECK(rates.at(down) == doctest::Approx(4.0));  // (mu + gamma) n
}
