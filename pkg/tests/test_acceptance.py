"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N (...): PASS|FAIL`` line; the same
lines are repeated in the terminal summary.
"""

import dataclasses
import math
import threading
from collections import deque

import numpy as np
import pytest

from microcal import campaign as C
from microcal import densities as K
from microcal import descriptors as D
from microcal import lattice, optimizer
from microcal import surrogate as S

GG_TARGET = 0.70


@pytest.fixture(scope="module")
def gg_campaigns(tmp_path_factory):
    """Desk-scale grain-growth campaigns for three master seeds."""
    runs = []
    for seed in (0, 1, 2):
        out = tmp_path_factory.mktemp(f"gg{seed}")
        cfg = dataclasses.replace(C.CampaignConfig.defaults("grain_growth"), master_seed=seed)
        runs.append((out, C.run_campaign(cfg, out_dir=out)))
    return runs


def test_criterion_1_grain_growth_recovery(gg_campaigns, criterion):
    found = []
    for _, res in gg_campaigns:
        done = [t for t in res.trials if t.status == "completed"]
        assert len(done) <= 50
        found.append(float(res.best.x[0]))
    hits = sum(abs(k - GG_TARGET) <= 0.05 for k in found)
    criterion(1, hits >= 2, f"best kBTs per seed {[round(k, 4) for k in found]}, {hits}/3 within 0.05")


def test_criterion_2_noise_floor_separation(criterion):
    cfg = C.CampaignConfig.defaults("grain_growth")
    target = C.prepare_target(C.TargetSpec.from_config(cfg), cfg)
    seeds = [C.replicate_seed(cfg.master_seed, i) for i in range(10)]
    rep = [C.evaluate_candidate([GG_TARGET], s, cfg, target).y_scalar for s in seeds]
    off = [C.evaluate_candidate([0.25], s, cfg, target).y_scalar for s in seeds]
    m_rep, m_off = float(np.mean(rep)), float(np.mean(off))
    ok = m_rep > 0 and m_off >= 3 * m_rep
    criterion(2, ok, f"replicate mean {m_rep:.4g}, off-target mean {m_off:.4g}, ratio {m_off / m_rep:.1f}")


def test_criterion_3_kl_correctness(criterion):
    g = np.linspace(-12, 13, 4001)
    pdf = lambda mu: np.exp(-0.5 * (g - mu) ** 2) / math.sqrt(2 * math.pi)
    kl_gauss = K.kl_divergence(K.Density(g, pdf(0)), K.Density(g, pdf(1)))
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    direct = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    two_bin = K.weighted_kl(p, q)
    dens = K.kde(np.random.default_rng(0).normal(size=300))
    self_kl = K.kl_divergence(dens, dens)
    copy_kl = K.kl_divergence(dens, K.Density(dens.grid.copy(), dens.values.copy()))
    ok = (abs(kl_gauss - 0.5) <= 0.005 and abs(two_bin - 0.14384) <= 1e-5
          and abs(two_bin - direct) <= 1e-6 and self_kl == 0.0 and copy_kl == 0.0)
    criterion(3, ok, f"N(0,1)||N(1,1)={kl_gauss:.6f}, two-bin={two_bin:.8f}, kl(p,p)={self_kl}")


def _flood_fill(s):
    L, W = s.shape
    comp = -np.ones(s.shape, dtype=np.int64)
    n = 0
    for y0 in range(L):
        for x0 in range(W):
            if comp[y0, x0] >= 0:
                continue
            comp[y0, x0] = n
            q = deque([(y0, x0)])
            while q:
                y, x = q.popleft()
                for yy, xx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= yy < L and 0 <= xx < W and comp[yy, xx] < 0 and s[yy, xx] == s[y, x]:
                        comp[yy, xx] = n
                        q.append((yy, xx))
            n += 1
    return comp, n


def test_criterion_4_descriptor_oracles(criterion):
    rng = np.random.default_rng(4)
    seg_ok = chord_ok = True
    for _ in range(100):
        s = rng.integers(0, rng.integers(2, 8), size=(32, 32))
        ms = lattice.Microstructure(s)
        comp, n = D.label_components(ms)
        ref, m = _flood_fill(s)
        seg_ok &= n == m and np.array_equal(comp, ref)
        rows, lengths, _ = D._row_runs(s)
        chord_ok &= np.all(np.bincount(rows, lengths, minlength=32) == 32)

    y, x = np.mgrid[0:2, 0:4]
    fit = D.fit_ellipse(D.Grain(0, np.column_stack((x.ravel(), y.ravel()))))
    ell_ok = (abs(fit.a - 4 / math.sqrt(3)) < 1e-9 and abs(fit.b - 2 / math.sqrt(3)) < 1e-9
              and abs(fit.theta) < 1e-9)

    weld = lattice.run_weld(lattice.WeldParams(seed=21))
    grains = D.segment_grains(weld)
    filt_ok = True
    prev = None
    for t in (0, 50, 100, 150, 200, 250):
        cfg = D.FilterConfig(t)
        kept = D.apply_filter(grains, cfg)
        ids = [id(g) for g in kept]
        filt_ok &= [id(g) for g in D.apply_filter(kept, cfg)] == ids
        if prev is not None:
            filt_ok &= set(ids) <= prev
        prev = set(ids)
    ok = seg_ok and chord_ok and ell_ok and filt_ok
    criterion(4, ok, f"segmentation={seg_ok} chords={chord_ok} ellipse={ell_ok} filter={filt_ok}")


def test_criterion_5_potts_invariants(criterion):
    p = lattice.GrainGrowthParams(width=256, length=256, num_spins=4096, kbts=0.0, steps=50, seed=5)
    ms, tr = lattice.run_grain_growth(p, trace=True)
    energy_ok = (bool(np.all(np.diff(tr.energies) <= 0)) and tr.max_accepted_delta <= 0
                 and tr.energies[-1] == lattice.boundary_energy(ms))

    rng = np.random.default_rng(5)
    n = 10 ** 6
    de = rng.integers(-4, 5, n).astype(np.int64)
    kt = rng.uniform(0, 5, n)
    kt[rng.random(n) < 0.05] = 0.0
    mob = rng.uniform(0, 1, n)
    mob[rng.random(n) < 0.01] = 1.0
    acc = lattice.acceptance_probability
    fuzz_ok = all(0.0 <= acc(int(d), float(k), float(m)) <= 1.0 for d, k, m in zip(de, kt, mob))

    wp = lattice.WeldParams(haz=0, seed=5)
    weld, hist = lattice.run_weld(wp, history=True)
    frozen = ~hist.ever_molten
    frozen_ok = bool(np.array_equal(weld.spins[frozen], hist.initial.spins[frozen]))
    ok = energy_ok and fuzz_ok and frozen_ok
    criterion(5, ok, f"energy non-increasing={energy_ok} ({tr.energies[0]} -> {tr.energies[-1]}), "
                     f"acceptance in [0,1]={fuzz_ok}, frozen zone intact={frozen_ok} "
                     f"({int(frozen.sum())} sites)")


def test_criterion_6_gp_numerics(gg_campaigns, criterion):
    rng = np.random.default_rng(6)
    worst = 0.0
    for d in (1, 3):
        for _ in range(10):
            X = rng.random((12, d))
            y = np.sin(3 * X).sum(1) + 0.05 * rng.standard_normal(12)
            hp = S.Hyperparams(np.exp(rng.uniform(-1.5, 0.5, d)), float(np.exp(rng.uniform(-1, 1))),
                               float(np.exp(rng.uniform(-6, -1))))
            m = S.fit(X, y, np.tile([0.0, 1.0], (d, 1)), S.FitOptions(hyperparams=hp))
            _, g = S.log_marginal_likelihood(m)
            th = hp.theta
            fd = np.empty_like(th)
            for i in range(len(th)):
                e = np.zeros_like(th)
                e[i] = 1e-5
                fd[i] = (S.lml_at(th + e, m) - S.lml_at(th - e, m)) / 2e-5
            worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6))))

    # sigma_n^2 is a standardized-unit quantity, so the residual is measured
    # in the model's standardized outputs (raw-unit error scales with y_std)
    interp = raw = 0.0
    for k in range(10):
        X = np.random.default_rng(k).uniform(-2, 5, (15, 2))
        y = X[:, 0] ** 2 - 3 * X[:, 1]
        m = S.fit(X, y, [[-2, 5], [-2, 5]],
                  S.FitOptions(hyperparams=S.Hyperparams(np.array([0.3, 0.3]), 1.0, 1e-8)))
        err = float(np.max(np.abs(S.predict(m, X)[0] - y)))
        raw = max(raw, err)
        interp = max(interp, err / m.y_std)

    trace_ok = True
    for out, _ in gg_campaigns:
        b = optimizer.best_so_far(optimizer.read_trials(out / "trials.jsonl"))
        conv = np.loadtxt(out / "convergence.csv", delimiter=",", skiprows=1, usecols=5)
        trace_ok &= bool(np.all(np.diff(b) <= 0) and np.all(np.diff(conv) <= 0))
    ok = worst < 1e-4 and interp < 1e-6 and trace_ok
    criterion(6, ok, f"max grad rel err {worst:.2e}, training-point error {interp:.2e} "
                     f"standardized ({raw:.2e} raw), "
                     f"best-so-far monotone={trace_ok}")


def test_criterion_7_scalarization_identities(criterion):
    rng = np.random.default_rng(7)
    ws, cheb, aug = K.ScalarizationConfig(), K.ScalarizationConfig("chebyshev"), None
    worst = 0.0
    for _ in range(1000):
        s = int(rng.integers(1, 12))
        y = rng.random(s)
        lam = rng.random(s) + 0.01
        z = rng.random(s) * 0.1
        rho = float(rng.uniform(1e-3, 0.2))
        aug = K.ScalarizationConfig("augmented_chebyshev", tuple(lam), tuple(z), rho)
        c = K.ScalarizationConfig("chebyshev", tuple(lam), tuple(z))
        w = K.ScalarizationConfig("weighted_sum", tuple(lam))
        worst = max(worst,
                    abs(K.scalarize(y, ws) - y.sum()),
                    abs(K.scalarize(y, cheb) - y.max()),
                    abs(K.scalarize(y, aug) - (K.scalarize(y, c) + rho * K.scalarize(y, w))))
    criterion(7, worst <= 1e-12, f"max deviation {worst:.2e} over 1000 vectors")


class _Counter:
    def __init__(self, f):
        self.f = f
        self.now = self.peak = 0
        self.lock = threading.Lock()

    def __call__(self, x, tid):
        with self.lock:
            self.now += 1
            self.peak = max(self.peak, self.now)
        try:
            return self.f(x, tid)
        finally:
            with self.lock:
                self.now -= 1


def test_criterion_8_dispatcher_contract(tmp_path, criterion):
    # instrumented grain-growth campaign on a thread pool
    cfg = dataclasses.replace(C.CampaignConfig.defaults("grain_growth"), max_trials=16, master_seed=8)
    target = C.prepare_target(C.TargetSpec.from_config(cfg), cfg)
    ev = _Counter(C.make_evaluator(cfg, target))
    log = tmp_path / "trials.jsonl"
    with open(log, "w") as fh:
        res = optimizer.run_dispatcher(ev, cfg.bounds, cfg.policy, cfg.initial_points, cfg.max_trials,
                                       seed=cfg.master_seed, executor="thread", jobs=4,
                                       on_trial=lambda t: fh.write(t.to_json() + "\n"))
    inflight_ok = ev.peak <= 4 and res.max_in_flight <= 4

    logged = optimizer.read_trials(log)
    replay = optimizer.replay_proposals(logged, cfg.bounds, cfg.policy, cfg.initial_points,
                                        cfg.master_seed)
    by_id = {t.trial_id: t.x for t in logged}
    replay_ok = len(replay) == len(logged) and all(np.array_equal(by_id[i], x) for i, x in replay)

    hits = 0
    for seed in range(10):
        def f(x, tid, seed=seed):
            return float((x[0] - 0.3) ** 2 + 0.01 * np.random.default_rng([seed, tid]).standard_normal())
        r = optimizer.run_dispatcher(f, [[-1.0, 1.0]], optimizer.BatchPolicy(3, 1, 0), max_trials=40,
                                     seed=seed)
        best = min((t for t in r.trials if t.status == "completed"), key=lambda t: t.y_scalar)
        hits += abs(best.x[0] - 0.3) <= 0.05
    ok = inflight_ok and replay_ok and hits >= 9
    criterion(8, ok, f"peak in-flight {ev.peak}, replay exact={replay_ok}, quadratic hits {hits}/10")


def test_criterion_9_weld_signature(criterion):
    bands = D.BandConfig(60, 20, 1)
    rows_out = []
    ok = True
    for seed in (0, 1, 2):
        p = lattice.WeldParams(seed=seed)
        ms, hist = lattice.run_weld(p, history=True)
        comp, _ = D.label_components(ms)
        band = np.ascontiguousarray(comp[bands.rows(0, ms.length)])
        _, lx, _ = D._row_runs(band)
        _, ly, _ = D._row_runs(np.ascontiguousarray(band.T))
        area = np.bincount(comp.ravel())
        cy = np.bincount(comp.ravel(), np.repeat(np.arange(ms.length), ms.width)) / area
        in_track = np.abs(cy - (ms.length - 1) / 2.0) <= p.pool_width / 2.0
        track_area = float(area[in_track & (area > 150)].mean())
        base_area = D.mean_filtered_area(hist.initial, 0)
        ok &= lx.mean() > ly.mean() and track_area > base_area
        rows_out.append(f"seed {seed}: x {lx.mean():.1f} > y {ly.mean():.1f}, "
                        f"track {track_area:.0f} > base {base_area:.1f}")
    criterion(9, ok, "; ".join(rows_out))


def test_criterion_10_correlations(tmp_path, criterion):
    cfg = dataclasses.replace(C.CampaignConfig.defaults("weld"), max_trials=8,
                              policy=optimizer.BatchPolicy(3, 1, 0))
    C.run_campaign(cfg, out_dir=tmp_path / "weld")
    R, ids = K.read_correlations_csv(tmp_path / "weld" / "correlations.csv")
    ok_campaign = (ids == list(range(1, 12)) and np.allclose(R, R.T, equal_nan=True)
                   and np.all(np.diag(R) == 1.0))

    rng = np.random.default_rng(10)
    trials = []
    for i in range(20):
        a = rng.random()
        y = (a, 2 * a, rng.random())
        trials.append(optimizer.Trial(i, np.array([0.5]), 1, "ei", y_vector=y, descriptor_ids=(1, 4, 7),
                                      y_scalar=sum(y), status="completed", completion_index=i))
    log = tmp_path / "synthetic.jsonl"
    log.write_text("".join(t.to_json() + "\n" for t in trials))
    C.write_report(optimizer.read_trials(log), tmp_path / "syn")
    Rs, _ = K.read_correlations_csv(tmp_path / "syn" / "correlations.csv")
    ok_synth = abs(Rs[0, 1] - 1.0) <= 1e-9 and np.allclose(Rs, Rs.T) and np.all(np.diag(Rs) == 1.0)
    criterion(10, ok_campaign and ok_synth,
              f"campaign matrix symmetric/unit-diagonal={ok_campaign}, R2(y=2x)={Rs[0, 1]:.12f}")
