"""Brute-force numerical checks on small label spaces.

Each check returns a ``ConsistencyReport`` holding the measured values, the
tolerances they were compared against, and any tables produced on the way.
Nothing here asserts an identity it has not measured.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import atm, data, labelgen, losses, nn, trainer, transition
from .transition import FlipProfile, RankDeficientError, RivalMatrix

ORACLE_LIMIT = 6
RISK_LIMIT = 5
LOG_FLOOR = 1e-12


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{verdict} {self.name}: value={self.value:.6g} tol={self.tol:.3g}{extra}"


@dataclass
class ConsistencyReport:
    name: str
    checks: list = field(default_factory=list)
    table: list = field(default_factory=list)
    rank: dict = field(default_factory=dict)
    max_deviation: float | None = None
    tv_error: float | None = None
    finalized: bool = False

    def add(self, name, value, tol, passed, detail=""):
        if self.finalized:
            raise RuntimeError(f"report {self.name!r} is finalized")
        self.checks.append(Check(name, float(value), float(tol), bool(passed), detail))
        return self

    def finalize(self) -> "ConsistencyReport":
        self.finalized = True
        return self

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list:
        return [c.line() for c in self.checks]

    def write_table(self, path):
        if not self.table:
            return
        keys = list(self.table[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            for row in self.table:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def relaxed_rival_matrix(entries) -> RivalMatrix:
    """A rival matrix that skips validation, for fixtures such as the zero
    matrix or literal non-stochastic tables."""
    return RivalMatrix._unchecked(np.asarray(entries, dtype=np.float64))


def oracle_q_bar(c: int, profile: FlipProfile) -> np.ndarray:
    """``P(set | Y=y)`` over all ``2**c`` masks, by explicit loops.

    Row ``m`` is the set with bitmask ``m`` (row 0, the empty set, is zero),
    so every column sums to one.
    """
    if c > ORACLE_LIMIT:
        raise ValueError(f"oracle enumeration is limited to c <= {ORACLE_LIMIT}")
    rates = [float(r) for r in profile.realized(c)]
    out = np.zeros((2**c, c))
    for mask in range(2**c):
        for y in range(c):
            if not (mask >> y) & 1:
                continue
            prob = 1.0
            for b in range(c):
                if b == y:
                    continue
                prob *= rates[b] if (mask >> b) & 1 else 1.0 - rates[b]
            out[mask, y] = prob
    return out


def q_bar_equivalence(cs=(3, 4, 5), qs=(0.1, 0.3, 0.5), tol=1e-12, sum_tol=1e-9) -> ConsistencyReport:
    """Compare the library enumeration with the loop oracle.

    The library matrix omits the full set, so its columns are compared
    against the oracle's proper-subset rows and total probability is checked
    as column sum plus full-set mass.
    """
    rep = ConsistencyReport("q_bar_equivalence")
    worst_diff = worst_sum = 0.0
    for c, q in itertools.product(cs, qs):
        profile = FlipProfile(q)
        lib = transition.enumerate_q_bar(c, profile)
        ora = oracle_q_bar(c, profile)
        diff = float(np.max(np.abs(lib - ora[1:-1])))
        total = lib.sum(axis=0) + transition.full_set_mass(c, profile)
        sum_err = float(max(np.max(np.abs(total - 1.0)), np.max(np.abs(ora.sum(axis=0) - 1.0))))
        worst_diff, worst_sum = max(worst_diff, diff), max(worst_sum, sum_err)
        rep.table.append({"c": c, "q": q, "max_abs_diff": diff, "column_sum_error": sum_err})
    rep.add("entrywise difference", worst_diff, tol, worst_diff <= tol)
    rep.add("column total probability", worst_sum, sum_tol, worst_sum <= sum_tol)
    return rep.finalize()


def _set_loss(members: np.ndarray, mf: np.ndarray) -> np.ndarray:
    """Corrected loss with the target uniform over each candidate set.

    members: (S, c) bool; mf: (G, c). Returns (G, S).
    """
    logs = np.log(np.maximum(mf, LOG_FLOOR))
    return -(logs @ members.T.astype(np.float64)) / members.sum(axis=1)[None, :]


def set_likelihoods(c: int, rival: RivalMatrix, profile: FlipProfile):
    """``W[y, S] = sum_r T[y, r] P(S | y, r)`` over every nonempty mask ``S``.

    A rival row with no mass means no rival is injected for that class.
    """
    rates = profile.realized(c)
    masks = np.arange(1, 2**c)
    members = ((masks[:, None] >> np.arange(c)[None, :]) & 1).astype(bool)
    t = rival.entries
    w = np.zeros((c, len(masks)))

    def flips(required):
        free = np.ones(c, dtype=bool)
        free[list(required)] = False
        ok = members[:, list(required)].all(axis=1)
        f = np.where(members, rates[None, :], 1.0 - rates[None, :])
        f = np.where(free[None, :], f, 1.0)
        return np.where(ok, f.prod(axis=1), 0.0)

    for y in range(c):
        if t[y].sum() <= 0.0:
            w[y] = flips({y})
            continue
        for r in range(c):
            if t[y, r] > 0.0:
                w[y] += t[y, r] * flips({y, r})
    return w, members


def risk_deviation(rival: RivalMatrix, profile: FlipProfile, f: np.ndarray, posterior: np.ndarray):
    """Per-point ``|R_hat - R|`` between expected corrected risk and clean risk."""
    c = rival.c
    if c > RISK_LIMIT:
        raise ValueError(f"risk enumeration is limited to c <= {RISK_LIMIT}")
    f = np.atleast_2d(f)
    posterior = np.atleast_2d(posterior)
    w, members = set_likelihoods(c, rival, profile)
    m = rival.entries + np.eye(c)
    loss = _set_loss(members, f @ m.T)
    r_hat = ((posterior @ w) * loss).sum(axis=1)
    r_clean = -(posterior * np.log(np.maximum(f, LOG_FLOOR))).sum(axis=1)
    return np.abs(r_hat - r_clean)


def random_grid(c: int, size: int, seed: int):
    rng = np.random.default_rng(seed)
    f = nn.softmax(rng.standard_normal((size, c)))
    posterior = rng.dirichlet(np.ones(c), size)
    return f, posterior


def risk_consistency_check(c: int, rival: RivalMatrix, profile: FlipProfile, f=None, posterior=None,
                           seed: int = 0, grid_size: int = 64, tol: float | None = None) -> ConsistencyReport:
    """Measure the corrected-risk deviation on a grid of instances.

    With ``tol`` set the check passes iff the maximum deviation is at most
    ``tol``; without it the value is recorded as a measurement only.
    """
    if f is None:
        f, posterior = random_grid(c, grid_size, seed)
    dev = risk_deviation(rival, profile, f, posterior)
    rep = ConsistencyReport("risk_consistency")
    rep.max_deviation = float(dev.max())
    for i, d in enumerate(dev):
        rep.table.append({"point": i, "deviation": float(d)})
    if tol is None:
        rep.add("max deviation (measured)", rep.max_deviation, float("inf"), True, "reported, not asserted")
    else:
        rep.add("max deviation", rep.max_deviation, tol, rep.max_deviation <= tol)
    return rep.finalize()


def risk_probe(seed: int = 0) -> ConsistencyReport:
    """The forced clean case plus seed-stability of the noisy cases."""
    rep = ConsistencyReport("risk_probe")
    clean = risk_consistency_check(3, relaxed_rival_matrix(np.zeros((3, 3))), FlipProfile(0.0), seed=seed)
    rep.add("clean regime deviation", clean.max_deviation, 1e-12, clean.max_deviation <= 1e-12)
    worst = 0.0
    for c, q in ((3, 0.3), (4, 0.1), (5, 0.5)):
        rival = transition.build_rival_matrix(c, c - 1, 1.0 / (c - 1))
        a = risk_consistency_check(c, rival, FlipProfile(q), seed=seed)
        b = risk_consistency_check(c, rival, FlipProfile(q), seed=seed)
        worst = max(worst, abs(a.max_deviation - b.max_deviation))
        rep.table.append({"c": c, "q": q, "max_deviation": a.max_deviation})
    rep.add("noisy regime rerun difference", worst, 1e-12, worst <= 1e-12)
    rep.max_deviation = max(r["max_deviation"] for r in rep.table)
    return rep.finalize()


def rank_diagnostics(M, q_star=None, tol: float = transition.STRUCT_TOL) -> dict:
    m = np.asarray(getattr(M, "entries", M))
    out = {"correction_rank": int(np.linalg.matrix_rank(m, tol=tol)), "c": m.shape[0]}
    if q_star is not None:
        out["q_star_rank"] = int(np.linalg.matrix_rank(q_star, tol=tol))
    return out


@dataclass
class LadderSettings:
    sizes: tuple = (1000, 4000, 16000)
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 40
    separation: float = 4.0
    d: int = 16
    n_test: int = 2000
    widths: tuple = (32, 32)
    d_embed: int = 16
    batch_size: int = 64


def _train_lambda_zero(ds, M, settings: LadderSettings, seed: int):
    cfg = trainer.TrainConfig(widths=settings.widths, d_embed=settings.d_embed, lam=0.0,
                              epochs=settings.epochs, warmup_epochs=settings.epochs,
                              batch_size=settings.batch_size, qbar_init="candidate", seed=seed)
    state, _ = trainer.fit(ds, M, cfg)
    return state.net


def consistency_point(c, rival, profile, n, seed, settings: LadderSettings, M=None):
    """Train with the corrected loss only; score against the known mixture.

    Returns ``(bayes_match, mean_tv)`` on a held-out sample.
    """
    spec = data.default_mixture(c, settings.d, settings.separation, 1.0, seed)
    clean, posterior = data.sample_mixture(spec, n)
    test, _ = data.sample_mixture(spec, settings.n_test, offset=10**7)
    if rival is None:
        ds = labelgen.generate_standard(clean, profile, seed)
        M = transition.identity_correction(c) if M is None else M
    else:
        ds = labelgen.generate_adversary_aware(clean, rival, profile, seed)
        M = transition.adversary_aware_matrix(rival) if M is None else M
    net = _train_lambda_zero(ds, M, settings, seed)
    f = nn.forward(net, test.features).probs
    match = float(np.mean(np.argmax(f, axis=1) == spec.bayes_label(test.features)))
    tv = float(0.5 * np.abs(f - posterior(test.features)).sum(axis=1).mean())
    return match, tv


def classifier_consistency_check(c: int = 3, rival: RivalMatrix | None = None, profile: FlipProfile | None = None,
                                 settings: LadderSettings | None = None, M=None,
                                 tol: float = 0.01) -> ConsistencyReport:
    """Bayes-match and TV of the trained classifier across growing sample sizes.

    Passes iff the seed-median Bayes-match never drops by more than ``tol``
    as ``n`` grows. A rank-deficient correction matrix fails before any
    training takes place.
    """
    settings = settings or LadderSettings()
    profile = profile or FlipProfile(0.3)
    if rival is None:
        rival = transition.build_rival_matrix(c, c - 1, 1.0 / (c - 1))
    M = transition.adversary_aware_matrix(rival) if M is None else M
    rep = ConsistencyReport("classifier_consistency")
    rep.rank = rank_diagnostics(M)
    if rep.rank["correction_rank"] < c:
        rep.add("correction matrix rank", rep.rank["correction_rank"], c, False,
                "rank-deficient; full rank is required, training skipped")
        return rep.finalize()
    medians = []
    for n in settings.sizes:
        try:
            pts = [consistency_point(c, rival, profile, n, s, settings, M) for s in settings.seeds]
        except trainer.TrainingDiverged as exc:
            rep.add(f"training at n={n}", float("nan"), 0.0, False, str(exc))
            return rep.finalize()
        match = float(np.median([p[0] for p in pts]))
        tv = float(np.median([p[1] for p in pts]))
        medians.append((match, tv))
        rep.table.append({"n": n, "bayes_match_median": match, "tv_median": tv})
    drops = [medians[i][0] - medians[i + 1][0] for i in range(len(medians) - 1)]
    worst = max(drops) if drops else 0.0
    rep.add("largest Bayes-match drop as n grows", worst, tol, worst <= tol)
    tv_rise = max([medians[i + 1][1] - medians[i][1] for i in range(len(medians) - 1)], default=0.0)
    rep.add("largest TV rise as n grows (measured)", tv_rise, float("inf"), True, "reported, not asserted")
    rep.tv_error = medians[-1][1]
    return rep.finalize()


def clean_regime_check(c: int = 3, n: int = 4000, seed: int = 0, settings: LadderSettings | None = None,
                       threshold: float = 0.99) -> ConsistencyReport:
    """No flips, no rival, identity correction: Bayes-match must reach ``threshold``."""
    settings = settings or LadderSettings()
    match, tv = consistency_point(c, None, FlipProfile(0.0), n, seed, settings)
    rep = ConsistencyReport("clean_regime")
    rep.tv_error = tv
    rep.add("Bayes-match", match, threshold, match >= threshold)
    return rep.finalize()


def default_presets(c: int) -> list:
    """Cyclic presets with ``k`` in {1, 2, c-1} and equal weights."""
    ks = sorted({1, min(2, c - 1), c - 1})
    return [(k, transition.build_rival_matrix(c, k, 1.0 / k)) for k in ks]


def recovery_residual_sweep(cs=(3, 4, 5), qs=(0.1, 0.3, 0.5), presets=None, seed: int = 0,
                            tol: float = 1e-8) -> ConsistencyReport:
    """Forward-synthesize candidate-set distributions and invert them.

    ``presets`` maps each ``c`` to a list of ``(label, RivalMatrix)``;
    configurations whose Q* lacks full column rank are flagged and left out
    of the error statistics.
    """
    rep = ConsistencyReport("recovery_sweep")
    rng = np.random.default_rng(seed)
    worst_tv = 0.0
    for c in cs:
        for label, rival in (presets or {}).get(c, default_presets(c)):
            for q in qs:
                q_star = transition.enumerate_q_star(rival, FlipProfile(q))
                p = rng.dirichlet(np.ones(c))
                row = {"c": c, "preset": str(label), "q": q, "rank": int(np.linalg.matrix_rank(q_star, tol=1e-9))}
                try:
                    est, residual = transition.recover_posterior(q_star, q_star @ p)
                except RankDeficientError:
                    row.update(excluded=True, residual=float("nan"), tv=float("nan"))
                else:
                    tv = float(0.5 * np.abs(est - p).sum())
                    worst_tv = max(worst_tv, tv)
                    row.update(excluded=False, residual=residual, tv=tv)
                rep.table.append(row)
    rep.tv_error = worst_tv
    included = sum(not r["excluded"] for r in rep.table)
    rep.add("max TV over full-rank configurations", worst_tv, tol, worst_tv < tol and included > 0,
            f"{included} included, {len(rep.table) - included} rank-deficient excluded")
    return rep.finalize()


# --- gradient checks -------------------------------------------------------

@dataclass
class GradientCase:
    net: nn.Network
    x: np.ndarray
    qbar: np.ndarray
    M: np.ndarray
    keys: np.ndarray
    queue: np.ndarray
    labels: np.ndarray
    queue_labels: np.ndarray
    tau: float
    lam: float


def gradient_case(seed: int, c: int = 3, d: int = 5, widths=(8, 8), d_embed: int = 4, batch: int = 8,
                  queue: int = 6, tau: float = 0.07, lam: float = 0.5) -> GradientCase:
    rng = np.random.default_rng(seed)
    arch = nn.Architecture(d, c, widths, d_embed)
    net = nn.Network.init(arch, seed)
    x = rng.standard_normal((batch, d))
    qbar = rng.dirichlet(np.ones(c), batch)
    k = rng.integers(1, c)
    M = transition.adversary_aware_matrix(transition.build_rival_matrix(c, int(k), 1.0 / int(k))).entries

    def unit(n):
        v = rng.standard_normal((n, d_embed))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    return GradientCase(net, x, qbar, M, unit(batch), unit(queue), rng.integers(0, c, batch),
                        rng.integers(0, c, queue), tau, lam)


def _case_loss(case: GradientCase, net: nn.Network, term: str):
    fwd = nn.forward(net, case.x)
    u = fwd.embedding
    pool = atm.ContrastivePool(np.concatenate([u, case.keys, case.queue]),
                               np.concatenate([case.labels, case.labels, case.queue_labels]), len(u))
    if term == "classification":
        bd, gl, _ = losses.combined_loss(fwd.probs, case.qbar, case.M, lam=0.0)
        return bd.classification, fwd, gl, None
    if term == "contrastive":
        res = losses.contrastive_loss(u, pool.embeddings, pool.positives, pool.denominators, case.tau)
        gu = res.grad_queries + res.grad_pool[:len(u)]
        return res.value, fwd, np.zeros_like(fwd.logits), gu
    bd, gl, gu = losses.combined_loss(fwd.probs, case.qbar, case.M, u, pool.embeddings, pool.positives,
                                      pool.denominators, case.lam, case.tau)
    return bd.combined, fwd, gl, gu


def gradient_errors(case: GradientCase, term: str = "combined", step: float = 1e-5) -> dict:
    """Relative error ``|a - n| / max(|a|, |n|)`` per parameter tensor, with
    ``a`` the analytic gradient and ``n`` a central difference."""
    _, fwd, gl, gu = _case_loss(case, case.net, term)
    analytic = nn.backward(case.net, fwd, gl, gu)
    out = {}
    for name, param in case.net.params.items():
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            param[idx] = orig + step
            hi = _case_loss(case, case.net, term)[0]
            param[idx] = orig - step
            lo = _case_loss(case, case.net, term)[0]
            param[idx] = orig
            numeric[idx] = (hi - lo) / (2 * step)
        a = analytic[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        out[name] = float(np.linalg.norm(a - numeric) / scale)
    return out


def gradient_check(n_cases: int = 20, seed: int = 0, tol: float = 1e-5) -> ConsistencyReport:
    rep = ConsistencyReport("gradient_check")
    for term in ("classification", "contrastive", "combined"):
        worst = 0.0
        for i in range(n_cases):
            errs = gradient_errors(gradient_case(seed * 1000 + i), term)
            worst = max(worst, max(errs.values()))
        rep.table.append({"term": term, "max_rel_error": worst})
        rep.add(f"{term} gradient", worst, tol, worst < tol)
    return rep.finalize()


def run_suite(level: str = "fast", seed: int = 0, settings: LadderSettings | None = None) -> list:
    """``fast``: oracle equality, gradients, recovery, risk probe.
    ``full`` adds the clean-regime run and the consistency ladder."""
    if level not in ("fast", "full"):
        raise ValueError("level must be 'fast' or 'full'")
    reports = [
        q_bar_equivalence(),
        gradient_check(n_cases=5 if level == "fast" else 20, seed=seed),
        recovery_residual_sweep(seed=seed),
        risk_probe(seed),
    ]
    if level == "full":
        reports.append(clean_regime_check(seed=seed, settings=settings))
        reports.append(classifier_consistency_check(settings=settings))
    return reports
