"""Seeded Monte Carlo experiments, result emission and the command line.

Every task ``(N, sample)`` draws from its own seed stream and the collected
rows are sorted before emission, so output files do not depend on the
number of worker threads.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .characteristics import CharacteristicsAbort, ShootingError, flow_forward, shoot_backward
from .det_approx import ChainSpec, ObservableMatrix, leading_term, m_bound, m_det_avg
from .ensembles import (
    AtomicDistribution,
    EnsembleParams,
    derive_seed,
    gaussian_divisible_law,
    match_moments,
    ou_evolve,
    sample_wigner,
)
from .resolvent_lab import EigensolverError, chain_avg, eigendecompose, eth_statistic, ward_residual
from .semicircle import SpectralPoint, eta_of_E, quantile

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ResultRow",
    "make_observable",
    "run_experiment",
    "run_local_law",
    "run_eth_scaling",
    "run_flow_drift",
    "run_gft_compare",
    "run_global_law",
    "run_ward",
    "run_m_identity",
    "format_rows",
    "main",
]

EXPERIMENTS = ("local-law", "eth-scaling", "flow-drift", "gft-compare", "global-law", "ward", "m-identity")
RECIPES = ("random-traceless", "rank-r-projection-traceless", "diagonal-pattern", "random-general", "identity")
XI = 0.1
QUANTILE = 0.99

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class AcceptanceFailure(AssertionError):
    """A statistical assertion of an experiment failed."""


# ---------------------------------------------------------------------------
# configuration

_TOP_KEYS = {"experiment", "N_list", "samples", "seed", "ensemble", "chain", "output", "threads", "format", "params"}
_ENSEMBLE_KEYS = {"sigma", "diag_second_moment", "offdiag_law", "diag_law", "atomic"}
_CHAIN_KEYS = {
    "k", "energies", "eta_rule", "eta", "eta_power", "epsilon", "imag", "decorations",
    "observable", "rank", "z", "closing",
}


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    for n, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return f"line {n}: "
    return ""


def parse_complex(v) -> complex:
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, str):
        return complex(v.replace(" ", "").replace("i", "j"))
    raise ValueError(f"cannot read {v!r} as a complex number")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, complex):
        return f"{v.real:.17g}{v.imag:+.17g}j"
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment sweep."""

    experiment: str
    N_list: tuple[int, ...]
    samples: int
    seed: int = 0
    ensemble: dict = field(default_factory=dict)
    chain: dict = field(default_factory=dict)
    output: str | None = None
    threads: int | str = 1
    format: str = "csv"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "N_list", tuple(int(n) for n in self.N_list))
        self.validate()

    # validation messages quote the offending key; from_json adds line numbers
    def validate(self, text: str | None = None) -> None:
        def fail(key: str, msg: str):
            raise ConfigError(f"{_line_of(text, key)}{key}: {msg}")

        if self.experiment not in EXPERIMENTS:
            fail("experiment", f"unknown tag {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.N_list:
            fail("N_list", "must be nonempty")
        if any(n < 2 for n in self.N_list) or list(self.N_list) != sorted(set(self.N_list)):
            fail("N_list", "must be strictly ascending integers >= 2")
        if int(self.samples) < 1:
            fail("samples", "must be at least 1")
        if self.format not in ("csv", "jsonl"):
            fail("format", f"unknown format {self.format!r}")
        if not (self.threads == "auto" or (isinstance(self.threads, int) and self.threads >= 1)):
            fail("threads", "must be a positive integer or 'auto'")
        bad = set(self.ensemble) - _ENSEMBLE_KEYS
        if bad:
            fail(sorted(bad)[0], f"unknown ensemble key; allowed {sorted(_ENSEMBLE_KEYS)}")
        bad = set(self.chain) - _CHAIN_KEYS
        if bad:
            fail(sorted(bad)[0], f"unknown chain key; allowed {sorted(_CHAIN_KEYS)}")
        ch = self.chain_settings()
        k = ch["k"]
        if not 1 <= k <= 6:
            fail("k", "chain length must be in 1..6")
        rule = ch["eta_rule"]
        if rule == "explicit" and ch["z"] is None and ch["eta"] is None:
            fail("eta_rule", "explicit rule needs 'eta' or 'z'")
        if rule == "power" and ch["eta_power"] is None:
            fail("eta_rule", "power rule needs 'eta_power'")
        if rule == "eta_of_E" and not (ch["epsilon"] is not None and 0 < ch["epsilon"] < 1):
            fail("eta_rule", "eta_of_E rule needs 0 < epsilon < 1")
        if rule not in ("explicit", "power", "eta_of_E"):
            fail("eta_rule", f"unknown rule {rule!r}")
        if any(not 0 <= i < k for i in ch["imag"]):
            fail("imag", f"indices must lie in 0..{k - 1}")
        if ch["decorations"] is not None and len(ch["decorations"]) != k:
            fail("decorations", f"needs exactly k={k} entries")
        if ch["observable"] not in RECIPES:
            fail("observable", f"unknown recipe; expected one of {RECIPES}")
        if ch["z"] is not None:
            for z in ch["z"]:
                if parse_complex(z).imag == 0:
                    fail("z", "spectral parameters must be off the real axis")
        try:
            self.ensemble_params(self.N_list[0], 0)
        except (ValueError, TypeError) as exc:
            fail("ensemble", str(exc))

    @classmethod
    def from_dict(cls, d: dict, text: str | None = None) -> "ExperimentConfig":
        bad = set(d) - _TOP_KEYS
        if bad:
            key = sorted(bad)[0]
            raise ConfigError(f"{_line_of(text, key)}{key}: unknown key; allowed {sorted(_TOP_KEYS)}")
        for key in ("experiment", "N_list", "samples"):
            if key not in d:
                raise ConfigError(f"{key}: required key missing")
        try:
            cfg = cls(
                experiment=d["experiment"],
                N_list=tuple(d["N_list"]),
                samples=int(d["samples"]),
                seed=int(d.get("seed", 0)),
                ensemble=dict(d.get("ensemble", {})),
                chain=dict(d.get("chain", {})),
                output=d.get("output"),
                threads=d.get("threads", 1),
                format=d.get("format", "csv"),
                params=dict(d.get("params", {})),
            )
        except ConfigError as exc:
            # re-validate to attach line numbers
            if text is None:
                raise
            msg = str(exc)
            key = msg.split(":", 1)[0].split()[-1]
            raise ConfigError(f"{_line_of(text, key)}{msg}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError("line 1: top level must be an object")
        return cls.from_dict(d, text)

    def replace(self, **kw) -> "ExperimentConfig":
        d = asdict(self)
        d.update(kw)
        return ExperimentConfig(**d)

    def chain_settings(self) -> dict:
        c = self.chain
        k = int(c.get("k", 2))
        imag = c.get("imag", [])
        if imag == "all":
            imag = list(range(k))
        return {
            "k": k,
            "energies": [float(e) for e in c.get("energies", [0.0])],
            "eta_rule": c.get("eta_rule", "explicit" if ("eta" in c or "z" in c) else "power"),
            "eta": c.get("eta"),
            "eta_power": c.get("eta_power", 0.5 if "eta" not in c and "z" not in c else None),
            "epsilon": c.get("epsilon"),
            "imag": [int(i) for i in imag],
            "decorations": c.get("decorations"),
            "observable": c.get("observable", "random-traceless"),
            "rank": int(c.get("rank", 1)),
            "z": c.get("z"),
            "closing": c.get("closing", "same"),
        }

    def ensemble_params(self, N: int, seed: int, *, atoms: AtomicDistribution | None = None) -> EnsembleParams:
        e = self.ensemble
        law = e.get("offdiag_law", "gaussian")
        if law == "atomic" and atoms is None:
            spec = e.get("atomic", {})
            atoms = match_moments(
                parse_complex(spec.get("m02", e.get("sigma", 0))),
                parse_complex(spec.get("m03", 0)),
                parse_complex(spec.get("m12", 0)),
            )
        return EnsembleParams(
            N=N,
            sigma=parse_complex(e.get("sigma", 0)),
            diag_second_moment=float(e.get("diag_second_moment", 1.0)),
            offdiag_law=law,
            diag_law=e.get("diag_law", "gaussian"),
            seed=seed,
            offdiag_atoms=atoms,
        )

    def points(self, N: int) -> list[tuple[complex, ...]]:
        """Spectral points for each grid entry; all ``k`` indices share one ``z``."""
        ch = self.chain_settings()
        k = ch["k"]
        if ch["z"] is not None:
            return [tuple([parse_complex(z)] * k) for z in ch["z"]]
        out = []
        for E in ch["energies"]:
            if ch["eta_rule"] == "explicit":
                eta = float(ch["eta"])
            elif ch["eta_rule"] == "power":
                eta = N ** (-float(ch["eta_power"]))
            else:
                eta = eta_of_E(E, float(ch["epsilon"]), N)
            out.append(tuple([complex(E, eta)] * k))
        return out

    def metadata(self) -> dict:
        d = asdict(self)
        d["N_list"] = list(self.N_list)
        # run environment, kept out so output is identical across thread counts
        d.pop("threads")
        d.pop("output")
        d["chain_resolved"] = self.chain_settings()
        d["xi"] = self.params.get("xi", XI)
        d["quantile"] = self.params.get("quantile", QUANTILE)
        return d

    def n_threads(self) -> int:
        if self.threads == "auto":
            return os.cpu_count() or 1
        return int(self.threads)


# ---------------------------------------------------------------------------
# result rows

_BASE_COLUMNS = (
    "experiment", "N", "sample", "z", "ell", "ell_hat", "rho", "hs_prod",
    "raw", "normalized", "predicted", "wall_time_ms", "seed",
)

_EXTRA_COLUMNS = {
    "local-law": ("value_re", "value_im", "m_re", "m_im", "threshold", "passed"),
    "eth-scaling": ("eth_statistic", "slope", "ci_lo", "ci_hi", "passed"),
    "flow-drift": ("phi_0", "phi_T", "drift_ratio", "z_T", "conserved_re", "conserved_im", "passed"),
    "gft-compare": ("ensemble", "q_divisible", "q_direct", "ratio", "moments_matched", "passed"),
    "global-law": ("value_re", "value_im", "m_re", "m_im", "threshold", "passed"),
    "ward": ("threshold", "passed"),
    "m-identity": ("k", "imag", "threshold", "passed"),
}


@dataclass(frozen=True)
class ResultRow:
    """One record of a measured statistic; ``sample`` is an index or an aggregate label."""

    experiment: str
    N: int
    sample: int | str
    z: tuple[complex, ...] = ()
    ell: float = math.nan
    ell_hat: float = math.nan
    rho: tuple[float, ...] = ()
    hs_prod: float = math.nan
    raw: float = math.nan
    normalized: float = math.nan
    predicted: float = math.nan
    wall_time_ms: float | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def measured(cls, experiment: str, N: int, sample, raw: float, predicted: float, **kw) -> "ResultRow":
        normalized = raw / predicted if predicted > 0 else math.nan
        return cls(experiment, N, sample, raw=raw, predicted=predicted, normalized=normalized, **kw)

    def sort_key(self):
        agg = isinstance(self.sample, str)
        return (self.N, agg, self.sample if not agg else 0, str(self.sample), _fmt(self.z), _fmt(self.extra.get("ensemble")))

    def as_dict(self, columns: Sequence[str]) -> dict:
        base = {c: getattr(self, c) for c in _BASE_COLUMNS}
        base.update(self.extra)
        return {c: base.get(c) for c in columns}


def columns_for(experiment: str) -> tuple[str, ...]:
    return _BASE_COLUMNS + _EXTRA_COLUMNS[experiment]


def format_rows(rows: Sequence[ResultRow], cfg: ExperimentConfig, fmt: str | None = None) -> str:
    """Serialize rows with a metadata header; deterministic for fixed rows."""
    fmt = fmt or cfg.format
    cols = columns_for(cfg.experiment)
    meta = json.dumps(cfg.metadata(), sort_keys=True, default=str)
    buf = io.StringIO()
    if fmt == "csv":
        buf.write(f"# {meta}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            d = r.as_dict(cols)
            w.writerow([_fmt(d[c]) for c in cols])
    else:
        buf.write(json.dumps({"metadata": json.loads(meta)}, sort_keys=True) + "\n")
        for r in rows:
            d = r.as_dict(cols)
            buf.write(json.dumps({c: _fmt(d[c]) for c in cols}, sort_keys=True) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# observables


def make_observable(recipe: str, N: int, rng: np.random.Generator, rank: int = 1) -> ObservableMatrix:
    """Deterministic observable drawn from ``rng``; normalized to ``<|A|^2> = 1`` where meaningful."""
    if recipe == "identity":
        return ObservableMatrix.identity(N)
    if recipe == "random-traceless":
        X = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
        H = (X + X.conj().T) / 2
        H -= np.trace(H) / N * np.eye(N)
    elif recipe == "rank-r-projection-traceless":
        if not 1 <= rank < N:
            raise ConfigError(f"rank: must be in 1..{N - 1}")
        X = rng.standard_normal((N, rank)) + 1j * rng.standard_normal((N, rank))
        Q, _ = np.linalg.qr(X)
        H = Q @ Q.conj().T - (rank / N) * np.eye(N)
        return ObservableMatrix(H)
    elif recipe == "diagonal-pattern":
        d = np.where(np.arange(N) % 2 == 0, 1.0, -1.0)
        d -= d.mean()
        H = np.diag(d).astype(complex)
    elif recipe == "random-general":
        X = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
        H = X / math.sqrt(2 * N) + 0.5 * np.eye(N)
        return ObservableMatrix(H)
    else:
        raise ConfigError(f"observable: unknown recipe {recipe!r}")
    hs = math.sqrt(float(np.vdot(H, H).real) / N)
    return ObservableMatrix(H / hs)


def _chain_for(cfg: ExperimentConfig, zs: Sequence[complex], A: ObservableMatrix) -> ChainSpec:
    ch = cfg.chain_settings()
    k = ch["k"]
    obs = [A] * k
    if ch["closing"] == "adjoint":
        obs[-1] = A.adjoint()
    return ChainSpec.averaged(list(zs), obs, imag=ch["imag"], decorations=ch["decorations"])


def _task_rng(cfg: ExperimentConfig, N: int, sample: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(cfg.seed, N, sample, stream))


def _task_seed(cfg: ExperimentConfig, N: int, sample: int, stream: int = 0) -> int:
    return int(derive_seed(cfg.seed, N, sample, stream).generate_state(1, np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# parallel map


def _parallel(cfg: ExperimentConfig, fn: Callable[[int, int], list[ResultRow]]) -> list[ResultRow]:
    tasks = [(N, s) for N in cfg.N_list for s in range(cfg.samples)]
    with threadpool_limits(limits=1):
        if cfg.n_threads() == 1:
            chunks = [fn(N, s) for N, s in tasks]
        else:
            with ThreadPoolExecutor(max_workers=cfg.n_threads()) as pool:
                chunks = list(pool.map(lambda t: fn(*t), tasks))
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=ResultRow.sort_key)
    return rows


def _timed(fn):
    def wrapper(*args):
        t0 = time.perf_counter()
        rows = fn(*args)
        ms = (time.perf_counter() - t0) * 1e3
        _TIMINGS.append((args, ms))
        return rows
    return wrapper


_TIMINGS: list = []


def _point_stats(points: Sequence[SpectralPoint]) -> tuple[complex, ...]:
    return tuple(p.z for p in points)


def _chain_row(cfg: ExperimentConfig, N: int, sample, chain: ChainSpec, value, seed: int, **extra) -> ResultRow:
    rep = m_bound(chain)
    return ResultRow.measured(
        cfg.experiment, N, sample, abs(value.fluctuation), rep.error_scale,
        z=_point_stats(chain.points), ell=rep.ell, ell_hat=rep.ell_hat,
        rho=tuple(p.rho for p in chain.points),
        hs_prod=math.prod(a.hs_norm for a in chain.all_observables),
        seed=seed, extra=extra,
    )


def _quantile_rows(cfg: ExperimentConfig, rows: list[ResultRow], assert_key="normalized") -> list[ResultRow]:
    q = float(cfg.params.get("quantile", QUANTILE))
    xi = float(cfg.params.get("xi", XI))
    out = []
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.N, r.z), []).append(r)
    for (N, z), grp in sorted(groups.items(), key=lambda kv: (kv[0][0], _fmt(kv[0][1]))):
        vals = np.array([getattr(r, assert_key) for r in grp])
        qv = float(np.quantile(vals, q))
        thr = N ** xi
        ref = grp[0]
        out.append(ResultRow(
            cfg.experiment, N, f"q{q:g}", z=z, ell=ref.ell, ell_hat=ref.ell_hat, rho=ref.rho,
            hs_prod=math.nan, raw=float(np.quantile([r.raw for r in grp], q)), normalized=qv,
            predicted=ref.predicted, seed=cfg.seed,
            extra={"threshold": thr, "passed": bool(qv <= thr)},
        ))
    return out


# ---------------------------------------------------------------------------
# experiments


def run_local_law(cfg: ExperimentConfig) -> list[ResultRow]:
    """Normalized fluctuation of the configured chain over the z-grid."""

    def task(N: int, s: int) -> list[ResultRow]:
        seed = _task_seed(cfg, N, s)
        W = sample_wigner(cfg.ensemble_params(N, seed))
        D = eigendecompose(W)
        ch = cfg.chain_settings()
        A = make_observable(ch["observable"], N, _task_rng(cfg, N, s, 1), ch["rank"])
        rows = []
        for zs in cfg.points(N):
            chain = _chain_for(cfg, zs, A)
            v = chain_avg(D, chain)
            rows.append(_chain_row(cfg, N, s, chain, v, seed,
                                   value_re=v.value.real, value_im=v.value.imag,
                                   m_re=v.m_value.real, m_im=v.m_value.imag))
        return rows

    rows = _parallel(cfg, _timed(task))
    return rows + _quantile_rows(cfg, rows)


def fit_slope(Ns: Sequence[int], values: Sequence[Sequence[float]]) -> float:
    """Least-squares slope of log(mean value) against log N."""
    x = np.log(np.asarray(Ns, dtype=float))
    y = np.log([float(np.mean(v)) for v in values])
    return float(np.polyfit(x, y, 1)[0])


def run_eth_scaling(cfg: ExperimentConfig) -> list[ResultRow]:
    """Max overlap deviation per sample and a log-log slope with a bootstrap interval."""
    Ns = cfg.N_list
    if len(Ns) < 3 or Ns[-1] < 8 * Ns[0]:
        raise ConfigError("N_list: the slope fit needs at least 3 sizes spanning a factor of 8")
    ch = cfg.chain_settings()

    def task(N: int, s: int) -> list[ResultRow]:
        seed = _task_seed(cfg, N, s)
        D = eigendecompose(sample_wigner(cfg.ensemble_params(N, seed)), check=False)
        A = make_observable(ch["observable"], N, _task_rng(cfg, N, s, 1), ch["rank"])
        stat = eth_statistic(D, A)
        raw = stat / math.sqrt(N)
        return [ResultRow.measured(cfg.experiment, N, s, raw, N ** -0.5, hs_prod=A.traceless_part().hs_norm,
                                   seed=seed, extra={"eth_statistic": stat})]

    rows = _parallel(cfg, _timed(task))
    by_N = [[r.raw for r in rows if r.N == N] for N in Ns]
    slope = fit_slope(Ns, by_N)
    rng = np.random.default_rng(derive_seed(cfg.seed, 0xB007))
    n_boot = int(cfg.params.get("bootstrap", 1000))
    boots = []
    for _ in range(n_boot):
        boots.append(fit_slope(Ns, [rng.choice(v, size=len(v), replace=True) for v in by_N]))
    lo, hi = (float(x) for x in np.quantile(boots, [0.025, 0.975]))
    smin, smax = cfg.params.get("slope_range", [-0.65, -0.35])
    agg = ResultRow(cfg.experiment, Ns[-1], "fit", raw=slope, normalized=slope, predicted=-0.5, seed=cfg.seed,
                    extra={"slope": slope, "ci_lo": lo, "ci_hi": hi, "passed": bool(smin <= slope <= smax)})
    return rows + [agg]


def run_flow_drift(cfg: ExperimentConfig) -> list[ResultRow]:
    """Fluctuation at ``(W_0, z_0)`` against ``(W_T, z_T)`` along the coupled flows."""
    T = float(cfg.params.get("T", 0.3))
    if not 0 <= T <= 0.5:
        raise ConfigError("T: must lie in [0, 0.5]")
    ch = cfg.chain_settings()
    if set(ch["imag"]) != set(range(ch["k"])):
        raise ConfigError("imag: flow-drift needs an all-Im chain")

    def phi(D, zs, A):
        chain = _chain_for(cfg, zs, A)
        return chain_avg(D, chain)

    tol = float(cfg.params.get("tol", 1e-10))

    def task(N: int, s: int) -> list[ResultRow]:
        seed = _task_seed(cfg, N, s)
        W0 = sample_wigner(cfg.ensemble_params(N, seed))
        A = make_observable(ch["observable"], N, _task_rng(cfg, N, s, 1), ch["rank"])
        WT = ou_evolve(W0, T, seed=_task_seed(cfg, N, s, 2)) if T > 0 else W0
        D0, DT = eigendecompose(W0), eigendecompose(WT)
        rows = []
        # configured points are the targets at time T; their starts come from shooting back
        for zT in cfg.points(N):
            if T > 0:
                z0 = tuple(shoot_backward(z, T, tol) for z in zT)
                traj = flow_forward(list(z0), T, tol)
                cons = traj.conserved[-1][0]
            else:
                z0 = zT
                cons = complex(SpectralPoint(zT[0]).m)
            v0, vT = phi(D0, z0, A), phi(DT, zT, A)
            ratio = 1.0 if T == 0 else (vT.normalized / v0.normalized if v0.normalized > 0 else math.nan)
            chain0 = _chain_for(cfg, z0, A)
            rows.append(_chain_row(cfg, N, s, chain0, v0, seed, phi_0=v0.normalized, phi_T=vT.normalized,
                                   drift_ratio=ratio, z_T=tuple(zT), conserved_re=cons.real, conserved_im=cons.imag))
        return rows

    rows = _parallel(cfg, _timed(task))
    out = list(rows)
    for N in cfg.N_list:
        grp = [r for r in rows if r.N == N]
        for z in sorted({r.z for r in grp}, key=_fmt):
            sub = [r for r in grp if r.z == z]
            m0 = float(np.median([r.extra["phi_0"] for r in sub]))
            mT = float(np.median([r.extra["phi_T"] for r in sub]))
            out.append(ResultRow(cfg.experiment, N, "median", z=z, raw=mT, normalized=m0, seed=cfg.seed,
                                 extra={"phi_0": m0, "phi_T": mT, "drift_ratio": mT / m0 if m0 > 0 else math.nan,
                                        "passed": bool(mT <= 10 * m0 + 1)}))
    return out


def _composite_moments(law: AtomicDistribution, gamma: float, m02: complex) -> dict:
    # moments of sqrt(1-gamma) Z' + sqrt(gamma) xi_G up to order three
    a = math.sqrt(1 - gamma)
    return {
        (1, 1): a * a * law.moment(1, 1) + gamma,
        (0, 2): a * a * law.moment(0, 2) + gamma * m02,
        (0, 3): a ** 3 * law.moment(0, 3),
        (1, 2): a ** 3 * law.moment(1, 2),
    }


def run_gft_compare(cfg: ExperimentConfig) -> list[ResultRow]:
    """Same chain statistic on a Gaussian-divisible and a directly matched atomic ensemble."""
    T = float(cfg.params.get("T", 0.5))
    target = cfg.ensemble.get("atomic", {})
    m02 = parse_complex(target.get("m02", cfg.ensemble.get("sigma", 0)))
    m03 = parse_complex(target.get("m03", 0))
    m12 = parse_complex(target.get("m12", 0))
    if m02.imag != 0:
        raise ConfigError("atomic: the Gaussian-divisible route needs a real m02 (OU noise is GUE otherwise)")
    mismatch = cfg.params.get("direct_mismatch")
    d03 = m03 + (parse_complex(mismatch.get("m03", 0)) if mismatch else 0)
    d12 = m12 + (parse_complex(mismatch.get("m12", 0)) if mismatch else 0)
    gamma = -math.expm1(-T)
    divisible = gaussian_divisible_law(m02, m03, m12, T)
    direct = match_moments(m02, d03, d12)
    comp = _composite_moments(divisible, gamma, m02)
    want = {(1, 1): 1, (0, 2): m02, (0, 3): m03, (1, 2): m12}
    resid = max(abs(comp[key] - want[key]) for key in want)
    if resid > 1e-8:
        raise ArithmeticError(f"Gaussian-divisible moments off by {resid:.3g}")
    matched = max(abs(direct.moment(*key) - want[key]) for key in want) <= 1e-8
    ch = cfg.chain_settings()

    def task(N: int, s: int) -> list[ResultRow]:
        rows = []
        A = make_observable(ch["observable"], N, _task_rng(cfg, N, s, 1), ch["rank"])
        for name, law in (("divisible", divisible), ("direct", direct)):
            seed = _task_seed(cfg, N, s, 3 if name == "direct" else 0)
            params = EnsembleParams(
                N=N, sigma=m02, offdiag_law="atomic", offdiag_atoms=law, seed=seed,
                diag_second_moment=float(cfg.ensemble.get("diag_second_moment", 1.0)),
            )
            W = sample_wigner(params)
            if name == "divisible":
                W = ou_evolve(W, T, seed=_task_seed(cfg, N, s, 2))
            D = eigendecompose(W)
            for zs in cfg.points(N):
                chain = _chain_for(cfg, zs, A)
                rows.append(_chain_row(cfg, N, s, chain, chain_avg(D, chain), seed, ensemble=name,
                                       moments_matched=matched))
        return rows

    rows = _parallel(cfg, _timed(task))
    out = list(rows)
    q = float(cfg.params.get("compare_quantile", 0.9))
    for N in cfg.N_list:
        for z in sorted({r.z for r in rows if r.N == N}, key=_fmt):
            a = [r.normalized for r in rows if r.N == N and r.z == z and r.extra["ensemble"] == "divisible"]
            b = [r.normalized for r in rows if r.N == N and r.z == z and r.extra["ensemble"] == "direct"]
            qa, qb = float(np.quantile(a, q)), float(np.quantile(b, q))
            ratio = qa / qb if qb > 0 else math.nan
            out.append(ResultRow(cfg.experiment, N, f"q{q:g}", z=z, raw=ratio, normalized=ratio, seed=cfg.seed,
                                 extra={"ensemble": "compare", "q_divisible": qa, "q_direct": qb, "ratio": ratio,
                                        "moments_matched": matched, "passed": bool(1 / 3 <= ratio <= 3)}))
    return out


def run_global_law(cfg: ExperimentConfig) -> list[ResultRow]:
    """Local-law statistic restricted to spectral parameters far from ``[-2, 2]``."""
    delta = float(cfg.params.get("delta", 0.5))
    for N in cfg.N_list:
        for zs in cfg.points(N):
            for z in zs:
                x = min(max(z.real, -2.0), 2.0)
                if z.imag == 0 or abs(z - x) < delta:
                    raise ConfigError(f"z: {z} lies closer than delta={delta} to [-2, 2]")
    return run_local_law(cfg)


def run_ward(cfg: ExperimentConfig) -> list[ResultRow]:
    """Relative Ward-identity residual on every sample and grid point."""
    tol = float(cfg.params.get("tol", 1e-10))

    def task(N: int, s: int) -> list[ResultRow]:
        seed = _task_seed(cfg, N, s)
        D = eigendecompose(sample_wigner(cfg.ensemble_params(N, seed)))
        rows = []
        for zs in cfg.points(N):
            z = zs[0]
            ref = abs(float(np.mean((1.0 / (D.lambdas - z)).imag)))
            res = ward_residual(D, z) / ref
            rows.append(ResultRow.measured(cfg.experiment, N, s, res, tol, z=(z,), seed=seed,
                                           extra={"threshold": tol, "passed": bool(res <= tol)}))
        return rows

    return _parallel(cfg, _timed(task))


def run_m_identity(cfg: ExperimentConfig) -> list[ResultRow]:
    """Finite-difference residuals of the flow identities for ``<M A>`` (no sampling)."""
    from .characteristics import m_flow_derivative_check

    dt = float(cfg.params.get("dt", 1e-4))
    ch = cfg.chain_settings()

    def task(N: int, s: int) -> list[ResultRow]:
        rng = _task_rng(cfg, N, s, 1)
        k = ch["k"]
        obs = [make_observable(ch["observable"], N, rng, ch["rank"]) for _ in range(k)]
        rows = []
        for zs in cfg.points(N):
            # spread the points so divided differences are well separated
            pts = [z + 0.3 * n + 0.1j * n for n, z in enumerate(zs)]
            for imag in ((), tuple(range(k))):
                chain = ChainSpec.averaged(pts, obs, imag=imag)
                res = m_flow_derivative_check(chain, dt)
                rows.append(ResultRow.measured(cfg.experiment, N, s, res, 100 * dt * dt, z=tuple(pts), seed=cfg.seed,
                                               extra={"k": k, "imag": "all" if imag else "none",
                                                      "threshold": 100 * dt * dt, "passed": bool(res <= 100 * dt * dt)}))
        return rows

    return _parallel(cfg, task)


_RUNNERS = {
    "local-law": run_local_law,
    "eth-scaling": run_eth_scaling,
    "flow-drift": run_flow_drift,
    "gft-compare": run_gft_compare,
    "global-law": run_global_law,
    "ward": run_ward,
    "m-identity": run_m_identity,
}


def run_experiment(cfg: ExperimentConfig) -> list[ResultRow]:
    return _RUNNERS[cfg.experiment](cfg)


def all_passed(rows: Iterable[ResultRow]) -> bool:
    flags = [r.extra["passed"] for r in rows if "passed" in r.extra and isinstance(r.sample, str)]
    flags += [r.extra["passed"] for r in rows if r.experiment in ("ward", "m-identity")]
    return all(flags)


# ---------------------------------------------------------------------------
# command line

_SUBCOMMAND_TAG = {
    "local-law": "local-law",
    "eth": "eth-scaling",
    "flow": "flow-drift",
    "gft": "gft-compare",
    "global": "global-law",
    "ward": "ward",
    "m-identity": "m-identity",
}

DEFAULT_CONFIGS = {
    "local-law": {"N_list": [256], "samples": 50, "chain": {"k": 1, "energies": [0.0], "eta_rule": "power", "eta_power": 0.6}},
    "eth-scaling": {"N_list": [128, 256, 512, 1024], "samples": 20, "chain": {"observable": "random-traceless"}},
    "flow-drift": {"N_list": [256], "samples": 50, "chain": {"k": 2, "imag": "all", "energies": [0.0], "eta": 0.05},
                   "params": {"T": 0.3}},
    "gft-compare": {"N_list": [256], "samples": 50, "ensemble": {"atomic": {"m02": 0.3, "m03": 0.4, "m12": 0.2}},
                    "chain": {"k": 2, "imag": "all", "energies": [0.0], "eta": 0.05}},
    "global-law": {"N_list": [256], "samples": 100, "chain": {"k": 1, "z": ["3j"], "observable": "random-general"}},
    "ward": {"N_list": [64], "samples": 20, "chain": {"k": 1, "energies": [0.0, 1.5], "eta": 0.01}},
    "m-identity": {"N_list": [8], "samples": 1, "chain": {"k": 3, "z": ["0.2+0.5j"]}},
}


def _load_config(args, tag: str) -> ExperimentConfig:
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = ExperimentConfig.from_json(text)
        if cfg.experiment != tag:
            raise ConfigError(f"experiment: config is for {cfg.experiment!r}, subcommand expects {tag!r}")
    else:
        d = dict(DEFAULT_CONFIGS[tag])
        d["experiment"] = tag
        cfg = ExperimentConfig.from_dict(d)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["output"] = args.out
    if args.threads is not None:
        over["threads"] = "auto" if args.threads == "auto" else int(args.threads)
    if args.format is not None:
        over["format"] = args.format
    return cfg.replace(**over) if over else cfg


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_experiment(args) -> int:
    tag = _SUBCOMMAND_TAG[args.command]
    cfg = _load_config(args, tag)
    _TIMINGS.clear()
    rows = run_experiment(cfg)
    _emit(format_rows(rows, cfg), cfg.output)
    if cfg.output and args.timing:
        with open(cfg.output + ".timing.csv", "w", encoding="utf-8") as fh:
            fh.write("N,sample,wall_time_ms\n")
            for (N, s), ms in sorted(_TIMINGS):
                fh.write(f"{N},{s},{ms:.3f}\n")
    if args.acceptance and not all_passed(rows):
        print("acceptance assertion failed", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def _parse_list(text: str, conv) -> list:
    return [conv(t) for t in text.split(",") if t.strip()]


def _cmd_mcalc(args) -> int:
    zs = _parse_list(args.z, parse_complex)
    if any(z.imag == 0 for z in zs):
        raise ConfigError("z: spectral parameters must be off the real axis")
    imag = _parse_list(args.imag, int) if args.imag else []
    rng = np.random.default_rng(derive_seed(args.seed or 0, args.N, 0xCA1C))
    obs = [make_observable(args.observable, args.N, rng, args.rank) for _ in zs]
    try:
        chain = ChainSpec.averaged(zs, obs, imag=imag)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rep = m_bound(chain)
    out = {
        "z": [_fmt(z) for z in zs],
        "imag": imag,
        "m_det_avg": _fmt(m_det_avg(chain)),
        "leading_term": _fmt(leading_term(chain)),
        "ell": _fmt(rep.ell),
        "ell_hat": _fmt(rep.ell_hat),
        "m_bound": _fmt(rep.m_bound),
        "error_scale": _fmt(rep.error_scale),
    }
    _emit(json.dumps(out, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def _cmd_moments(args) -> int:
    try:
        m02, m03, m12 = (parse_complex(v) for v in (args.m02, args.m03, args.m12))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        if args.gamma is not None:
            from .ensembles import gaussian_division

            law = gaussian_division(m02, m03, m12, args.gamma)
        else:
            law = match_moments(m02, m03, m12)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _emit(law.to_text(), args.out)
    return EXIT_OK


def _cmd_quantiles(args) -> int:
    if args.N < 1:
        raise ConfigError("N: must be positive")
    lines = ["i,gamma\n"] + [f"{i},{quantile(i, args.N):.17g}\n" for i in range(1, args.N + 1)]
    _emit("".join(lines), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wignerlab", description="Multi-resolvent chains of Wigner matrices")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--threads", help="worker threads or 'auto'")
        sp.add_argument("--format", choices=("csv", "jsonl"))

    for name in _SUBCOMMAND_TAG:
        sp = sub.add_parser(name, help=f"run the {_SUBCOMMAND_TAG[name]} experiment")
        common(sp)
        sp.add_argument("--acceptance", action="store_true", help="exit with status 3 if an assertion fails")
        sp.add_argument("--timing", action="store_true", help="write per-task wall times next to --out")
        sp.set_defaults(func=_cmd_experiment)

    sp = sub.add_parser("mcalc", help="print M for a chain given on the command line")
    common(sp)
    sp.add_argument("--z", required=True, help="comma-separated spectral parameters, e.g. 0.1+0.2j,0.3+0.1j")
    sp.add_argument("--imag", default="", help="comma-separated Im-decorated indices (0-based)")
    sp.add_argument("--N", type=int, default=16)
    sp.add_argument("--observable", default="random-traceless", choices=RECIPES)
    sp.add_argument("--rank", type=int, default=1)
    sp.set_defaults(func=_cmd_mcalc)

    sp = sub.add_parser("moments", help="atomic law with prescribed moments up to order three")
    common(sp)
    sp.add_argument("--m02", required=True)
    sp.add_argument("--m03", required=True)
    sp.add_argument("--m12", required=True)
    sp.add_argument("--gamma", type=float, help="Gaussian-division weight in (0, 1)")
    sp.set_defaults(func=_cmd_moments)

    sp = sub.add_parser("quantiles", help="semicircle quantiles gamma_i, i = 1..N")
    common(sp)
    sp.add_argument("--N", type=int, required=True)
    sp.set_defaults(func=_cmd_quantiles)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AcceptanceFailure as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except (CharacteristicsAbort, ShootingError, EigensolverError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
