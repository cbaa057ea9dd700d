"""Coverage and set-size evaluation, repeated experiments and trade-off sweeps.

Probabilistic evaluation draws ``n_s`` perturbations per test example and
reports, per example, the fraction of perturbed copies whose prediction set
contains the label and the mean set size. Worst-case evaluation attacks each
example once and reports the indicator and the set size at the attacked input.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ._rng import derive_seed, rng_for
from .adversary import AttackConfig, worst_case_batch
from .calibrate import (
    Threshold,
    aprcp_calibrate,
    derive_aprcp_params,
    cross_domain_alpha,
    inflated_ar_threshold,
    iprcp_threshold,
    map_rows,
    prediction_set_mask,
    vanilla_cp_threshold,
)
from .classifier import SyntheticSoftmaxClassifier, SyntheticTaskSpec, generate_synthetic_dataset, inflation_bound
from .errors import ConfigError
from .noise import NOISE_KINDS, NoiseScheme, PerturbationBudget, gaussian_acceptance
from .scores import SCORE_KINDS, check_score_kind, label_scores

CLI_METHODS = {"vanilla": "vanilla", "rscp": "inflated-AR", "iprcp": "iPRCP", "aprcp": "aPRCP"}
MODES = ("prob", "worst")

_STREAM_EVAL_NOISE = 1
_STREAM_EVAL_APS = 2
_STREAM_ATTACK = 3


@dataclass
class EvalResult:
    coverage: np.ndarray
    set_size: np.ndarray
    inputs: np.ndarray | None = None
    u: np.ndarray | None = None

    @property
    def mean_coverage(self) -> float:
        return math.fsum(self.coverage.tolist()) / self.coverage.size

    @property
    def mean_set_size(self) -> float:
        return math.fsum(self.set_size.tolist()) / self.set_size.size


def _tau(threshold) -> float:
    return threshold.value if isinstance(threshold, Threshold) else float(threshold)


def perturbed_metrics(threshold, clf: SyntheticSoftmaxClassifier, x, y, eps, score_kind: str = "hps", u=None) -> EvalResult:
    """Coverage and mean set size over explicit perturbations ``eps`` of shape ``(n, n_s, d)``.

    ``u`` holds the APS randomizers, shape ``(n, n_s)``, shared across labels.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.intp)
    eps = np.asarray(eps, dtype=float)
    n, n_s = eps.shape[:2]
    probs = clf.predict_proba((x[:, None, :] + eps).reshape(-1, x.shape[1]))
    uu = None if u is None else np.asarray(u, dtype=float).ravel()
    mask = prediction_set_mask(probs, _tau(threshold), score_kind, uu).reshape(n, n_s, -1)
    covered = np.take_along_axis(mask, y[:, None, None], axis=2)[..., 0]
    return EvalResult(covered.sum(axis=1) / n_s, mask.sum(axis=2).sum(axis=1) / n_s)


def probabilistic_eval(
    threshold,
    clf: SyntheticSoftmaxClassifier,
    x,
    y,
    budget: PerturbationBudget,
    n_s: int = 128,
    scheme: NoiseScheme | None = None,
    score_kind: str = "hps",
    seed: int = 0,
    threads: int = 1,
    keep_draws: bool = False,
) -> EvalResult:
    """Per-example coverage and set size averaged over ``n_s`` random perturbations.

    Example ``i`` draws its perturbations (and APS randomizers) from its own
    sub-stream of ``seed``; the result does not depend on ``threads``. With
    ``keep_draws`` the perturbed inputs ``(n, n_s, d)`` and randomizers are
    returned in ``EvalResult.inputs`` and ``EvalResult.u``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.intp)
    n = y.size
    if n == 0:
        raise ValueError("empty test set")
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    kind = check_score_kind(score_kind)
    scheme = scheme or NoiseScheme("shell")

    def draws(lo: int, hi: int):
        eps = np.stack([scheme.sample(budget, n_s, rng_for(seed, _STREAM_EVAL_NOISE, i)) for i in range(lo, hi)])
        u = None
        if kind == "aps":
            u = np.stack([rng_for(seed, _STREAM_EVAL_APS, i).random(n_s) for i in range(lo, hi)])
        return eps, u

    if keep_draws:
        eps, u = draws(0, n)
        res = perturbed_metrics(threshold, clf, x, y, eps, kind, u)
        res.inputs = x[:, None, :] + eps
        res.u = u
        return res

    def block(lo: int, hi: int) -> np.ndarray:
        eps, u = draws(lo, hi)
        res = perturbed_metrics(threshold, clf, x[lo:hi], y[lo:hi], eps, kind, u)
        return np.stack([res.coverage, res.set_size], axis=1)

    out = map_rows(block, n, threads, out_shape=(n, 2))
    return EvalResult(out[:, 0].copy(), out[:, 1].copy())


def worst_case_eval(
    threshold,
    clf: SyntheticSoftmaxClassifier,
    x,
    y,
    attack: AttackConfig,
    score_kind: str = "hps",
    seed: int = 0,
) -> EvalResult:
    """Coverage indicator and set size at one attacked input per example.

    The attacked inputs are returned in ``EvalResult.inputs``.
    """
    if not isinstance(clf, SyntheticSoftmaxClassifier):
        raise TypeError("worst-case evaluation needs a differentiable synthetic classifier")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.intp)
    if y.size == 0:
        raise ValueError("empty test set")
    kind = check_score_kind(score_kind)
    eps, _ = worst_case_batch(clf, x, y, attack, rng_for(seed, _STREAM_ATTACK), kind)
    x_adv = x + eps
    probs = clf.predict_proba(x_adv)
    u = rng_for(seed, _STREAM_EVAL_APS).random(y.size) if kind == "aps" else None
    mask = prediction_set_mask(probs, _tau(threshold), kind, u)
    covered = mask[np.arange(y.size), y].astype(float)
    return EvalResult(covered, mask.sum(axis=1).astype(float), inputs=x_adv, u=u)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a synthetic experiment."""

    method: str = "aprcp"
    alpha: float = 0.1
    s: float | None = None
    alpha_tilde: float | None = None
    eta: float = 0.0
    m_r: float | None = None
    d_gap: float = 0.0
    score: str = "hps"
    classes: int = 4
    dim: int = 8
    spacing: float = 2.5
    sigma_x: float = 1.0
    radius: float = 0.125
    noise: str = "uniform"
    shells: int | None = None
    sigma: float | None = None
    eval_noise: str = "shell"
    eval_shells: int | None = None
    eval_sigma: float | None = None
    match_noise: bool = False
    m: int = 128
    n_cal: int = 2000
    n_test: int = 500
    n_s: int = 128
    runs: int = 50
    seed: int = 0
    mode: str = "prob"
    attack_steps: int = 100
    attack_restarts: int = 5
    attack_step_size: float | None = None
    shared_draws: bool = False
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        clean = {k.replace("-", "_"): v for k, v in d.items()}
        unknown = sorted(set(clean) - names)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        return cls(**clean)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, check_task: bool = True) -> "ExperimentConfig":
        """Check parameter domains before any compute; raise :class:`ConfigError`.

        ``check_task=False`` skips the synthetic-task fields, for runs on a
        loaded model or table.
        """
        try:
            self._validate(check_task)
        except ConfigError:
            raise
        except (ValueError, NotImplementedError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def _validate(self, check_task: bool) -> None:
        if self.method not in CLI_METHODS:
            raise ConfigError(f"method must be one of {sorted(CLI_METHODS)}, got {self.method!r}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.score not in SCORE_KINDS:
            raise ConfigError(f"score must be one of {SCORE_KINDS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        for name in ("m", "n_cal", "n_test", "n_s", "runs", "classes", "dim", "threads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.noise not in NOISE_KINDS or self.eval_noise not in NOISE_KINDS:
            raise ConfigError(f"noise kinds must be among {NOISE_KINDS}")
        if self.m_r is not None and self.m_r < 0:
            raise ConfigError("m_r must be >= 0")
        if self.method == "aprcp":
            if self.s is None and self.alpha_tilde is None:
                raise ConfigError("aprcp needs s or alpha_tilde")
            p = derive_aprcp_params(self.alpha, self.s, self.alpha_tilde)
            if self.d_gap:
                cross_domain_alpha(self.alpha, p.s, self.d_gap)
        if self.method == "iprcp" and not 0 <= self.eta <= self.alpha:
            raise ConfigError("eta must lie in [0, alpha]")
        if self.method in ("rscp", "iprcp") and self.score == "aps" and self.m_r is None:
            raise ConfigError("no analytic inflation bound for APS; pass m_r")
        if check_task:
            SyntheticTaskSpec.axis_aligned(self.classes, self.dim, self.spacing, self.sigma_x)
        budget = self.budget()
        cal, ev = self.cal_scheme(), self.eval_scheme()
        for sch, count in ((cal, self.m), (ev, self.n_s)):
            if sch.kind == "shell":
                sch.shell_layout(count)
            if sch.kind == "gaussian" and budget.radius > 0 and gaussian_acceptance(budget, sch.sigma) <= 0:
                raise ConfigError(f"gaussian sigma={sch.sigma} leaves no representable mass inside radius {budget.radius}")
        AttackConfig(budget, self.attack_steps, self.attack_step_size, self.attack_restarts)

    def budget(self) -> PerturbationBudget:
        return PerturbationBudget(self.radius, self.dim)

    def task(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec.axis_aligned(self.classes, self.dim, self.spacing, self.sigma_x)

    def cal_scheme(self) -> NoiseScheme:
        return NoiseScheme(self.noise, shells=self.shells, sigma=self.sigma)

    def eval_scheme(self) -> NoiseScheme:
        if self.match_noise:
            return self.cal_scheme()
        return NoiseScheme(self.eval_noise, shells=self.eval_shells, sigma=self.eval_sigma)

    def attack(self) -> AttackConfig:
        return AttackConfig(self.budget(), self.attack_steps, self.attack_step_size, self.attack_restarts)


def calibrate_threshold(config: ExperimentConfig, clf: SyntheticSoftmaxClassifier, x, y, seed: int) -> Threshold:
    """Run the configured calibration method on one calibration split."""
    method = config.method
    kind = config.score
    if method == "aprcp":
        thr, _ = aprcp_calibrate(
            x,
            y,
            clf,
            config.budget(),
            config.alpha,
            config.s,
            alpha_tilde=config.alpha_tilde,
            m=config.m,
            noise=config.cal_scheme(),
            score_kind=kind,
            d_gap=config.d_gap,
            seed=seed,
            shared_draws=config.shared_draws,
            threads=config.threads,
        )
        return thr
    u = rng_for(seed, 2).random(len(y)) if kind == "aps" else None
    scores = label_scores(clf.predict_proba(x), y, kind, u)
    if method == "vanilla":
        thr = vanilla_cp_threshold(scores, config.alpha)
    else:
        m_r = config.m_r if config.m_r is not None else inflation_bound(clf, config.budget(), kind)
        if method == "rscp":
            thr = inflated_ar_threshold(scores, config.alpha, m_r)
        else:
            thr = iprcp_threshold(scores, config.alpha, config.eta, m_r)
    thr.seed = seed
    return thr


def evaluate_threshold(config: ExperimentConfig, threshold, clf, x, y, seed: int) -> EvalResult:
    if config.mode == "worst":
        return worst_case_eval(threshold, clf, x, y, config.attack(), config.score, seed)
    return probabilistic_eval(
        threshold, clf, x, y, config.budget(), config.n_s, config.eval_scheme(), config.score, seed, config.threads
    )


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def _std(values: list[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


def _json_float(v: float):
    if math.isinf(v):
        return "+inf" if v > 0 else "-inf"
    return v


@dataclass
class ExperimentReport:
    config: dict
    runs: list[dict] = field(default_factory=list)

    @property
    def aggregate(self) -> dict:
        cov = [r["coverage"] for r in self.runs]
        size = [r["set_size"] for r in self.runs]
        taus = [math.inf if r["threshold"] == "+inf" else r["threshold"] for r in self.runs]
        return {
            "runs": len(self.runs),
            "coverage_mean": _mean(cov),
            "coverage_std": _std(cov),
            "set_size_mean": _mean(size),
            "set_size_std": _std(size),
            "infinite_thresholds": sum(math.isinf(t) for t in taus),
        }

    def to_dict(self) -> dict:
        return {"config": self.config, "runs": self.runs, "aggregate": self.aggregate}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        c = self.config
        agg = self.aggregate
        lines = [
            f"method={c.get('method')} alpha={c.get('alpha')} s={c.get('s')} alpha_tilde={c.get('alpha_tilde')} "
            f"mode={c.get('mode')} r={c.get('radius')} m={c.get('m')} n_s={c.get('n_s')}",
            f"{'run':>4} {'threshold':>12} {'coverage':>10} {'set_size':>10}",
        ]
        for r in self.runs:
            tau = r["threshold"]
            tau_s = f"{tau:>12.6f}" if isinstance(tau, float) else f"{tau:>12}"
            lines.append(f"{r['run']:>4} {tau_s} {r['coverage']:>10.4f} {r['set_size']:>10.4f}")
        lines.append(
            f"mean coverage {agg['coverage_mean']:.4f} (std {agg['coverage_std']:.4f}), "
            f"mean set size {agg['set_size_mean']:.4f} (std {agg['set_size_std']:.4f}) over {agg['runs']} runs"
        )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "seed", "threshold", "coverage", "set_size"])
        for r in self.runs:
            w.writerow([r["run"], r["seed"], r["threshold"], repr(r["coverage"]), repr(r["set_size"])])
        return buf.getvalue()


def run_single(config: ExperimentConfig, run: int) -> dict:
    run_seed = derive_seed(config.seed, run)
    spec = config.task()
    clf = spec.bayes_classifier()
    cal = generate_synthetic_dataset(spec, config.n_cal, derive_seed(run_seed, 0))
    test = generate_synthetic_dataset(spec, config.n_test, derive_seed(run_seed, 1))
    thr = calibrate_threshold(config, clf, cal.x, cal.y, derive_seed(run_seed, 2))
    res = evaluate_threshold(config, thr, clf, test.x, test.y, derive_seed(run_seed, 3))
    return {
        "run": run,
        "seed": run_seed,
        "threshold": _json_float(thr.value),
        "coverage": res.mean_coverage,
        "set_size": res.mean_set_size,
    }


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Repeat generate/calibrate/evaluate ``config.runs`` times.

    Run ``k`` derives all of its randomness from ``(config.seed, k)``, so runs
    are independent of each other and of execution order.
    """
    config.validate()
    report = ExperimentReport(config=config.to_dict())
    for k in range(config.runs):
        try:
            report.runs.append(run_single(config, k))
        except Exception as exc:
            raise RuntimeError(f"run {k} failed: {exc}") from exc
    return report


def sweep_tradeoff(
    config: ExperimentConfig,
    s_grid: list[float] | None = None,
    alpha_tilde_grid: list[float] | None = None,
) -> list[ExperimentReport]:
    """One aPRCP report per grid point, all sharing the same run seeds."""
    if (s_grid is None) == (alpha_tilde_grid is None):
        raise ConfigError("give exactly one of s_grid or alpha_tilde_grid")
    grid = list(s_grid if s_grid is not None else alpha_tilde_grid)
    if not grid:
        raise ConfigError("empty sweep grid")
    out = []
    for v in grid:
        if s_grid is not None:
            cfg = replace(config, method="aprcp", s=float(v), alpha_tilde=None)
        else:
            cfg = replace(config, method="aprcp", s=None, alpha_tilde=float(v))
        out.append(run_experiment(cfg))
    return out
