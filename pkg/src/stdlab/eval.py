"""Verification and experiment harnesses."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .distill import DistillConfig, DistillState, run, train_iteration, warmup
from .dynamics import c_coefficient, one_step_residual, perturb, rollout
from .models import GmmSpec, gmm_sample
from .nn import consistency_fn, finite_difference_check, to_tensor
from .schedule import NoiseSchedule, StepGrid, uniform_grid

log = logging.getLogger(__name__)


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# -- distribution distance -------------------------------------------------

def random_directions(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(a, b, projections=128, rng: np.random.Generator | None = None) -> float:
    """Mean over random unit directions of the 1-D W2 distance between projections.

    ``projections`` is either a count (directions drawn from ``rng``) or an
    explicit ``(L, d)`` array of unit directions.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"sample sets differ in shape: {a.shape} vs {b.shape}")
    if np.ndim(projections) == 0:
        if rng is None:
            raise ValueError("need an rng to draw projection directions")
        projections = random_directions(a.shape[1], int(projections), rng)
    dirs = np.asarray(projections, dtype=np.float64)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))


# -- theorem sweep ---------------------------------------------------------

THEOREM_HEADER = ("teacher", "delta", "t", "s", "alpha_bar_t", "alpha_bar_s", "c_ts",
                  "max_identity_error", "max_residual_norm", "min_residual_norm",
                  "max_doubling_error")


@dataclass
class TheoremReport:
    rows: list[tuple] = field(default_factory=list)
    tolerance: float = 1e-9

    @property
    def max_identity_error(self) -> float:
        return max(r[7] for r in self.rows)

    def failures(self) -> list[str]:
        out = []
        for r in self.rows:
            teacher, delta, t, s = r[:4]
            if r[7] > self.tolerance:
                out.append(f"identity error {r[7]:.3e} at {teacher} delta={delta} t={t} s={s}")
            if teacher == "informed":
                if delta == 0 and r[8] > 1e-12:
                    out.append(f"perfect teacher left residual {r[8]:.3e} at t={t} s={s}")
                if delta > 0 and s < t and r[9] <= 0:
                    out.append(f"zero residual with delta={delta} at t={t} s={s}")
                if r[10] > self.tolerance:
                    out.append(f"doubling error {r[10]:.3e} at delta={delta} t={t} s={s}")
        return out

    @property
    def passed(self) -> bool:
        return not self.failures()

    def to_csv(self, path):
        write_rows(path, THEOREM_HEADER, self.rows)


def verify_theorem(deltas, schedule: NoiseSchedule, spec: GmmSpec, trials: int = 100,
                   t_fractions=tuple(k / 10 for k in range(1, 10)), grid_steps: int = 50,
                   seed: int = 0, tolerance: float = 1e-9) -> TheoremReport:
    """Check the one-step residual identity over a sweep of (t, s, delta).

    Two teacher families are swept. ``informed`` knows the true noise and is
    off by ``delta`` along a constant unit field, so its residual must be
    exactly ``C(t, s) * delta`` and scale linearly. ``analytic`` is the mixture
    posterior plus a seeded sinusoidal error; only the identity is checked.
    """
    from .models import PerturbedTeacher, AnalyticTeacher

    rng = np.random.default_rng(seed)
    T = schedule.total_steps
    grid = uniform_grid(schedule, T, grid_steps)
    d = spec.dim
    unit = np.zeros(d)
    unit[0] = 1.0
    report = TheoremReport(tolerance=tolerance)
    base = AnalyticTeacher(spec, schedule)
    for frac in t_fractions:
        t = int(round(frac * T))
        for s in grid.below(t):
            x0, labels = gmm_sample(spec, trials, rng)
            eps = rng.standard_normal((trials, d))
            c = c_coefficient(t, s, schedule)
            for delta in deltas:
                def informed(x_t, tt, cond, delta=delta):
                    return eps - delta * unit

                def informed2(x_t, tt, cond, delta=delta):
                    return eps - 2 * delta * unit

                res, pred = one_step_residual(x0, eps, t, s, informed, schedule)
                res2, _ = one_step_residual(x0, eps, t, s, informed2, schedule)
                norms = np.linalg.norm(res, axis=1)
                doubling = np.abs(np.linalg.norm(res2, axis=1) - 2 * norms)
                report.rows.append(("informed", float(delta), t, s,
                                    float(schedule.alpha_bar[t]), float(schedule.alpha_bar[s]), c,
                                    float(np.max(np.abs(res - pred))), float(norms.max()),
                                    float(norms.min()), float(doubling.max())))

                noisy = PerturbedTeacher(base, delta, "seeded-sinusoidal", seed=seed)
                res, pred = one_step_residual(x0, eps, t, s, noisy, schedule, cond=labels)
                norms = np.linalg.norm(res, axis=1)
                report.rows.append(("analytic", float(delta), t, s,
                                    float(schedule.alpha_bar[t]), float(schedule.alpha_bar[s]), c,
                                    float(np.max(np.abs(res - pred))), float(norms.max()),
                                    float(norms.min()), 0.0))
    return report


# -- student evaluation ----------------------------------------------------

@dataclass
class EvalConfig:
    nfe: tuple[int, ...] = (1, 2, 4, 8)
    n_samples: int = 4096
    projections: int = 128
    gap_batch: int = 256
    omega: float | None = None  # defaults to the midpoint of the training range
    seed: int = 12345

    def __post_init__(self):
        self.nfe = tuple(int(k) for k in self.nfe)
        if not self.nfe or min(self.nfe) < 1:
            raise ValueError("nfe entries must be >= 1")
        if self.n_samples < 1 or self.projections < 1 or self.gap_batch < 1:
            raise ValueError("n_samples, projections and gap_batch must be >= 1")


def eval_omega(state: DistillState, ecfg: EvalConfig) -> float:
    return state.config.omega_mid if ecfg.omega is None else ecfg.omega


def noised_inputs(state: DistillState, n: int, rng: np.random.Generator):
    x0, cond = gmm_sample(state.spec, n, rng)
    x_tau = perturb(x0, state.tau, rng.standard_normal(x0.shape), state.schedule)
    return x_tau, cond


@torch.no_grad()
def student_sample(state: DistillState, x_tau, cond, nfe: int) -> np.ndarray:
    """Chained consistency jumps over ``nfe`` equal slices of the training grid."""
    sub = state.grid.subsample(nfe)
    x = to_tensor(x_tau)
    for t, s in zip(sub.timesteps[:-1], sub.timesteps[1:]):
        x = consistency_fn(state.student, x, t, s, cond, state.schedule)
    return x.numpy().astype(np.float64)


def teacher_sample(state: DistillState, x_tau, cond, omega: float) -> np.ndarray:
    return rollout(state.teacher, x_tau, state.grid, cond, omega, state.schedule).endpoint


@torch.no_grad()
def consistency_gap(state: DistillState, ecfg: EvalConfig | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Mean distance between the student's endpoint predictions along one teacher trajectory.

    Every pair of states on the trajectory is jumped to timestep 0 and
    compared; a perfectly self-consistent student scores 0.
    """
    ecfg = ecfg or EvalConfig()
    rng = rng or np.random.default_rng(ecfg.seed)
    x_tau, cond = noised_inputs(state, ecfg.gap_batch, rng)
    traj = rollout(state.teacher, x_tau, state.grid, cond, eval_omega(state, ecfg), state.schedule)
    ends = np.stack([
        consistency_fn(state.student, to_tensor(x), t, 0, cond, state.schedule).numpy()
        for t, x in zip(traj.timesteps, traj.states)
    ]).astype(np.float64)
    n = len(ends)
    iu, ju = np.triu_indices(n, k=1)
    dist = np.linalg.norm(ends[iu] - ends[ju], axis=-1)
    return float(dist.mean())


def endpoint_eval(state: DistillState, ecfg: EvalConfig | None = None,
                  rng: np.random.Generator | None = None) -> list[dict]:
    """Sliced-W2 from few-step student samples to the teacher's full rollouts.

    The reference batch and the batch the student sees come from independent
    inputs; ``floor`` is the distance between two independent teacher batches.
    """
    ecfg = ecfg or EvalConfig()
    rng = rng or np.random.default_rng(ecfg.seed)
    omega = eval_omega(state, ecfg)
    dirs = random_directions(state.spec.dim, ecfg.projections, rng)
    ref_in, ref_cond = noised_inputs(state, ecfg.n_samples, rng)
    ref = teacher_sample(state, ref_in, ref_cond, omega)
    x_tau, cond = noised_inputs(state, ecfg.n_samples, rng)
    other = teacher_sample(state, x_tau, cond, omega)
    floor = sliced_wasserstein(other, ref, dirs)
    rows = []
    for nfe in ecfg.nfe:
        if nfe > state.grid.count:
            continue
        ends = student_sample(state, x_tau, cond, nfe)
        rows.append({"nfe": nfe, "distance": sliced_wasserstein(ends, ref, dirs), "floor": floor})
    return rows


def snapshot_metrics(ecfg: EvalConfig | None = None):
    """Snapshot hook for :func:`stdlab.distill.run`."""
    ecfg = ecfg or EvalConfig()

    def hook(state: DistillState, label: str) -> dict:
        out = {"consistency_gap": consistency_gap(state, ecfg)}
        for row in endpoint_eval(state, ecfg):
            out[f"distance_nfe{row['nfe']}"] = row["distance"]
            out["floor"] = row["floor"]
        return out

    return hook


# -- STD vs forward-noised baseline ---------------------------------------

COMPARISON_HEADER = ("mode", "delta", "seed", "nfe", "endpoint_distance", "floor",
                     "consistency_gap")


@dataclass
class ComparisonTable:
    rows: list[dict] = field(default_factory=list)

    def select(self, **kw) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in kw.items())]

    def median(self, mode: str, delta: float, key: str = "endpoint_distance") -> float:
        return float(np.median([r[key] for r in self.select(mode=mode, delta=delta)]))

    def seed_wins(self, delta: float) -> tuple[int, int]:
        """(# seeds where STD's distance <= baseline's, # seeds)."""
        std = {r["seed"]: r["endpoint_distance"] for r in self.select(mode="std", delta=delta)}
        cd = {r["seed"]: r["endpoint_distance"]
              for r in self.select(mode="baseline-cd", delta=delta)}
        seeds = sorted(set(std) & set(cd))
        return sum(std[k] <= cd[k] for k in seeds), len(seeds)

    def mode_difference_pvalue(self, delta: float) -> float:
        """Two-sided Mann-Whitney p-value for STD vs baseline distances."""
        from scipy.stats import mannwhitneyu
        a = [r["endpoint_distance"] for r in self.select(mode="std", delta=delta)]
        b = [r["endpoint_distance"] for r in self.select(mode="baseline-cd", delta=delta)]
        return float(mannwhitneyu(a, b, alternative="two-sided").pvalue)

    def to_csv(self, path):
        write_rows(path, COMPARISON_HEADER, [[r[k] for k in COMPARISON_HEADER] for r in self.rows])

    def format(self) -> str:
        lines = ["  ".join(f"{h:>18}" for h in COMPARISON_HEADER)]
        for r in self.rows:
            lines.append("  ".join(f"{r[h]:>18.6g}" if isinstance(r[h], float) else f"{r[h]:>18}"
                                   for h in COMPARISON_HEADER))
        return "\n".join(lines)


def _train_from(warm: DistillState, config: DistillConfig) -> DistillState:
    state = copy.deepcopy(warm)
    state.config = config
    for _ in range(config.iterations):
        train_iteration(state)
    return state


def compare_std_cd(config: DistillConfig, spec: GmmSpec, seeds, delta: float,
                   ecfg: EvalConfig | None = None, control: bool = True,
                   nfe: int = 4) -> ComparisonTable:
    """Train both modes per seed from a shared warm start and score them.

    Within a seed both modes share the warmed-up student, the data/noise
    stream and the iteration budget. With ``control`` the grid is repeated
    with a perfect teacher.
    """
    ecfg = replace(ecfg or EvalConfig(), nfe=(nfe,))
    table = ComparisonTable()
    deltas = [delta, 0.0] if control and delta != 0 else [delta]
    for d in deltas:
        for seed in seeds:
            base = replace(config, seed=seed, teacher_delta=d, mode="std")
            warm = DistillState(base, spec)
            warmup(warm)
            for mode in ("std", "baseline-cd"):
                started = time.perf_counter()
                state = _train_from(warm, replace(base, mode=mode))
                ev = endpoint_eval(state, ecfg)[0]
                gap = consistency_gap(state, ecfg)
                table.rows.append({"mode": mode, "delta": d, "seed": seed, "nfe": nfe,
                                   "endpoint_distance": ev["distance"], "floor": ev["floor"],
                                   "consistency_gap": gap})
                log.info("compare delta=%.2f seed=%d %s: dist=%.4f floor=%.4f gap=%.4f (%.1fs)",
                         d, seed, mode, ev["distance"], ev["floor"], gap,
                         time.perf_counter() - started)
    return table


# -- ablation grids ---------------------------------------------------------

ABLATION_HEADER = ("grid", "r_rule", "rho", "lambda_adv", "seed", "endpoint_distance", "floor",
                   "data_distance", "consistency_gap")


def ablate(config: DistillConfig, spec: GmmSpec, seeds=(0,), rhos=(0.0, 0.5, 1.0),
           lambdas=(0.0, 0.1, 0.5), ecfg: EvalConfig | None = None, nfe: int = 4,
           grids=("r_rule", "rho_lambda")) -> list[dict]:
    """Run the discriminator-noise-level table and the rho x lambda grid.

    All variants of a seed start from the same warmed-up student.
    """
    ecfg = replace(ecfg or EvalConfig(), nfe=(nfe,))
    variants = []
    if "r_rule" in grids:
        variants += [("r_rule", {"r_rule": rule}) for rule in ("zero", "equal-s", "above-s",
                                                              "below-s")]
    if "rho_lambda" in grids:
        variants += [("rho_lambda", {"rho": rho, "lambda_adv": lam})
                     for lam in lambdas for rho in rhos]
    rows = []
    for seed in seeds:
        base = replace(config, seed=seed)
        warm = DistillState(base, spec)
        warmup(warm)
        data_rng = np.random.default_rng(ecfg.seed + 1)
        data, _ = gmm_sample(spec, ecfg.n_samples, data_rng)
        for grid_name, overrides in variants:
            cfg = replace(base, **overrides)
            state = _train_from(warm, cfg)
            ev = endpoint_eval(state, ecfg)[0]
            rng = np.random.default_rng(ecfg.seed)
            x_tau, cond = noised_inputs(state, ecfg.n_samples, rng)
            ends = student_sample(state, x_tau, cond, nfe)
            rows.append({
                "grid": grid_name, "r_rule": cfg.r_rule, "rho": cfg.rho,
                "lambda_adv": cfg.lambda_adv, "seed": seed,
                "endpoint_distance": ev["distance"], "floor": ev["floor"],
                "data_distance": sliced_wasserstein(ends, data, ecfg.projections, rng),
                "consistency_gap": consistency_gap(state, ecfg),
            })
            log.info("ablate %s %s: %.4f", grid_name, overrides, ev["distance"])
    return rows


# -- trajectory bank benchmark ---------------------------------------------

def bank_bench(config: DistillConfig, spec: GmmSpec, iterations: int = 200) -> dict:
    """Teacher solver steps and wall-clock per iteration, with and without the bank.

    The bank arm runs the distillation loop with ``rho = 1``. The other arm
    rebuilds each training state by rolling the teacher out from the start of
    the trajectory to a uniformly drawn grid position.
    """
    out = {}
    for arm, overrides in (("bank", {"mode": "std", "rho": 1.0}),
                           ("rollout", {"mode": "std-rollout"})):
        cfg = replace(config, warmup_iterations=0, iterations=iterations, **overrides)
        state = DistillState(cfg, spec)
        started = time.perf_counter()
        steps = 0
        for _ in range(iterations):
            steps += train_iteration(state)["teacher_steps"]
        elapsed = time.perf_counter() - started
        out[f"{arm}_steps_per_iter"] = steps / iterations
        out[f"{arm}_seconds"] = elapsed
    out["wall_clock_ratio"] = out["rollout_seconds"] / out["bank_seconds"]
    out["expected_rollout_steps"] = (config.ode_steps + 1) / 2
    return out


def bench_spec(n_components: int = 256, dim: int = 8, seed: int = 0) -> GmmSpec:
    """A wide random mixture that makes teacher evaluation the dominant cost."""
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 1.5, n_components)
    return GmmSpec(weights=w / w.sum(), means=rng.normal(scale=2.0, size=(n_components, dim)),
                   stdevs=rng.uniform(0.2, 0.6, n_components))


# -- gradient check ---------------------------------------------------------

GRADCHECK_HEADER = ("config", "module", "activation", "prediction", "max_rel_error")


def gradcheck_suite(n_configs: int = 5, seed: int = 0, h: float = 1e-5) -> list[dict]:
    """Finite-difference check of student and critic gradients in float64.

    Each configuration draws its own small architecture, batch, timesteps and
    a random linear read-out of the outputs as the loss.
    """
    from .nn import Discriminator, StudentNet
    from .schedule import build_schedule

    rng = np.random.default_rng(seed)
    sched = build_schedule("linear-beta", 100)
    rows = []
    for k in range(n_configs):
        dim = int(rng.integers(1, 4))
        n_classes = int(rng.integers(1, 4))
        act = ("tanh", "silu")[k % 2]
        pred = ("eps", "v")[(k // 2) % 2]
        widths = tuple(int(w) for w in rng.integers(3, 7, size=2))
        with torch.random.fork_rng():
            torch.manual_seed(seed * 1000 + k)
            net = StudentNet(dim, n_classes, 100, widths=widths, activation=act, n_freqs=2,
                             embed_dim=3, prediction=pred, alpha_bar=sched.alpha_bar).double()
            disc = Discriminator(dim + 2, widths=widths, activation=act).double()
        n = 4
        x = torch.from_numpy(rng.normal(size=(n, dim)))
        t = int(rng.integers(1, 101))
        s = int(rng.integers(0, t + 1))
        cond = rng.integers(-1, n_classes, size=n)
        w_out = torch.from_numpy(rng.normal(size=(n, dim)))
        feats = torch.from_numpy(rng.normal(size=(n, dim + 2)))
        w_disc = torch.from_numpy(rng.normal(size=n))
        err_s = finite_difference_check(net, lambda: (net(x, t, s, cond) * w_out).sum(), h)
        err_d = finite_difference_check(disc, lambda: (disc(feats) * w_disc).sum(), h)
        rows.append({"config": k, "module": "student", "activation": act, "prediction": pred,
                     "max_rel_error": err_s})
        rows.append({"config": k, "module": "discriminator", "activation": act,
                     "prediction": "", "max_rel_error": err_d})
    return rows
