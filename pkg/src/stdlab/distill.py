"""Single-trajectory consistency distillation and the forward-noised baseline."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint
from .bank import TrajectoryBank
from .dynamics import NULL, perturb, teacher_step
from .models import FeatureMap, GmmSpec, gmm_sample, make_teacher
from .nn import (Discriminator, NonFiniteError, StudentNet, consistency_fn, ema_update,
                 make_adam, make_target, to_tensor)
from .schedule import StepGrid, build_schedule, tau_eta, uniform_grid

log = logging.getLogger(__name__)

MODES = ("std", "baseline-cd", "std-rollout")
R_RULES = ("below-s", "equal-s", "above-s", "zero")
LR_DECAYS = ("constant", "cosine")
STREAMS = ("init", "warmup", "data", "branch", "bank", "target", "adv", "cd")


@dataclass
class DistillConfig:
    eta: float = 0.75
    rho: float = 0.8
    gamma: float = 0.9
    bank_capacity: int = 4
    ema_mu: float = 0.95
    lambda_adv: float = 0.1
    omega_min: float = 0.0
    omega_max: float = 2.0
    ode_steps: int = 50
    iterations: int = 5000
    warmup_iterations: int = 2000
    batch_size: int = 256
    seed: int = 0
    mode: str = "std"
    r_rule: str = "below-s"
    fixed_omega_per_trajectory: bool = False
    lr_student: float = 1e-3
    lr_disc: float = 1e-3
    lr_decay: str = "cosine"
    schedule: str = "linear-beta"
    total_steps: int = 1000
    condition_on_s: bool = True
    prediction: str = "v"
    teacher_delta: float = 0.0
    teacher_field: str = "constant-vector"
    teacher_seed: int = 0
    feature_map: str = "random-projection"
    feature_dim: int = 16
    warmup_label_dropout: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (0.0 < self.eta <= 1.0, "eta must lie in (0, 1]"),
            (0.0 <= self.rho <= 1.0, "rho must lie in [0, 1]"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (self.bank_capacity >= 1, "bank_capacity must be >= 1"),
            (0.0 <= self.ema_mu <= 1.0, "ema_mu must lie in [0, 1]"),
            (self.lambda_adv >= 0.0, "lambda_adv must be >= 0"),
            (self.omega_min <= self.omega_max, "omega_min must not exceed omega_max"),
            (self.ode_steps >= 1, "ode_steps must be >= 1"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.warmup_iterations >= 0, "warmup_iterations must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.r_rule in R_RULES, f"r_rule must be one of {R_RULES}"),
            (self.lr_student > 0 and self.lr_disc > 0, "learning rates must be positive"),
            (self.lr_decay in LR_DECAYS, f"lr_decay must be one of {LR_DECAYS}"),
            (self.prediction in ("eps", "v"), "prediction must be 'eps' or 'v'"),
            (self.total_steps >= 2, "total_steps must be >= 2"),
            (self.teacher_delta >= 0.0, "teacher_delta must be >= 0"),
            (0.0 <= self.warmup_label_dropout <= 1.0, "warmup_label_dropout must lie in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def omega_mid(self) -> float:
        return 0.5 * (self.omega_min + self.omega_max)

    def lr_scale(self, iteration: int) -> float:
        """Multiplier on both learning rates for main-loop step ``iteration`` (0-based)."""
        if self.lr_decay == "constant" or self.iterations == 0:
            return 1.0
        frac = min(iteration, self.iterations) / self.iterations
        return 0.5 * (1.0 + math.cos(math.pi * frac))


RECORD_FIELDS = ("iteration", "loss_std", "loss_adv_g", "loss_adv_d", "teacher_steps",
                 "teacher_evals", "bank_occupancy", "t", "s", "r", "wall_time")


@dataclass
class RunReport:
    records: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    def append(self, record: dict):
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def deterministic_view(self) -> list[tuple]:
        """Records without wall-clock timings, for reproducibility checks."""
        return [tuple(r[k] for k in RECORD_FIELDS if k != "wall_time") for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RECORD_FIELDS)
            for r in self.records:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in RECORD_FIELDS])


class DistillState:
    """Everything a run mutates: networks, optimizers, bank and RNG streams."""

    def __init__(self, config: DistillConfig, spec: GmmSpec):
        self.config = config
        self.spec = spec
        self.schedule = build_schedule(config.schedule, config.total_steps)
        self.tau = tau_eta(self.schedule, config.eta)
        self.grid = uniform_grid(self.schedule, self.tau, config.ode_steps)
        self.teacher = make_teacher(spec, self.schedule, config.teacher_delta,
                                    config.teacher_field, config.teacher_seed)
        seeds = np.random.SeedSequence(config.seed).spawn(len(STREAMS))
        self.rng = {name: np.random.default_rng(s) for name, s in zip(STREAMS, seeds)}

        init_seed = int(self.rng["init"].integers(2**62))
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.student = StudentNet(spec.dim, spec.n_components, config.total_steps,
                                      condition_on_s=config.condition_on_s,
                                      prediction=config.prediction,
                                      alpha_bar=self.schedule.alpha_bar)
            self.features = FeatureMap(config.feature_map, spec.dim, config.feature_dim,
                                       seed=init_seed % (2**32))
            self.disc = Discriminator(self.features.dim_out)
        self.target = make_target(self.student)
        self.opt_student = make_adam([(self.student.parameters(), config.lr_student)])
        self.opt_disc = make_adam([(self.disc.parameters(), config.lr_disc)])
        self.bank = TrajectoryBank(config.bank_capacity)
        self.iteration = 0
        self.teacher_steps = 0

    def sync_target(self):
        self.target.load_state_dict(self.student.state_dict())


def sample_target_s(t: int, gamma: float, rng: np.random.Generator, grid: StepGrid) -> int:
    """Draw ``s ~ U[(1 - gamma) t, t]`` and snap it down onto ``grid``."""
    if gamma == 0:
        return t
    draw = rng.uniform((1.0 - gamma) * t, t)
    return min(grid.floor(draw), t)


def sample_r(s: int, r_rule: str, grid: StepGrid, rng: np.random.Generator) -> int:
    """Noise level of the real samples shown to the discriminator."""
    if r_rule == "zero":
        return 0
    if r_rule == "equal-s":
        return s
    if r_rule == "below-s":
        cands = [u for u in grid if u < s]
        fallback = 0
    elif r_rule == "above-s":
        cands = [u for u in grid if u > s]
        fallback = s
    else:
        raise ValueError(f"unknown r_rule {r_rule!r}")
    if not cands:
        return fallback
    return int(cands[int(rng.integers(len(cands)))])


def std_loss(student, target, x_in, t_in: int, x_teacher, t_n: int, s: int, cond, schedule):
    """Squared distance between the student's jump and the target's jump to ``s``.

    Returns ``(loss, student_output)``; only the student branch records a graph.
    """
    if not t_in >= t_n >= s:
        raise ValueError(f"need t_in >= t_n >= s, got {t_in}, {t_n}, {s}")
    fake = consistency_fn(student, x_in, t_in, s, cond, schedule)
    with torch.no_grad():
        goal = consistency_fn(target, x_teacher, t_n, s, cond, schedule)
    loss = ((fake - goal) ** 2).sum(dim=1).mean()
    return loss, fake


def adv_losses(disc, features, fake, real):
    """Hinge losses; ``real`` should already be noised to its level r.

    The generator loss keeps the graph into ``fake``; the discriminator loss
    sees a detached copy.
    """
    loss_g = -disc(features(fake)).mean()
    loss_d = (torch.relu(1.0 + disc(features(fake.detach()))).mean()
              + torch.relu(1.0 - disc(features(real))).mean())
    return loss_g, loss_d


def _draw_shared(state: DistillState):
    """Draws every mode consumes each iteration, in the same order."""
    cfg, rng = state.config, state.rng["data"]
    x0, cond = gmm_sample(state.spec, cfg.batch_size, rng)
    omega = rng.uniform(cfg.omega_min, cfg.omega_max, size=cfg.batch_size)
    eps = rng.standard_normal(x0.shape)
    return x0, cond, omega, eps


def _starting_point(state: DistillState, x0, cond, omega, eps):
    """Pick ``x_{t_{n+1}}`` for this iteration.

    Returns ``(x0, x, cond, omega, t, slot, solver_steps)``.
    """
    cfg = state.config
    mode = cfg.mode
    bank = state.bank
    if mode == "baseline-cd":
        k = int(state.rng["cd"].integers(cfg.ode_steps))
        t = state.grid[k]
        return x0, perturb(x0, t, eps, state.schedule), cond, omega, t, None, 0
    if mode == "std-rollout":
        k = int(state.rng["cd"].integers(cfg.ode_steps))
        x = perturb(x0, state.tau, eps, state.schedule)
        for j in range(k):
            x = teacher_step(state.teacher, x, state.grid[j], state.grid[j + 1], cond, omega,
                             state.schedule)
        return x0, x, cond, omega, state.grid[k], None, k

    take_bank = state.rng["branch"].random() < cfg.rho
    if take_bank and len(bank) > 0:
        slot, entry = bank.sample(state.rng["bank"])
        if entry.omega is not None:
            omega = entry.omega
        return entry.x0, entry.state, entry.cond, omega, entry.t, slot, 0
    slot = bank.try_reserve()
    x = perturb(x0, state.tau, eps, state.schedule)
    if slot is not None:
        bank.reserve(slot, x0, cond, omega if cfg.fixed_omega_per_trajectory else None, start=x)
    return x0, x, cond, omega, state.tau, slot, 0


def train_iteration(state: DistillState) -> dict:
    """One pass of the distillation loop: teacher step, student/EMA/critic updates, bank update."""
    cfg, schedule = state.config, state.schedule
    started = time.perf_counter()
    evals_before = state.teacher.calls

    x0, cond, omega, eps = _draw_shared(state)
    x0, x, cond, omega, t, slot, steps = _starting_point(state, x0, cond, omega, eps)
    t_n = state.grid.next_after(t)
    s = min(sample_target_s(t, cfg.gamma, state.rng["target"], state.grid), t_n)

    x_next = teacher_step(state.teacher, x, t, t_n, cond, omega, schedule)
    steps += 1

    loss_std, fake = std_loss(state.student, state.target, to_tensor(x), t,
                              to_tensor(x_next), t_n, s, cond, schedule)
    r = sample_r(s, cfg.r_rule, state.grid, state.rng["adv"])
    real = perturb(x0, r, state.rng["adv"].standard_normal(x0.shape), schedule)
    loss_g, loss_d = adv_losses(state.disc, state.features, fake, to_tensor(real))
    total = loss_std + cfg.lambda_adv * loss_g if cfg.lambda_adv > 0 else loss_std
    if not (torch.isfinite(total) and torch.isfinite(loss_d)):
        raise NonFiniteError(
            f"non-finite loss at iteration {state.iteration}: std={loss_std.item()}, "
            f"adv_g={loss_g.item()}, adv_d={loss_d.item()}, t={t}, s={s}, r={r}")

    scale = cfg.lr_scale(state.iteration)
    for opt, lr in ((state.opt_student, cfg.lr_student), (state.opt_disc, cfg.lr_disc)):
        for group in opt.param_groups:
            group["lr"] = lr * scale

    state.opt_student.zero_grad(set_to_none=True)
    total.backward()
    state.opt_student.step()
    ema_update(state.target, state.student, cfg.ema_mu)

    state.opt_disc.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_disc.step()

    if slot is not None:
        state.bank.commit(slot, x_next, t_n)

    state.iteration += 1
    state.teacher_steps += steps
    return {
        "iteration": state.iteration,
        "loss_std": float(loss_std.item()),
        "loss_adv_g": float(loss_g.item()),
        "loss_adv_d": float(loss_d.item()),
        "teacher_steps": steps,
        "teacher_evals": state.teacher.calls - evals_before,
        "bank_occupancy": len(state.bank),
        "t": int(t),
        "s": int(s),
        "r": int(r),
        "wall_time": time.perf_counter() - started,
    }


def baseline_cd_iteration(state: DistillState) -> dict:
    """Same update as :func:`train_iteration` but starting from forward-noised points."""
    if state.config.mode != "baseline-cd":
        raise ValueError("state is not configured for the baseline mode")
    return train_iteration(state)


def warmup(state: DistillState, iterations: int | None = None) -> list[float]:
    """Regress the student's noise estimate onto the teacher's, then copy it to the target."""
    cfg, spec, schedule = state.config, state.spec, state.schedule
    rng = state.rng["warmup"]
    n = cfg.warmup_iterations if iterations is None else iterations
    opt = make_adam([(state.student.parameters(), cfg.lr_student)])
    losses = []
    for _ in range(n):
        t = int(rng.integers(1, state.tau + 1))
        s = int(rng.integers(0, t + 1))
        x0, cond = gmm_sample(spec, cfg.batch_size, rng)
        drop = rng.random(cfg.batch_size) < cfg.warmup_label_dropout
        cond = np.where(drop, NULL, cond)
        eps = rng.standard_normal(x0.shape)
        x_t = perturb(x0, t, eps, schedule)
        goal = to_tensor(state.teacher(x_t, t, cond))
        pred = state.student(to_tensor(x_t), t, s, cond)
        loss = ((pred - goal) ** 2).sum(dim=1).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    state.sync_target()
    return losses


# -- persistence ---------------------------------------------------------

def state_entries(state: DistillState, config_text: str = "") -> dict:
    entries = {}
    for prefix, module in (("student", state.student), ("target", state.target),
                           ("disc", state.disc)):
        for name, p in module.named_parameters():
            entries[f"{prefix}/{name}"] = p.detach().numpy().copy()
    for prefix, module, opt in (("opt/student", state.student, state.opt_student),
                                ("opt/disc", state.disc, state.opt_disc)):
        for name, p in module.named_parameters():
            st = opt.state.get(p)
            if not st:
                continue
            entries[f"{prefix}/{name}/step"] = np.asarray(float(st["step"]), dtype=np.float64)
            entries[f"{prefix}/{name}/exp_avg"] = st["exp_avg"].numpy().copy()
            entries[f"{prefix}/{name}/exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
    entries["meta/schedule_kind"] = checkpoint.text_entry(state.schedule.kind)
    entries["meta/total_steps"] = np.asarray(state.schedule.total_steps, dtype=np.int64)
    entries["meta/iteration"] = np.asarray(state.iteration, dtype=np.int64)
    entries["meta/config"] = checkpoint.text_entry(config_text)
    return entries


def load_state_entries(state: DistillState, entries: dict):
    with torch.no_grad():
        for prefix, module in (("student", state.student), ("target", state.target),
                               ("disc", state.disc)):
            for name, p in module.named_parameters():
                p.copy_(torch.from_numpy(entries[f"{prefix}/{name}"]))
    for prefix, module, opt in (("opt/student", state.student, state.opt_student),
                                ("opt/disc", state.disc, state.opt_disc)):
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}"
            if f"{key}/step" not in entries:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(entries[f"{key}/step"])),
                "exp_avg": torch.from_numpy(entries[f"{key}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(entries[f"{key}/exp_avg_sq"].copy()),
            }
    state.iteration = int(entries["meta/iteration"])


def save_state(state: DistillState, path, config_text: str = ""):
    checkpoint.save(path, state_entries(state, config_text))


def load_state(path, spec: GmmSpec, config: DistillConfig | None = None) -> DistillState:
    """Rebuild a state from a checkpoint; the stored config is used unless given."""
    entries = checkpoint.load(path)
    if config is None:
        from .config import config_from_text
        config, _, _ = config_from_text(checkpoint.entry_text(entries["meta/config"]))
    state = DistillState(config, spec)
    load_state_entries(state, entries)
    return state


def run(config: DistillConfig, spec: GmmSpec, out_dir=None, config_text: str = "",
        snapshot: Callable[[DistillState, str], dict] | None = None,
        log_every: int = 500, state: DistillState | None = None) -> tuple[RunReport, DistillState]:
    """Warm up, run the main loop and write metrics/checkpoints to ``out_dir``.

    ``snapshot(state, label)`` is called after warmup and at the end; its
    dict lands in ``report.snapshots``.
    """
    report = RunReport()
    if state is None:
        state = DistillState(config, spec)
        warmup(state)
    if snapshot is not None:
        report.snapshots.append({"label": "warmup-end", **snapshot(state, "warmup-end")})
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_state(state, out / "warmup.ckpt", config_text)
    for k in range(config.iterations):
        rec = train_iteration(state)
        report.append(rec)
        if log_every and (k + 1) % log_every == 0:
            log.info("iter %d  L_std=%.3e  L_G=%.3f  L_D=%.3f", rec["iteration"],
                     rec["loss_std"], rec["loss_adv_g"], rec["loss_adv_d"])
    if snapshot is not None and config.iterations > 0:
        report.snapshots.append({"label": "final", **snapshot(state, "final")})
    if out is not None:
        save_state(state, out / "final.ckpt", config_text)
        report.to_csv(out / "metrics.csv")
    return report, state


def config_dict(config: DistillConfig) -> dict:
    return asdict(config)


def config_keys() -> list[str]:
    return [f.name for f in fields(DistillConfig)]
