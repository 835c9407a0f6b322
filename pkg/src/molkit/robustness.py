"""Measurement-perturbation experiments: Gaussian and worst-case (projected
gradient) perturbations, the closed-form output-perturbation bound, its
empirical verification harness, and the PSNR-vs-epsilon sweep.

Perturbation sizes are relative to the global measurement norm: a
perturbation at level ``epsilon`` has ||delta|| = epsilon * ||b|| exactly and
is supported on the sampled k-space locations only.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from . import mol
from .imaging import ComplexImage, KSpaceData, psnr
from .linops import SenseModel, gram_apply, sense_adjoint, sense_apply
from .solvers import SolverConfig, alpha_max, contraction_rate, conjugate_gradient


@dataclass
class PerturbationReport:
    epsilon: float
    delta_norm: float
    output_delta_norm: float
    psnr_clean: float
    psnr_perturbed: float
    kind: str

    def __post_init__(self):
        if self.kind not in ("gaussian", "adversarial"):
            raise ValueError("kind must be 'gaussian' or 'adversarial'")


def robustness_bound(alpha: float, lam: float, m: float) -> float:
    """Worst-case output amplification
    alpha*lam / (1 - sqrt(1 - 2*alpha*m + alpha^2*(2-m)^2)).

    Evaluated in the cancellation-free form
    alpha*lam * (1 + rate) / (2*alpha*m - alpha^2*(2-m)^2), which tends to
    lam/m as alpha -> 0.
    """
    if lam <= 0.0:
        raise ValueError("lam must be positive")
    rate = contraction_rate(alpha, m)  # validates alpha/m domain
    denom = 2.0 * alpha * m - alpha**2 * (2.0 - m) ** 2
    return alpha * lam * (1.0 + rate) / denom


def _support(b: KSpaceData) -> np.ndarray:
    """Sampled-location indicator inferred from the any-coil nonzero set."""
    return (np.abs(b.data) > 0).any(axis=0)


def gaussian_perturb(b: KSpaceData, epsilon: float, seed: int = 0) -> KSpaceData:
    """b plus complex white Gaussian noise on the sampled locations,
    rescaled so ||delta|| = epsilon * ||b|| exactly."""
    if epsilon < 0.0:
        raise ValueError("epsilon must be >= 0")
    if epsilon == 0.0:
        return KSpaceData(b.data.copy(), noise_sigma=b.noise_sigma)
    rng = np.random.default_rng(seed)
    delta = rng.standard_normal(b.shape) + 1j * rng.standard_normal(b.shape)
    delta *= _support(b)[None]
    dnorm = np.linalg.norm(delta)
    if dnorm > 0.0:
        delta *= epsilon * b.norm() / dnorm
    return KSpaceData(b.data + delta, noise_sigma=b.noise_sigma)


@dataclass
class MethodSpec:
    """How to reconstruct (and differentiate) for one sweep entry.

    kind "mol" uses the fixed-point iteration with ``config`` and ``net``;
    "modl" uses ``n_unrolls`` alpha=1 unrolls; "sense" is the linear
    Tikhonov baseline with weight ``mu`` (no net)."""

    kind: str
    net: dn.DenoiserNet | None = None
    config: mol.MOLConfig | None = None
    n_unrolls: int = 10
    lam: float = 1.0
    mu: float = 0.05
    solver: SolverConfig | None = None

    def __post_init__(self):
        if self.kind not in ("mol", "modl", "sense"):
            raise ValueError("kind must be 'mol', 'modl' or 'sense'")
        if self.kind == "mol" and (self.net is None or self.config is None):
            raise ValueError("mol method needs net and config")
        if self.kind == "modl" and self.net is None:
            raise ValueError("modl method needs a net")

    def reconstruct(self, b: KSpaceData, model: SenseModel, x0=None) -> ComplexImage:
        if self.kind == "mol":
            return mol.reconstruct_mol(b, self.net, model, self.config, x0=x0).x_star
        if self.kind == "modl":
            x, _ = mol.reconstruct_modl(b, self.net, model, self.n_unrolls, self.lam, self.solver)
            return x
        return mol.reconstruct_sense(b, model, self.mu, self.solver)

    def measurement_grad(self, b, model, x, loss_grad: ComplexImage) -> np.ndarray:
        """Gradient of the loss with respect to the measurements."""
        if self.kind == "mol":
            bg = mol.deq_backward(b, x, self.net, model, self.config, loss_grad, strict=False)
            return bg.b_grad
        if self.kind == "modl":
            _, ledger = mol.reconstruct_modl(
                b, self.net, model, self.n_unrolls, self.lam, self.solver, record_ledger=True
            )
            _, b_grad = mol.modl_backward(ledger, loss_grad, self.net, model, self.lam, self.solver)
            return b_grad
        # sense: x(b) = (A^H A + mu)^{-1} A^H b, self-adjoint solve then A
        cfg = self.solver or SolverConfig(cg_max_iterations=300)

        def op(v):
            return ComplexImage(gram_apply(v, model).data + self.mu * v.data)

        w = conjugate_gradient(op, loss_grad, cfg)
        return sense_apply(w, model).data


def adversarial_attack(
    b: KSpaceData,
    net: dn.DenoiserNet,
    model: SenseModel,
    config: mol.MOLConfig,
    epsilon: float,
    steps: int = 20,
    seed: int = 0,
    ground_truth: ComplexImage | None = None,
    method: MethodSpec | None = None,
):
    """Projected gradient ascent maximizing ||x*(b+delta) - x*(b)||^2 over
    perturbations with ||delta|| <= epsilon*||b|| on the sampled support.

    Each step moves along the measurement-side gradient (normalized to
    0.1*epsilon*||b||) and re-projects onto the epsilon-sphere; the best
    delta over all steps is returned as (delta, PerturbationReport).
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    spec = method or MethodSpec("mol", net=net, config=config)
    rng = np.random.default_rng(seed)
    support = _support(b)[None]
    radius = epsilon * b.norm()

    x_clean = spec.reconstruct(b, model)

    delta = rng.standard_normal(b.shape) + 1j * rng.standard_normal(b.shape)
    delta *= support
    delta *= radius / np.linalg.norm(delta)

    best_out, best_delta = -1.0, delta.copy()
    x_prev = None
    for _ in range(steps):
        bp = KSpaceData(b.data + delta, noise_sigma=b.noise_sigma)
        x_pert = spec.reconstruct(bp, model, x0=x_prev)
        x_prev = x_pert
        out = float(np.linalg.norm(x_pert.data - x_clean.data))
        if out > best_out:
            best_out, best_delta = out, delta.copy()
        g = spec.measurement_grad(
            bp, model, x_pert, ComplexImage(2.0 * (x_pert.data - x_clean.data))
        )
        g = g * support
        gn = np.linalg.norm(g)
        if gn == 0.0:
            break
        delta = delta + (0.1 * radius / gn) * g
        delta *= radius / np.linalg.norm(delta)

    bp = KSpaceData(b.data + best_delta, noise_sigma=b.noise_sigma)
    x_pert = spec.reconstruct(bp, model)
    report = PerturbationReport(
        epsilon=epsilon,
        delta_norm=float(np.linalg.norm(best_delta)),
        output_delta_norm=float(np.linalg.norm(x_pert.data - x_clean.data)),
        psnr_clean=psnr(x_clean, ground_truth) if ground_truth is not None else math.nan,
        psnr_perturbed=psnr(x_pert, ground_truth) if ground_truth is not None else math.nan,
        kind="adversarial",
    )
    return KSpaceData(best_delta, noise_sigma=0.0), report


@dataclass
class BoundReport:
    alpha: float
    lam: float
    m_empirical: float
    bound: float | None
    max_empirical: float | None
    passed: bool | None
    applicable: bool

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "lambda": self.lam,
            "m_empirical": self.m_empirical,
            "bound": self.bound,
            "max_empirical": self.max_empirical,
            "pass": self.passed,
        }


def verify_bound(
    net: dn.DenoiserNet,
    config: mol.MOLConfig,
    samples=None,
    epsilons=(0.05, 0.1, 0.2),
    attack_steps: int = 10,
    seed: int = 0,
) -> BoundReport:
    """Empirical check of the output-perturbation bound.

    ``samples`` is a list of TrainSample (each carries its own acquisition
    model); the monotonicity constant is measured over their reconstructions
    (not the training target), and the max of ||Delta||/||delta|| over
    samples x epsilons x {gaussian, adversarial} is compared against
    robustness_bound(alpha, lam, m_emp).  A non-positive measured constant
    yields an inapplicable (not failed) report.
    """
    if not list(epsilons):
        raise ValueError("empty epsilon list")
    if not samples or len(samples) < 2:
        raise ValueError("need at least 2 samples to measure monotonicity")

    recons = []
    for s in samples:
        fp = mol.reconstruct_mol(s.measurements, net, s.model, config)
        recons.append(fp.x_star)
    m_emp = dn.estimate_monotonicity(net, recons)
    if m_emp <= 0.0 or config.alpha >= alpha_max(min(m_emp, 1 - 1e-12)):
        return BoundReport(config.alpha, config.lam, m_emp, None, None, None, False)

    bound = robustness_bound(config.alpha, config.lam, m_emp)
    worst = 0.0
    for i, s in enumerate(samples):
        x_clean = recons[i]
        for eps in epsilons:
            bp = gaussian_perturb(s.measurements, eps, seed=seed + i)
            d_norm = float(np.linalg.norm(bp.data - s.measurements.data))
            if d_norm > 0.0:
                xg = mol.reconstruct_mol(bp, net, s.model, config, x0=x_clean).x_star
                worst = max(worst, float(np.linalg.norm(xg.data - x_clean.data)) / d_norm)
            delta, rep = adversarial_attack(
                s.measurements, net, s.model, config, eps, steps=attack_steps, seed=seed + i
            )
            if rep.delta_norm > 0.0:
                worst = max(worst, rep.output_delta_norm / rep.delta_norm)
    return BoundReport(config.alpha, config.lam, m_emp, bound, worst, worst <= bound, True)


def _sweep_cell(spec, dataset, eps, kind, attack_steps, seed):
    values = []
    for i, s in enumerate(dataset):
        if eps == 0.0:
            x = spec.reconstruct(s.measurements, s.model)
            values.append(psnr(x, s.ground_truth))
        elif kind == "gaussian":
            bp = gaussian_perturb(s.measurements, eps, seed=seed + i)
            x = spec.reconstruct(bp, s.model)
            values.append(psnr(x, s.ground_truth))
        else:
            _, rep = adversarial_attack(
                s.measurements, spec.net, s.model, spec.config, eps,
                steps=attack_steps, seed=seed + i, ground_truth=s.ground_truth, method=spec,
            )
            values.append(rep.psnr_perturbed)
    return values


def sweep(
    methods: dict,
    dataset,
    epsilons=(0.0, 0.05, 0.1, 0.2),
    kinds=("gaussian", "adversarial"),
    attack_steps: int = 10,
    seed: int = 0,
    max_workers: int | None = None,
) -> list[dict]:
    """Mean/std PSNR per (method, kind, epsilon) cell.

    Cells are independent; ``max_workers`` (or the MOLKIT_THREADS env var)
    enables a thread pool.  Per-cell failures become null cells carrying the
    error message."""
    if max_workers is None:
        max_workers = int(os.environ.get("MOLKIT_THREADS", "1"))
    jobs = [
        (name, spec, kind, eps)
        for name, spec in methods.items()
        for kind in kinds
        for eps in epsilons
    ]

    def run(job):
        name, spec, kind, eps = job
        try:
            vals = _sweep_cell(spec, dataset, eps, kind, attack_steps, seed)
            return {
                "method": name, "kind": kind, "epsilon": eps,
                "mean_psnr": float(np.mean(vals)), "std_psnr": float(np.std(vals)),
                "n": len(vals),
            }
        except Exception as exc:  # propagate as a null cell, keep the sweep going
            return {
                "method": name, "kind": kind, "epsilon": eps,
                "mean_psnr": None, "std_psnr": None, "n": 0, "reason": str(exc),
            }

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(job) for job in jobs]
    return rows


def write_sweep(path_base, rows):
    """Write sweep rows as CSV and a JSON twin (<base>.csv / <base>.json)."""
    with open(path_base + ".csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "kind", "epsilon", "mean_psnr", "std_psnr", "n"])
        for r in rows:
            writer.writerow([
                r["method"], r["kind"], r["epsilon"],
                "" if r["mean_psnr"] is None else f"{r['mean_psnr']:.6f}",
                "" if r["std_psnr"] is None else f"{r['std_psnr']:.6f}",
                r["n"],
            ])
    with open(path_base + ".json", "w") as fh:
        json.dump(rows, fh, indent=2)
