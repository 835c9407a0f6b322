"""Command-line surface: generate | train | reconstruct | verify | sweep.

Every command is driven by a single JSON config document; defaults are
resolved up front, unknown keys are rejected, and the effective config is
written next to the outputs so a run can be reproduced from it exactly.

Exit codes: 0 success, 1 property/convergence failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import denoiser as dn
from . import mol, robustness
from .errors import ConfigError, MolkitError
from .imaging import (
    ComplexImage,
    KSpaceData,
    generate_coil_maps,
    generate_mask,
    generate_phantom,
    load_dataset,
    psnr,
    save_dataset,
)
from .linops import SenseModel, adjoint_test, estimate_operator_norm, sense_apply
from .solvers import SolverConfig, alpha_max, contraction_rate, estimate_rate

_DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "molkit-run",
    "data": {
        "height": 64,
        "width": 64,
        "ncoils": 4,
        "acceleration": 4.0,
        "center_fraction": 0.08,
        "mask_kind": "cartesian-variable-density",
        "phantom_kind": "smooth-random",
        "noise_sigma": 0.005,
        "n_train": 20,
        "n_val": 4,
        "n_test": 8,
        "seed": 1234,
    },
    "mol": {
        "alpha": 0.05,
        "lambda": 1.0,
        "m": 0.1,
        "backward_mode": "implicit-adjoint",
        "solver": {
            "fp_tolerance": 1e-5,
            "fp_max_iterations": 200,
            "cg_tolerance": 1e-6,
            "cg_max_iterations": 50,
        },
    },
    "denoiser": {
        "mode": "LR",
        "depth": 5,
        "channels": 32,
        "kernel_size": 3,
        "activation": "softplus",
        "reference_size": 32,
        "weight_scale": 0.1,
        "seed": 7,
    },
    "train": {
        "beta": 0.01,
        "epochs": 30,
        "learning_rate": 1e-3,
        "batch_size": 1,
        "ascent_steps": 10,
        "seed": 0,
        "fp_tolerance": 1e-4,
        "fp_max_iterations": 120,
        "adjoint_tolerance": 1e-3,
        "adjoint_max_iterations": 120,
        "method": "mol",
        "n_unrolls": 10,
    },
    "reconstruct": {
        "method": "mol",
        "n_unrolls": 10,
        "mu": 0.05,
        "split": "test",
    },
    "verify": {
        "adjoint_trials": 10,
        "n_samples": 4,
        "epsilons": [0.05, 0.1],
        "attack_steps": 5,
        "lipschitz_steps": 100,
    },
    "sweep": {
        "epsilons": [0.0, 0.05, 0.1, 0.2],
        "kinds": ["gaussian", "adversarial"],
        "attack_steps": 10,
        "split": "test",
        "methods": [],
    },
}


def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, path + key + ".")
        elif key == "methods":
            merged[key] = value  # free-form method list, validated at use
        else:
            merged[key] = value
    return merged


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return _merge(_DEFAULT_CONFIG, raw)


def _dump_effective(cfg, out_dir, name="effective_config.json"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def _solver_from(cfg_mol, train_section=None) -> SolverConfig:
    s = cfg_mol["solver"]
    kw = dict(
        fp_tolerance=s["fp_tolerance"],
        fp_max_iterations=s["fp_max_iterations"],
        cg_tolerance=s["cg_tolerance"],
        cg_max_iterations=s["cg_max_iterations"],
    )
    if train_section is not None:
        kw["fp_tolerance"] = train_section["fp_tolerance"]
        kw["fp_max_iterations"] = train_section["fp_max_iterations"]
    return SolverConfig(**kw)


def _mol_config(cfg, for_training=False) -> mol.MOLConfig:
    section = cfg["mol"]
    return mol.MOLConfig(
        alpha=section["alpha"],
        lam=section["lambda"],
        m=section["m"],
        solver=_solver_from(section, cfg["train"] if for_training else None),
        backward_mode=section["backward_mode"],
    )


def _make_net(cfg) -> dn.DenoiserNet:
    d = cfg["denoiser"]
    return dn.make_denoiser(
        depth=d["depth"],
        channels=d["channels"],
        kernel_size=d["kernel_size"],
        mode=d["mode"],
        m_target=cfg["mol"]["m"],
        seed=d["seed"],
        activation=d["activation"],
        weight_scale=d["weight_scale"],
    )


def _sample_dirs(dataset_dir, split):
    root = os.path.join(dataset_dir, split)
    if not os.path.isdir(root):
        raise ConfigError(f"dataset split not found: {root}")
    return [os.path.join(root, d) for d in sorted(os.listdir(root))]


def _load_sample(sample_dir) -> mol.TrainSample:
    items = load_dataset(sample_dir)
    model = SenseModel(items["maps"], items["mask"], items["image"].shape)
    return mol.TrainSample(items["image"], items["kspace"], model)


def load_split(dataset_dir, split):
    return [_load_sample(d) for d in _sample_dirs(dataset_dir, split)]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg, out_dir, force=False) -> int:
    data = cfg["data"]
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        print(f"error: output dir {out_dir} is not empty (use --force)", file=sys.stderr)
        return 1
    seed0 = data["seed"]
    counts = {"train": data["n_train"], "val": data["n_val"], "test": data["n_test"]}
    idx = 0
    for split, count in counts.items():
        for k in range(count):
            sample_seed = seed0 + idx
            idx += 1
            img = generate_phantom(data["height"], data["width"], data["phantom_kind"], sample_seed)
            maps = generate_coil_maps(data["height"], data["width"], data["ncoils"], seed0)
            mask = generate_mask(
                data["height"], data["width"], data["acceleration"], data["mask_kind"],
                seed=sample_seed + 10_000, center_fraction=data["center_fraction"],
            )
            model = SenseModel(maps, mask, img.shape)
            b = sense_apply(img, model)
            sigma = data["noise_sigma"]
            if sigma > 0:
                rng = np.random.default_rng(sample_seed + 20_000)
                noise = sigma * (rng.standard_normal(b.shape) + 1j * rng.standard_normal(b.shape))
                noise *= (np.abs(b.data) > 0).any(axis=0)[None]
                b = KSpaceData(b.data + noise / np.sqrt(2.0), noise_sigma=sigma)
            save_dataset(
                os.path.join(out_dir, split, f"sample_{k:03d}"),
                {"image": img, "kspace": b, "maps": maps, "mask": mask},
            )
    _dump_effective(cfg, out_dir)
    print(f"wrote {idx} samples under {out_dir}")
    return 0


def cmd_train(cfg, dataset_dir, out_dir) -> int:
    dataset = load_split(dataset_dir, "train")
    net = _make_net(cfg)
    t = cfg["train"]
    tcfg = mol.TrainConfig(
        beta=t["beta"],
        epochs=t["epochs"],
        learning_rate=t["learning_rate"],
        batch_size=t["batch_size"],
        ascent_steps=t["ascent_steps"],
        adjoint_tolerance=t["adjoint_tolerance"],
        adjoint_max_iterations=t["adjoint_max_iterations"],
        seed=t["seed"],
    )
    os.makedirs(out_dir, exist_ok=True)
    if t["method"] == "modl":
        net, log = mol.train_unrolled(
            dataset, net, t["n_unrolls"], cfg["mol"]["lambda"], tcfg,
            solver=_solver_from(cfg["mol"]),
        )
        feasible = True
    else:
        config = _mol_config(cfg, for_training=True)
        net, log = mol.train(dataset, net, config, tcfg)
        final = [r for r in log if r.get("final_check")]
        feasible = final[-1]["feasible"] if final else tcfg.beta == 0.0 or net.mode == "SN"
    dn.save_checkpoint(net, os.path.join(out_dir, "checkpoint"))
    mol.write_training_log(os.path.join(out_dir, "training_log.jsonl"), log)
    _dump_effective(cfg, out_dir)
    last = [r for r in log if "epoch" in r][-1]
    print(f"trained {t['method']}: final train PSNR {last['train_psnr']:.2f} dB")
    if not feasible:
        print("error: Lipschitz constraint infeasible at end of training", file=sys.stderr)
        return 1
    return 0


def cmd_reconstruct(cfg, dataset_dir, out_dir, checkpoint=None) -> int:
    r = cfg["reconstruct"]
    method = r["method"]
    net = None
    if method in ("mol", "modl"):
        if checkpoint is None:
            print("error: --checkpoint required for method " + method, file=sys.stderr)
            return 2
        net = dn.load_checkpoint(checkpoint)
    samples = load_split(dataset_dir, r["split"])
    config = _mol_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    metrics = []
    any_failed = False
    for k, s in enumerate(samples):
        entry = {"sample": k, "method": method}
        if method == "mol":
            fp = mol.reconstruct_mol(s.measurements, net, s.model, config)
            x = fp.x_star
            entry.update(
                converged=fp.converged, iterations=fp.iterations,
                final_residual=fp.residuals[-1] if fp.residuals else None,
            )
            any_failed |= not fp.converged
        elif method == "modl":
            x, ledger = mol.reconstruct_modl(
                s.measurements, net, s.model, r["n_unrolls"], cfg["mol"]["lambda"],
                record_ledger=True,
            )
            entry["ledger_floats"] = mol.ledger_activation_floats(net, ledger)
        elif method == "sense":
            x = mol.reconstruct_sense(s.measurements, s.model, r["mu"])
        else:
            print(f"error: unknown method {method!r}", file=sys.stderr)
            return 2
        entry["psnr"] = psnr(x, s.ground_truth)
        metrics.append(entry)
        save_dataset(os.path.join(out_dir, f"recon_{k:03d}"), {"image": x})
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    _dump_effective(cfg, out_dir)
    mean = float(np.mean([e["psnr"] for e in metrics]))
    print(f"{method}: mean PSNR {mean:.2f} dB over {len(metrics)} samples")
    return 1 if any_failed else 0


def cmd_verify(cfg, dataset_dir, out_dir, checkpoint) -> int:
    v = cfg["verify"]
    net = dn.load_checkpoint(checkpoint)
    config = _mol_config(cfg)
    samples = load_split(dataset_dir, "test")[: v["n_samples"]]
    report = {"alpha_max": alpha_max(cfg["mol"]["m"])}
    checks = {}

    adj = max(adjoint_test(s.model, trials=v["adjoint_trials"], seed=i)
              for i, s in enumerate(samples))
    checks["adjoint"] = {"max_error": adj, "pass": adj < 1e-10}

    opnorm = max(estimate_operator_norm(s.model) for s in samples)
    checks["operator_norm"] = {"value": opnorm, "pass": opnorm <= 1.0 + 1e-3}

    fps = [mol.reconstruct_mol(s.measurements, net, s.model, config) for s in samples]
    frac = np.mean([fp.converged for fp in fps])
    checks["convergence"] = {"fraction_converged": float(frac), "pass": frac >= 0.95}

    gaps = []
    for s, fp in zip(samples, fps):
        fp0 = mol.reconstruct_mol(
            s.measurements, net, s.model, config,
            x0=ComplexImage(np.zeros(s.model.image_shape)),
        )
        gaps.append(
            np.linalg.norm(fp0.x_star.data - fp.x_star.data)
            / max(np.linalg.norm(fp.x_star.data), 1e-30)
        )
    checks["uniqueness"] = {
        "max_relative_gap": float(max(gaps)),
        "pass": max(gaps) <= 10 * config.solver.fp_tolerance,
    }

    m_emp = dn.estimate_monotonicity(net, [fp.x_star for fp in fps])
    checks["monotonicity"] = {"m_empirical": m_emp, "pass": m_emp > 0.0}

    if m_emp > 0.0 and config.alpha < alpha_max(min(m_emp, 1 - 1e-12)):
        rate_bound = contraction_rate(config.alpha, min(m_emp, 1 - 1e-12))
        rates = [estimate_rate(fp.residuals) for fp in fps if len(fp.residuals) >= 5]
        emp_rate = max(rates) if rates else None
        checks["rate"] = {
            "empirical": emp_rate, "bound": rate_bound,
            "pass": emp_rate is not None and emp_rate <= rate_bound + 0.02,
        }
        bound_rep = robustness.verify_bound(
            net, config, samples, epsilons=v["epsilons"], attack_steps=v["attack_steps"]
        )
        checks["robustness_bound"] = dict(bound_rep.to_json(), **{"pass": bool(bound_rep.passed)})
    else:
        checks["rate"] = {"empirical": None, "bound": None, "pass": False}
        checks["robustness_bound"] = {"pass": False, "reason": "theory inapplicable (m_emp <= 0)"}

    rep_mol = mol.memory_report("mol", net, samples[0].model.image_shape)
    rep_unr = mol.memory_report("unrolled", net, samples[0].model.image_shape, n_unrolls=10)
    ratio = rep_unr.total_floats / rep_mol.total_floats
    checks["memory"] = {"unrolled10_over_mol": ratio, "pass": 9.0 <= ratio <= 11.0}

    # constraint maintenance with the verification-mode estimator
    if net.mode == "LR":
        worst_p = max(
            dn.estimate_local_lipschitz(net, fp.x_star, v["lipschitz_steps"]).value for fp in fps
        )
        checks["lipschitz_constraint"] = {
            "max_P": worst_p, "T": 1.0 - config.m, "pass": worst_p <= 1.0 - config.m,
        }

    report["checks"] = checks
    report["all_pass"] = all(c["pass"] for c in checks.values())
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "verify_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, default=float)
    _dump_effective(cfg, out_dir)
    for name, c in checks.items():
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {name}")
    print(f"alpha_max(m={cfg['mol']['m']}) = {report['alpha_max']:.4f}")
    return 0 if report["all_pass"] else 1


def cmd_sweep(cfg, dataset_dir, out_dir, checkpoint=None) -> int:
    sw = cfg["sweep"]
    dataset = load_split(dataset_dir, sw["split"])
    config = _mol_config(cfg)
    methods = {}
    entries = sw["methods"]
    if not entries and checkpoint is not None:
        entries = [{"name": "mol", "kind": "mol", "checkpoint": checkpoint}]
    if not entries:
        print("error: no sweep methods configured", file=sys.stderr)
        return 2
    for entry in entries:
        kind = entry.get("kind")
        name = entry.get("name", kind)
        if kind in ("mol", "modl"):
            net = dn.load_checkpoint(entry["checkpoint"])
            if kind == "mol":
                methods[name] = robustness.MethodSpec("mol", net=net, config=config)
            else:
                methods[name] = robustness.MethodSpec(
                    "modl", net=net, n_unrolls=entry.get("n_unrolls", 10),
                    lam=cfg["mol"]["lambda"],
                )
        elif kind == "sense":
            methods[name] = robustness.MethodSpec("sense", mu=entry.get("mu", 0.05))
        else:
            print(f"error: unknown sweep method kind {kind!r}", file=sys.stderr)
            return 2
    rows = robustness.sweep(
        methods, dataset, epsilons=sw["epsilons"], kinds=sw["kinds"],
        attack_steps=sw["attack_steps"], seed=cfg["seed"],
    )
    os.makedirs(out_dir, exist_ok=True)
    robustness.write_sweep(os.path.join(out_dir, "sweep"), rows)
    _dump_effective(cfg, out_dir)
    failed = [r for r in rows if r["mean_psnr"] is None]
    print(f"sweep: {len(rows) - len(failed)}/{len(rows)} cells ok -> {out_dir}/sweep.csv")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="molkit",
        description="Monotone-operator-learning reconstruction toolkit",
    )
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, needs_data=True, needs_ckpt=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=None, help="output directory")
        if needs_data:
            p.add_argument("--dataset", default=None, help="dataset directory")
        if needs_ckpt:
            p.add_argument("--checkpoint", default=None, help="checkpoint directory")
        p.add_argument("--force", action="store_true", help="overwrite non-empty outputs")
        return p

    add("generate", "write train/val/test synthetic datasets", needs_data=False)
    add("train", "train a denoiser through the fixed point")
    add("reconstruct", "reconstruct a dataset split", needs_ckpt=True)
    add("verify", "run the theory verification report", needs_ckpt=True)
    add("sweep", "PSNR vs perturbation-level sweep", needs_ckpt=True)

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out_dir = args.out or cfg["output_dir"]
        dataset_dir = getattr(args, "dataset", None) or out_dir

        if args.command == "generate":
            return cmd_generate(cfg, out_dir, force=args.force)
        if args.command == "train":
            return cmd_train(cfg, dataset_dir, out_dir)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, dataset_dir, out_dir, checkpoint=args.checkpoint)
        if args.command == "verify":
            if args.checkpoint is None:
                print("error: --checkpoint is required for verify", file=sys.stderr)
                return 2
            return cmd_verify(cfg, dataset_dir, out_dir, checkpoint=args.checkpoint)
        if args.command == "sweep":
            return cmd_sweep(cfg, dataset_dir, out_dir, checkpoint=args.checkpoint)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
