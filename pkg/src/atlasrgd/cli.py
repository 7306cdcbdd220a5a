"""Command-line entry point.

Subcommands: gen (datasets), train (atlas fitting), sample (generation),
eval (atlas metrics), reconstruct (manifold-constrained descent).  One
experiment lives in one output directory: config copy, checkpoint, logs,
artifacts.  Exit codes: 0 success, 1 usage error, 2 numerical failure,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io as aio
from . import problems as pr
from .mixture import (MixtureAtlas, TrainConfig, build_atlas, load_atlas,
                      save_atlas, train)
from .riemann import SingularFrameError, descent_loop
from .rng import stream

# default chart counts per dataset kind
K_TABLE = {"two_circles": 4, "ring": 2, "sphere": 2, "swiss_roll": 4,
           "torus": 6, "bars": 2}

# the flat config schema: every known key with its type and default.
# None defaults mean "required by the command that uses it" or "derived".
CONFIG_SCHEMA = {
    "kind": (str, "two_circles"),       # dataset / experiment kind
    "N": (int, 2000),                   # dataset size
    "side": (int, 32),                  # image side length (bars)
    "noise": (float, pr.TOY_NOISE),     # toy sampling noise
    "K": (int, None),                   # charts; default from K_TABLE
    "d": (int, 1),                      # latent dimension
    "sigma_x": (float, None),           # default 0.05 toy / 0.1 image
    "sigma_z": (float, 0.01),
    "epochs_reg": (int, 50),
    "epochs_plain": (int, 150),
    "epochs_overlap": (int, 50),
    "batch_size": (int, 64),
    "lr": (float, 1e-3),
    "lam": (float, 10.0),
    "reg_sigma": (float, 0.05),
    "c": (float, 1.25),
    "seed": (int, 0),
    "dataset": (str, None),             # path to training data
    "checkpoint": (str, None),          # path to an atlas checkpoint
    "bundle": (str, None),              # observation bundle directory
    "m": (int, 1000),                   # sample count
    "objective": (str, None),           # toy objective kind for reconstruct
    "tau0": (float, 0.01),
    "iters": (int, 500),
    "retraction": (str, "coords"),
    "adaptive": (bool, True),
    "keep_iterates": (bool, False),
    "nsamples_eval": (int, 8),
    "checkpoint_every": (int, 25),      # epochs between checkpoint writes
    "resume": (bool, False),
    "out": (str, "run"),
}


class UsageError(ValueError):
    pass


def parse_config(pairs: dict) -> dict:
    """Validate a flat key->value mapping against the schema."""
    cfg = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
    for key, raw in pairs.items():
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"unknown config key: {key}")
        typ, _ = CONFIG_SCHEMA[key]
        if raw is None:
            cfg[key] = None
        elif typ is bool and isinstance(raw, str):
            if raw.lower() in ("1", "true", "yes"):
                cfg[key] = True
            elif raw.lower() in ("0", "false", "no"):
                cfg[key] = False
            else:
                raise UsageError(f"bad boolean for {key}: {raw}")
        else:
            try:
                cfg[key] = typ(raw)
            except (TypeError, ValueError):
                raise UsageError(f"bad value for {key}: {raw!r}")
    return cfg


def serialize_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True)


def load_config_file(path) -> dict:
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise UsageError("config file must hold a flat JSON object")
    return data


def _effective_config(args) -> dict:
    pairs = {}
    if args.config:
        pairs.update(load_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        pairs[key] = val
    if args.seed is not None:
        pairs["seed"] = args.seed
    if args.out is not None:
        pairs["out"] = args.out
    return parse_config(pairs)


def _prep_outdir(cfg) -> str:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        f.write(serialize_config(cfg))
    return out


def _sigma_x(cfg):
    if cfg["sigma_x"] is not None:
        return cfg["sigma_x"]
    return 0.1 if cfg["kind"] == "bars" else 0.05


def _chart_count(cfg):
    if cfg["K"] is not None:
        return cfg["K"]
    if cfg["kind"] not in K_TABLE:
        raise UsageError(f"no default chart count for kind {cfg['kind']}; "
                         "set K explicitly")
    return K_TABLE[cfg["kind"]]


# -- subcommands ----------------------------------------------------------------

def cmd_gen(cfg) -> int:
    out = _prep_outdir(cfg)
    rng = stream(cfg["seed"], "gen", cfg["kind"])
    if cfg["kind"] == "bars":
        spec = pr.BarImageSpec(side=cfg["side"])
        X, angles = pr.sample_bars(spec, cfg["N"], rng, return_angles=True)
        aio.write_raw(os.path.join(out, "dataset.raw"), X)
        aio.write_csv(os.path.join(out, "angles.csv"),
                      [[a] for a in angles], header=["angle"])
        for i in range(min(8, cfg["N"])):
            aio.write_pgm(os.path.join(out, f"preview{i}.pgm"),
                          X[i].reshape(spec.side, spec.side))
    else:
        spec = pr.ToyManifoldSpec(cfg["kind"], n_samples=cfg["N"],
                                  noise=cfg["noise"])
        X = pr.sample_toy(spec, rng)
        aio.write_points(os.path.join(out, "dataset.csv"), X)
        aio.write_ppm(os.path.join(out, "dataset.ppm"), aio.scatter_image(X))
    print(f"wrote {cfg['N']} samples of {cfg['kind']} to {out}")
    return 0


def _load_dataset(cfg):
    path = cfg["dataset"]
    if path is None:
        raise UsageError("dataset path required (config key 'dataset')")
    if path.endswith(".raw"):
        return aio.read_raw(path)
    return aio.read_points(path)


def cmd_train(cfg) -> int:
    out = _prep_outdir(cfg)
    X = _load_dataset(cfg)
    K = _chart_count(cfg)
    ckpt_path = os.path.join(out, "atlas.ckpt")
    tc = TrainConfig(epochs_reg=cfg["epochs_reg"],
                     epochs_plain=cfg["epochs_plain"],
                     epochs_overlap=cfg["epochs_overlap"],
                     batch_size=cfg["batch_size"], lr=cfg["lr"],
                     lam=cfg["lam"], reg_sigma=cfg["reg_sigma"], c=cfg["c"],
                     seed=cfg["seed"], nsamples_eval=cfg["nsamples_eval"])
    start_epoch, gamma = 0, None
    if cfg["resume"] and os.path.exists(ckpt_path):
        atlas = load_atlas(ckpt_path)
        start_epoch = int(atlas.meta.get("completed_epochs", 0))
        gpath = os.path.join(out, "gamma.raw")
        if os.path.exists(gpath):
            gamma = aio.read_raw(gpath)
        print(f"resuming after epoch {start_epoch}")
    else:
        if cfg["kind"] == "bars":
            atlas = build_atlas("image", K, cfg["d"], seed=cfg["seed"],
                                sigma_x=_sigma_x(cfg),
                                sigma_z=cfg["sigma_z"], side=cfg["side"])
        else:
            atlas = build_atlas("toy", K, cfg["d"], seed=cfg["seed"],
                                sigma_x=_sigma_x(cfg),
                                sigma_z=cfg["sigma_z"], n=X.shape[1])

    log_path = os.path.join(out, "loss_log.csv")
    header = ["epoch", "stage", "loss"] + [f"beta_mass_{k}"
                                           for k in range(atlas.K)]
    mode = "a" if start_epoch > 0 and os.path.exists(log_path) else "w"
    logf = open(log_path, mode, newline="")
    if mode == "w":
        logf.write(",".join(header) + "\n")

    def progress(row):
        cells = [row["epoch"], row["stage"], f"{row['loss']:.6f}"]
        cells += [f"{row[f'beta_mass_{k}']:.6f}" for k in range(atlas.K)]
        logf.write(",".join(str(c) for c in cells) + "\n")
        logf.flush()
        print(f"epoch {row['epoch']:4d} [{row['stage']}] "
              f"loss {row['loss']:.4f}")

    def epoch_hook(epoch, stage, gam):
        if epoch % cfg["checkpoint_every"] == 0:
            save_atlas(ckpt_path, atlas, {"completed_epochs": epoch})
            if gam is not None:
                aio.write_raw(os.path.join(out, "gamma.raw"), gam)

    try:
        train(X, tc, atlas, start_epoch=start_epoch, progress=progress,
              gamma=gamma, epoch_hook=epoch_hook)
    finally:
        logf.close()
    total = tc.epochs_reg + tc.epochs_plain + tc.epochs_overlap
    save_atlas(ckpt_path, atlas, {"completed_epochs": total})
    print(f"checkpoint written to {ckpt_path}")
    return 0


def cmd_sample(cfg) -> int:
    out = _prep_outdir(cfg)
    atlas = _load_atlas(cfg)
    rng = stream(cfg["seed"], "sample")
    if cfg["m"] > 0:
        X, labels = atlas.sample(cfg["m"], rng)
    else:
        X = np.zeros((0, atlas.n))
        labels = np.zeros(0, dtype=int)
    rows = np.concatenate([(labels + 1)[:, None], X], axis=1)
    aio.write_csv(os.path.join(out, "samples.csv"), rows,
                  header=["chart"] + [f"x{i}" for i in range(atlas.n)])
    if 2 <= atlas.n <= 3:
        aio.write_ppm(os.path.join(out, "samples.ppm"),
                      aio.scatter_image(X, labels))
    if atlas.meta.get("kind") == "image":
        side = atlas.meta["side"]
        for i in range(min(8, cfg["m"])):
            aio.write_pgm(os.path.join(out, f"sample{i}.pgm"),
                          X[i].reshape(side, side))
    print(f"wrote {cfg['m']} samples to {out}")
    return 0


def _load_atlas(cfg) -> MixtureAtlas:
    if cfg["checkpoint"] is None:
        raise UsageError("checkpoint path required (config key 'checkpoint')")
    return load_atlas(cfg["checkpoint"])


def cmd_eval(cfg) -> int:
    out = _prep_outdir(cfg)
    atlas = _load_atlas(cfg)
    X = _load_dataset(cfg)
    beta = atlas.responsibilities(X, nsamples=cfg["nsamples_eval"],
                                  seed=cfg["seed"])
    proj = np.stack([atlas.charts[k].project(X) for k in range(atlas.K)])
    dists = np.linalg.norm(proj - X[None], axis=2)  # (K, N)
    best = dists[beta.argmax(axis=1), np.arange(X.shape[0])]
    report = {
        "n_points": int(X.shape[0]),
        "mean_projection_distance": float(best.mean()),
        "max_responsibility_mean": float(beta.max(axis=1).mean()),
        "alpha": [float(a) for a in atlas.alpha],
        "responsibility_mass": [float(m) for m in beta.mean(axis=0)],
    }
    rng = stream(cfg["seed"], "eval-coverage")
    S, _ = atlas.sample(10_000, rng)
    if cfg["kind"] == "two_circles":
        report["coverage"] = _two_circle_coverage(S)
    elif atlas.n == 2:
        ang = np.arctan2(S[:, 1], S[:, 0])
        hit = np.histogram(ang, bins=72, range=(-np.pi, np.pi))[0] > 0
        report["coverage"] = float(hit.mean())
    hist = np.round(beta, 6)
    aio.write_csv(os.path.join(out, "responsibilities.csv"), hist,
                  header=[f"beta_{k}" for k in range(atlas.K)])
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def _two_circle_coverage(S, bins=72, tol=0.1):
    cov = {}
    for name, cx in (("right", 1.5), ("left", -1.5)):
        rel = S - np.array([cx, 0.0])
        r = np.linalg.norm(rel, axis=1)
        on = np.abs(r - 1.0) < tol
        ang = np.arctan2(rel[on, 1], rel[on, 0])
        hit = np.histogram(ang, bins=bins, range=(-np.pi, np.pi))[0] > 0
        cov[name] = float(hit.mean())
    return cov


def cmd_reconstruct(cfg) -> int:
    out = _prep_outdir(cfg)
    atlas = _load_atlas(cfg)
    rng = stream(cfg["seed"], "reconstruct")

    if cfg["bundle"] is not None:
        y, op_cfg, gt = aio.read_bundle(cfg["bundle"])
        op = pr.BlurOperator(side=int(op_cfg["side"]),
                             kernel_size=int(op_cfg.get("kernel_size", 30)),
                             kernel_std=float(op_cfg.get("kernel_std", 15.0)),
                             pad_value=float(op_cfg.get("pad_value", 0.5)))
        F, gradF = op.objective(y)
        x0, _ = atlas.sample(1, rng)
        x0 = x0[0]
    elif cfg["objective"] is not None:
        F, gradF, inits = pr.toy_objective(cfg["objective"])
        gt = None
        if inits is None:
            raise UsageError(
                f"objective {cfg['objective']} has no canned initial points; "
                "use a bundle")
        x0 = inits[cfg["seed"] % len(inits)]
    else:
        raise UsageError("reconstruct needs 'bundle' or 'objective'")

    state = descent_loop(atlas, F, gradF, x0, cfg["tau0"], cfg["iters"],
                         retraction=cfg["retraction"],
                         adaptive=cfg["adaptive"], seed=cfg["seed"],
                         nsamples=cfg["nsamples_eval"],
                         keep_iterates=cfg["keep_iterates"])
    header = ["iteration", "tau", "f"]
    if cfg["keep_iterates"]:
        header += [f"x{i}" for i in range(atlas.n)]
    rows = []
    for r in state.trajectory:
        row = [r["iteration"], r["tau"], r["f"]]
        if cfg["keep_iterates"]:
            row += list(r.get("x", state.x))
        rows.append(row)
    aio.write_csv(os.path.join(out, "trajectory.csv"), rows, header=header)
    aio.write_raw(os.path.join(out, "reconstruction.raw"), state.x)
    result = {"status": state.status, "final_f": state.f,
              "iterations": state.iteration}
    if gt is not None:
        gt_flat = np.asarray(gt).reshape(-1)
        result["mse"] = float(np.mean((state.x - gt_flat) ** 2))
        result["psnr"] = pr.psnr(state.x, gt_flat)
    if atlas.meta.get("kind") == "image":
        side = atlas.meta["side"]
        aio.write_pgm(os.path.join(out, "reconstruction.pgm"),
                      state.x.reshape(side, side))
    with open(os.path.join(out, "result.json"), "w") as f:
        json.dump(result, f, indent=1, sort_keys=True)
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


# -- argument parsing -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="atlasrgd",
                description="Manifold atlases of invertible VAE charts and "
                            "Riemannian descent on them.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="experiment directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "reconstruct": cmd_reconstruct}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _effective_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (FloatingPointError, SingularFrameError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
