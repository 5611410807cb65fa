"""Command-line surface: data generation, training, sampling, OOD, eval, plots.

Every command is deterministic given its flags and seeds, writes files
atomically, and uses exit codes 0 (success), 1 (runtime failure) and
2 (usage or validation error).
"""

from __future__ import annotations

import argparse
import sys
from types import SimpleNamespace

import numpy as np

from . import gmm as gmm_mod
from . import inference, svg
from .model import FNODEModel, TrainConfig, TrainingDiverged, fit
from .nets import encode_gamma, encode_z0
from .odeint import IntegrationBlowUp
from .serialize import ArchiveError, load_archive, save_archive, write_text_atomic
from .syndata import (
    DatasetFormatError,
    fmt_float,
    generate_set_a,
    generate_set_b,
    load_dataset,
    save_dataset,
)

__all__ = ["main", "RunConfig", "band_to_csv"]


class ValidationError(ValueError):
    """Bad flags or config: maps to exit code 2."""


# -- run configuration -------------------------------------------------------------

# key -> (parser, default). "auto" obs_scale means RMS of the training values.
_CONFIG_KEYS = {
    "p": (int, 8),
    "d_gamma": (int, 16),
    "f_hidden": ("intlist", (100, 100)),
    "enc_hidden": ("intlist", (64, 64)),
    "dec_hidden": ("intlist", (64, 64)),
    "hyper_hidden": ("intlist", (128, 128)),
    "step_size": (float, 0.1),
    "sigma_x": (float, 0.05),
    "lambda_init": (float, 0.1),
    "obs_scale": ("scale", "auto"),
    "epochs": (int, 200),
    "batch_size": (int, 32),
    "learning_rate": (float, 1e-3),
    "kl_anneal_epochs": (int, 50),
    "mc_samples": (int, 1),
    "seed": (int, 0),
    "n_gamma": (int, 5),
    "gmm_components": ("range", tuple(range(1, 21))),
    "gmm_cov_types": ("covlist", gmm_mod.COV_TYPES),
    "gmm_max_iter": (int, 200),
}


def _parse_value(key: str, raw: str):
    kind = _CONFIG_KEYS[key][0]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "intlist":
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
        if kind == "scale":
            return "auto" if raw.strip() == "auto" else float(raw)
        if kind == "covlist":
            types = tuple(tok.strip() for tok in raw.split(",") if tok.strip())
            bad = [t for t in types if t not in gmm_mod.COV_TYPES]
            if bad:
                raise ValueError(f"unknown covariance types {bad}")
            return types
        if kind == "range":
            if ":" in raw:
                parts = [int(tok) for tok in raw.split(":")]
                lo, hi = parts[0], parts[1]
                step = parts[2] if len(parts) > 2 else 1
                return tuple(range(lo, hi + 1, step))
            return tuple(int(tok) for tok in raw.split(",") if tok.strip())
    except ValueError as e:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r} ({e})") from e
    raise AssertionError(kind)


class RunConfig:
    """Plain-text key=value configuration; unknown keys are rejected."""

    def __init__(self, overrides: dict | None = None):
        self.values = {k: default for k, (_, default) in _CONFIG_KEYS.items()}
        if overrides:
            self.values.update(overrides)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        overrides = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise ValidationError(f"{path}:{line_no}: expected key=value")
                key, raw = (part.strip() for part in stripped.split("=", 1))
                if key not in _CONFIG_KEYS:
                    raise ValidationError(f"{path}:{line_no}: unknown key {key!r}")
                overrides[key] = _parse_value(key, raw)
        return cls(overrides)

    def __getitem__(self, key: str):
        return self.values[key]


# -- small shared helpers -------------------------------------------------------------


def _load_model(path):
    try:
        return load_archive(path)
    except ArchiveError as e:
        raise ValidationError(str(e)) from e


def _load_data(path):
    try:
        return load_dataset(path)
    except DatasetFormatError as e:
        raise ValidationError(str(e)) from e


def _traj_by_index(data, index: int):
    if not 0 <= index < len(data.trajectories):
        raise ValidationError(f"trajectory index {index} out of range (N={len(data.trajectories)})")
    return data.trajectories[index]


def _csv(rows: list[list], header: list[str]) -> str:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(fmt_float(c) if isinstance(c, float) else str(c) for c in r))
    return "\n".join(lines) + "\n"


def band_to_csv(band: inference.CredibleBand) -> str:
    """Band CSV: time then (lower_d, mean_d, upper_d) triplets per dimension."""
    obs_dim = band.mean.shape[1]
    header = ["time"]
    for d in range(1, obs_dim + 1):
        header += [f"lower_{d}", f"mean_{d}", f"upper_{d}"]
    rows = []
    for i, t in enumerate(band.times):
        row: list = [float(t)]
        for d in range(obs_dim):
            row += [float(band.lower[i, d]), float(band.mean[i, d]), float(band.upper[i, d])]
        rows.append(row)
    return _csv(rows, header)


def _trajs_to_csv(paths: list[np.ndarray], times: np.ndarray, obs_dim: int) -> str:
    header = ["sample_id", "time"] + [f"value_{d}" for d in range(1, obs_dim + 1)]
    rows = []
    for sid, path in enumerate(paths):
        for i, t in enumerate(times):
            rows.append([sid, float(t)] + [float(v) for v in np.atleast_1d(path[i])])
    return _csv(rows, header)


# -- commands ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    if args.n_per_class < 1 or args.n_classes < 1 or args.n_points < 1:
        raise ValidationError("counts must be positive")
    gen = generate_set_a if args.set == "a" else generate_set_b
    data = gen(
        n_per_class=args.n_per_class,
        n_classes=args.n_classes,
        n_points=args.n_points,
        t_max=args.t_max,
        seed=args.seed,
        noise=args.noise,
    )
    save_dataset(data, args.out)
    print(
        f"wrote {args.out}: N={len(data)} trajectories, "
        f"{args.n_classes} classes, obs_dim={data.obs_dim}"
    )
    return 0


def _history_csv_row(epoch: int, bd) -> list:
    return [epoch, bd.total, bd.recon_loglik, bd.kl_z0, bd.kl_gamma, bd.kl_weight]


def cmd_train(args) -> int:
    data = _load_data(args.data)
    cfg_file = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg_file.values["seed"] = args.seed  # flag wins over config file

    values = np.concatenate([t.values.reshape(-1) for t in data.trajectories])
    obs_scale = (
        float(np.sqrt(np.mean(values**2))) if cfg_file["obs_scale"] == "auto" else cfg_file["obs_scale"]
    )
    if obs_scale <= 0:
        obs_scale = 1.0

    n_points = len(data.trajectories[0])
    if any(len(t) != n_points for t in data.trajectories):
        raise ValidationError("all trajectories must have the same number of points")

    m = FNODEModel.build(
        obs_dim=data.obs_dim,
        n_points=n_points,
        p=cfg_file["p"],
        d_gamma=cfg_file["d_gamma"],
        f_hidden=cfg_file["f_hidden"],
        enc_hidden=cfg_file["enc_hidden"],
        dec_hidden=cfg_file["dec_hidden"],
        hyper_hidden=cfg_file["hyper_hidden"],
        step_size=cfg_file["step_size"],
        sigma_x=cfg_file["sigma_x"],
        obs_scale=obs_scale,
        lambda_init=cfg_file["lambda_init"],
        seed=cfg_file["seed"],
    )
    tcfg = TrainConfig(
        epochs=cfg_file["epochs"],
        batch_size=cfg_file["batch_size"],
        learning_rate=cfg_file["learning_rate"],
        kl_anneal_epochs=min(cfg_file["kl_anneal_epochs"], max(cfg_file["epochs"], 1)),
        seed=cfg_file["seed"],
        mc_samples=cfg_file["mc_samples"],
    )

    log_path = args.log or (str(args.out) + ".log.csv")
    log_rows: list[list] = []

    def on_epoch(epoch, bd):
        log_rows.append(_history_csv_row(epoch, bd))

    history = []
    try:
        _, history = fit(m, data, tcfg, on_epoch=on_epoch)
    except TrainingDiverged as e:
        write_text_atomic(
            log_path, _csv(log_rows, ["epoch", "elbo", "recon", "kl_z0", "kl_gamma", "kl_weight"])
        )
        print(f"error: {e} (partial log at {log_path})", file=sys.stderr)
        return 1
    write_text_atomic(
        log_path, _csv(log_rows, ["epoch", "elbo", "recon", "kl_z0", "kl_gamma", "kl_weight"])
    )

    S = None
    if tcfg.epochs > 0 or args.gmm_only:
        bank = gmm_mod.collect_gamma_samples(m, data, cfg_file["n_gamma"], seed=cfg_file["seed"] + 1)
        S, table = gmm_mod.select_model(
            bank,
            cfg_file["gmm_components"],
            cfg_file["gmm_cov_types"],
            seed=cfg_file["seed"] + 2,
            max_iter=cfg_file["gmm_max_iter"],
        )
        write_text_atomic(str(args.out) + ".gmm.csv", gmm_mod.selection_table_csv(table))

    save_archive(args.out, m, S, history, seeds={"train": tcfg.seed})
    if history:
        print(
            f"trained {tcfg.epochs} epochs: elbo {history[0].total:.4f} -> {history[-1].total:.4f}"
        )
    if S is not None:
        print(f"sampler: K={S.n_components} cov_type={S.cov_type}")
    print(f"wrote {args.out}")
    return 0


def cmd_sample(args) -> int:
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    m, S, _ = _load_model(args.model)
    data = _load_data(args.data)
    source = _traj_by_index(data, args.index)

    if args.grid_points:
        times = np.linspace(source.times[0], source.times[-1], args.grid_points)
    else:
        times = source.times

    if args.mode == "gmm":
        if S is None:
            raise ValidationError("archive holds no fitted sampler; train with epochs > 0")
        paths = inference.sample_trajectories(m, S, source, times, args.n, seed=args.seed)
    elif args.mode == "prior":
        rng = np.random.default_rng(args.seed)
        q_z0 = encode_z0(m.enc_z0, source, m.obs_scale)
        anchor = float(source.times[0])
        paths = []
        for _ in range(args.n):
            gamma = rng.standard_normal(m.d_gamma)
            paths.append(inference.rollout(m, q_z0.mean.data, gamma, anchor, times))
    elif args.mode == "transfer":
        if args.exemplar is None:
            raise ValidationError("--mode transfer needs --exemplar")
        exemplar = _traj_by_index(data, args.exemplar)
        paths = [inference.transfer_trajectory(m, source, exemplar, times)]
    else:  # neighborhood
        if args.exemplar is None or args.delta is None:
            raise ValidationError("--mode neighborhood needs --exemplar and --delta")
        if args.delta <= 0:
            raise ValidationError("--delta must be positive")
        if S is None:
            raise ValidationError("archive holds no fitted sampler; train with epochs > 0")
        exemplar = _traj_by_index(data, args.exemplar)
        _, paths = inference.neighborhood_sample(
            m, S, exemplar, args.delta, args.n, max_attempts=args.max_attempts, seed=args.seed, times=times
        )

    write_text_atomic(args.out, _trajs_to_csv(paths, times, m.obs_dim))
    print(f"wrote {args.out}: {len(paths)} trajectories over {times.size} times")
    return 0


def cmd_ood(args) -> int:
    if not 0.0 < args.quantile <= 1.0:
        raise ValidationError("--quantile must lie in (0, 1]")
    m, S, _ = _load_model(args.model)
    if S is None:
        raise ValidationError("archive holds no fitted sampler; train with epochs > 0")
    train_data = _load_data(args.train_data)
    test_data = _load_data(args.test_data)

    threshold = inference.ood_calibrate(m, S, train_data, args.n_gamma, args.quantile, args.seed)
    reports = inference.ood_test(m, S, threshold, test_data, args.n_gamma, args.seed)

    rows = [
        [r.index, "" if r.label is None else r.label, r.nll, r.threshold, int(r.flagged)]
        for r in reports
    ]
    write_text_atomic(args.out, _csv(rows, ["index", "label", "nll", "threshold", "flagged"]))

    flagged = np.array([r.flagged for r in reports])
    print(f"threshold={threshold:.6g} flag_rate={flagged.mean():.4f} ({flagged.sum()}/{len(reports)})")
    props = inference.class_flag_proportions(reports)
    for lab, prop in props.items():
        print(f"class {lab}: {prop:.4f}")
    return 0


def _encode_partial_means(m: FNODEModel, traj, mask: np.ndarray):
    """Posterior means conditioned on a prefix; padding repeats the last point."""
    times = traj.times[mask]
    values = traj.values[mask]
    pad = m.n_points - times.size
    if pad > 0:
        times = np.concatenate([times, np.repeat(times[-1], pad)])
        values = np.concatenate([values, np.repeat(values[-1:], pad, axis=0)])
    shim = SimpleNamespace(times=times, values=values)
    q_z0 = encode_z0(m.enc_z0, shim, m.obs_scale)
    q_gamma = encode_gamma(m.enc_gamma, shim, m.obs_scale)
    return q_z0, q_gamma


EVAL_HORIZONS = (0.10, 0.20, 0.50, 1.00)


def cmd_eval(args) -> int:
    if not 0.0 < args.observe_fraction <= 1.0:
        raise ValidationError("--observe-fraction must lie in (0, 1]")
    if args.samples < 1:
        raise ValidationError("--samples must be >= 1")
    m, _, _ = _load_model(args.model)
    data = _load_data(args.data)

    header = ["index", "label", "n_observed", "interp_mse"] + [
        f"extrap_{int(100 * h)}" for h in EVAL_HORIZONS
    ]
    rows = []
    sums = np.zeros(1 + len(EVAL_HORIZONS))
    counts = np.zeros(1 + len(EVAL_HORIZONS))
    for j, traj in enumerate(data.trajectories):
        t0, t_end = traj.times[0], traj.times[-1]
        cut = t0 + args.observe_fraction * (t_end - t0)
        mask = traj.times <= cut + 1e-12
        if not mask.any():
            mask[0] = True
        q_z0, q_gamma = _encode_partial_means(m, traj, mask)

        rng = np.random.default_rng(args.seed ^ j)
        sq_sum = np.zeros_like(traj.values)
        for _ in range(args.samples):
            if args.samples == 1:
                z0, gamma = q_z0.mean.data, q_gamma.mean.data
            else:
                z0 = q_z0.mean.data + np.exp(0.5 * q_z0.log_var.data) * rng.standard_normal(m.p)
                gamma = q_gamma.mean.data + np.exp(
                    0.5 * q_gamma.log_var.data
                ) * rng.standard_normal(m.d_gamma)
            recon = inference.rollout(m, z0, gamma, float(traj.times[mask][0]), traj.times)
            sq_sum += (recon - traj.values) ** 2
        sq = sq_sum / args.samples

        interp = float(sq[mask].mean())
        row: list = [j, "" if traj.label is None else traj.label, int(mask.sum()), interp]
        sums[0] += interp
        counts[0] += 1
        window = cut - t0
        for hi, h in enumerate(EVAL_HORIZONS):
            hmask = (traj.times > cut + 1e-12) & (traj.times <= cut + h * window + 1e-12)
            if hmask.any():
                v = float(sq[hmask].mean())
                row.append(v)
                sums[1 + hi] += v
                counts[1 + hi] += 1
            else:
                row.append("")
        rows.append(row)

    mean_row: list = ["mean", "", ""]
    for i in range(1 + len(EVAL_HORIZONS)):
        mean_row.append(float(sums[i] / counts[i]) if counts[i] else "")
    rows.append(mean_row)
    write_text_atomic(args.out, _csv(rows, header))
    print(f"wrote {args.out}: interpolation MSE {mean_row[3]}")
    return 0


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ValidationError(f"{path}: need a header and at least one row")
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def cmd_plot(args) -> int:
    header, rows = _read_csv(args.traj)
    if header[:2] != ["sample_id", "time"] or len(header) < 3:
        raise ValidationError(f"{args.traj}: expected sample_id,time,value_... columns")
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        series.setdefault(r[0], []).append((float(r[1]), float(r[2])))
    series_list = []
    for sid in sorted(series, key=lambda s: int(s)):
        pts = series[sid]
        series_list.append(
            (f"sample {sid}", np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
        )

    band = None
    if args.band:
        bheader, brows = _read_csv(args.band)
        if bheader[:4] != ["time", "lower_1", "mean_1", "upper_1"]:
            raise ValidationError(f"{args.band}: expected time,lower_1,mean_1,upper_1 columns")
        bt = np.array([float(r[0]) for r in brows])
        bl = np.array([float(r[1]) for r in brows])
        bm = np.array([float(r[2]) for r in brows])
        bu = np.array([float(r[3]) for r in brows])
        if np.any(bl > bu):
            raise ValidationError(f"{args.band}: lower exceeds upper")
        band = (bt, bl, bm, bu)

    write_text_atomic(args.out, svg.render_line_plot(series_list, band=band, title=args.title))
    print(f"wrote {args.out}")
    return 0


# -- argument parsing ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fnode", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic panel dataset")
    g.add_argument("--set", choices=("a", "b"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-per-class", type=int, default=100)
    g.add_argument("--n-classes", type=int, default=10)
    g.add_argument("--n-points", type=int, default=10)
    g.add_argument("--t-max", type=float, default=1.5)
    g.add_argument("--noise", choices=("per_trajectory", "per_point", "none"), default="per_trajectory")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="fit the model and its ex-post sampler")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="key=value file; defaults used if omitted")
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None, help="per-epoch CSV (default: <out>.log.csv)")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.add_argument("--gmm-only", action="store_true", help="fit the sampler even with epochs=0")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate trajectories from a trained archive")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--index", type=int, default=0, help="trajectory supplying the initial state")
    s.add_argument("--mode", choices=("gmm", "prior", "transfer", "neighborhood"), default="gmm")
    s.add_argument("--exemplar", type=int, default=None)
    s.add_argument("--delta", type=float, default=None)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--max-attempts", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid-points", type=int, default=None, help="uniform grid instead of source times")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    o = sub.add_parser("ood", help="likelihood-threshold outlier test")
    o.add_argument("--model", required=True)
    o.add_argument("--train-data", required=True)
    o.add_argument("--test-data", required=True)
    o.add_argument("--quantile", type=float, default=0.95)
    o.add_argument("--n-gamma", type=int, default=16)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_ood)

    e = sub.add_parser("eval", help="interpolation/extrapolation MSE table")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--observe-fraction", type=float, default=0.5)
    e.add_argument("--samples", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render a trajectories CSV (and optional band) as SVG")
    p.add_argument("--traj", required=True)
    p.add_argument("--band", default=None)
    p.add_argument("--title", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return ap


def main(argv=None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, DatasetFormatError, ArchiveError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (
        TrainingDiverged,
        IntegrationBlowUp,
        inference.ZeroAcceptance,
        RuntimeError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
