"""Command-line surface: phantoms, preprocess, train, eval, ablate, report.

Exit codes: 0 success, 2 usage/configuration, 3 numerical failure,
4 I/O or format error. Every command is deterministic given its flags
and seed; outputs land only in the declared out directory.
"""

import os
import sys

# honor the thread cap before numpy (and its BLAS) can load
if "SEGFORGE_THREADS" in os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["SEGFORGE_THREADS"])

import argparse
import csv
import hashlib
import time

import numpy as np

from .augment import AugmentPolicy
from .dataset import load_split, read_manifest, write_manifest
from .errors import (
    ConfigError,
    DegenerateStatistics,
    FormatError,
    InputError,
    TrainingDivergence,
)
from .metrics import Mask, case_row, paired_t_test
from .network import (
    SegModel,
    VARIANTS,
    config_to_items,
    load_checkpoint,
    save_checkpoint,
    variant_config,
)
from .phantoms import PhantomSpec, generate_phantoms
from .preprocess import preprocess_label, preprocess_volume
from .report import curve_figure, summary_markdown
from .training import CurveLog, TrainConfig, fit
from .volume import Volume, load_volume, save_volume

METRIC_NAMES = ("dice", "voe", "rvd", "asd", "msd")
CSV_METRIC_COLUMNS = ("dice", "voe", "rvd", "asd_mm", "msd_mm")
UNDEFINED = "undef"


def _fail(code, message):
    print(f"segforge: error: {message}", file=sys.stderr)
    return code


def _hash_inputs(manifest_path):
    """Content hash over the manifest and every file it references."""
    h = hashlib.sha256()
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, "rb") as f:
        h.update(f.read())
    for image_path, label_path, _ in read_manifest(manifest_path):
        for rel in (image_path, label_path):
            with open(os.path.join(base, rel), "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def _write_run_manifest(out_dir, entries):
    lines = [f"{k}={v}" for k, v in entries]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_kv_config(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {line!r} in {path}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


# --- phantoms ----------------------------------------------------------------

def cmd_phantoms(args):
    spec = PhantomSpec(
        size=args.size,
        count=args.count + args.val_count,
        noise_sigma=args.noise_sigma,
        blur_sigma=args.blur_sigma,
        frac_small=args.frac_small,
        frac_disconnected=args.frac_disconnected,
        frac_blurred=args.frac_blurred,
        seed=args.seed,
    )
    cases = generate_phantoms(spec)
    out = args.out
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    os.makedirs(os.path.join(out, "labels"), exist_ok=True)
    rows = []
    for i, case in enumerate(cases):
        name = f"case_{i:04d}.svol"
        save_volume(Volume(case.image[:, :, None], domain="unit"), os.path.join(out, "images", name))
        save_volume(
            Volume(case.mask.astype(np.float32)[:, :, None], domain="label"),
            os.path.join(out, "labels", name),
        )
        split = "train" if i < args.count else "val"
        rows.append((f"images/{name}", f"labels/{name}", split))
    write_manifest(os.path.join(out, "manifest.csv"), rows)
    print(f"wrote {len(cases)} phantoms ({args.count} train / {args.val_count} val) to {out}")
    return 0


# --- preprocess ----------------------------------------------------------------

def cmd_preprocess(args):
    rows = read_manifest(args.manifest)
    if not rows:
        raise ConfigError(f"manifest {args.manifest} is empty")
    base = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "labels"), exist_ok=True)
    out_rows = []
    failures = 0
    for image_path, label_path, split in rows:
        try:
            img = load_volume(os.path.join(base, image_path))
            lab = load_volume(os.path.join(base, label_path))
            img = preprocess_volume(img, args.window_lo, args.window_hi, args.target_dz)
            lab = preprocess_label(lab, args.target_dz)
            name = os.path.basename(image_path)
            save_volume(img, os.path.join(args.out, "images", name))
            save_volume(lab, os.path.join(args.out, "labels", name))
            out_rows.append((f"images/{name}", f"labels/{name}", split))
        except (FormatError, InputError, OSError) as e:
            failures += 1
            print(f"segforge: preprocess failed for {image_path}: {e}", file=sys.stderr)
    write_manifest(os.path.join(args.out, "manifest.csv"), out_rows)
    print(f"preprocessed {len(out_rows)} volumes, {failures} failed")
    return 4 if failures else 0


# --- train -----------------------------------------------------------------------

def _model_config_from_args(args):
    return variant_config(
        args.variant,
        input_size=args.input_size,
        base_channels=args.base_channels,
        depth=args.depth,
    )


def _train_config_from_args(args, seed=None, checkpoint_every=None):
    return TrainConfig(
        initial_lr=args.lr,
        gamma=args.gamma,
        step_size=args.step_size,
        momentum=args.momentum,
        batch_size=args.batch_size,
        epochs=args.epochs,
        loss=args.loss,
        seed=args.seed if seed is None else seed,
        checkpoint_every=args.checkpoint_every if checkpoint_every is None else checkpoint_every,
    )


def _augment_policy_from_args(args):
    if args.no_augment:
        return None
    grid = max(4, min(32, args.input_size // 2))
    return AugmentPolicy(elastic_grid=grid, elastic_max_disp=args.input_size * 10.0 / 64.0)


def _train_one(model_cfg, train_cfg, data_manifest, out_dir, policy, quiet=False):
    train_set = load_split(data_manifest, "train")
    val_set = load_split(data_manifest, "val")
    sample = train_set.images[0]
    if sample.shape != (model_cfg.input_size, model_cfg.input_size):
        raise ConfigError(
            f"data slices are {sample.shape}, model expects "
            f"{model_cfg.input_size}x{model_cfg.input_size}; set --input-size"
        )
    model = SegModel(model_cfg, seed=train_cfg.seed)
    os.makedirs(out_dir, exist_ok=True)

    def progress(epoch, row):
        if not quiet:
            print(
                f"epoch {epoch}: lr={row[1]:.6f} train_loss={row[2]:.4f} "
                f"val_loss={row[4]:.4f} val_dice={row[6]:.4f}"
            )

    model, log = fit(
        model,
        train_set,
        val_set,
        train_cfg,
        out_dir=os.path.join(out_dir, "checkpoints"),
        policy=policy,
        progress=progress,
    )
    log.to_csv(os.path.join(out_dir, "curves.csv"))
    save_checkpoint(model, os.path.join(out_dir, "checkpoints", "final"), train_cfg.seed, train_cfg.epochs - 1)
    return model, log


def _eval_cases(model, data_manifest, split, threshold=0.5):
    """Per-case metric rows for every volume of a split."""
    base = os.path.dirname(os.path.abspath(data_manifest))
    rows = [r for r in read_manifest(data_manifest) if r[2] == split]
    if not rows:
        raise ConfigError(f"manifest has no rows for split {split!r}")
    results = []
    for image_path, label_path, _ in rows:
        img = load_volume(os.path.join(base, image_path))
        lab = load_volume(os.path.join(base, label_path))
        if img.dims != lab.dims:
            raise InputError(f"image/label dims differ for {image_path}")
        s = model.config.input_size
        if img.dims[0] != s or img.dims[1] != s:
            raise ConfigError(
                f"volume {image_path} is {img.dims[0]}x{img.dims[1]} in-plane, model expects {s}x{s}"
            )
        slices = [img.voxels[:, :, z] for z in range(img.dims[2])]
        pred = np.moveaxis(model.predict_mask(slices, threshold=threshold), 0, 2)
        gt = lab.voxels > 0.5
        case_id = os.path.splitext(os.path.basename(image_path))[0]
        scores = case_row(Mask(pred, lab.spacing), Mask(gt, lab.spacing))
        scores["gt_fraction"] = float(gt.mean())
        results.append((case_id, scores))
    return results


def _metric_matrix(results):
    """metric -> list of defined values, plus paired-aligned arrays with NaN for undef."""
    defined = {m: [v for _, s in results if (v := s[m]) is not None] for m in METRIC_NAMES}
    aligned = {
        m: np.array([s[m] if s[m] is not None else np.nan for _, s in results]) for m in METRIC_NAMES
    }
    return defined, aligned


def _write_metrics_csv(path, results):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("case_id",) + CSV_METRIC_COLUMNS)
        for case_id, scores in results:
            writer.writerow(
                [case_id]
                + [UNDEFINED if scores[m] is None else repr(float(scores[m])) for m in METRIC_NAMES]
            )
        defined, _ = _metric_matrix(results)
        means = [repr(float(np.mean(defined[m]))) if defined[m] else UNDEFINED for m in METRIC_NAMES]
        stds = [
            repr(float(np.std(defined[m], ddof=1))) if len(defined[m]) > 1 else UNDEFINED
            for m in METRIC_NAMES
        ]
        writer.writerow(["mean"] + means)
        writer.writerow(["std"] + stds)


def cmd_train(args):
    model_cfg = _model_config_from_args(args)
    train_cfg = _train_config_from_args(args)
    policy = _augment_policy_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    model, _ = _train_one(model_cfg, train_cfg, args.data, args.out, policy)
    results = _eval_cases(model, args.data, "val")
    _write_metrics_csv(os.path.join(args.out, "metrics.csv"), results)
    entries = [("command", "train"), ("variant", args.variant)]
    entries += [("model." + k, v) for k, v in config_to_items(model.config)]
    entries += [
        ("train.loss", train_cfg.loss),
        ("train.epochs", str(train_cfg.epochs)),
        ("train.batch_size", str(train_cfg.batch_size)),
        ("train.initial_lr", repr(train_cfg.initial_lr)),
        ("train.gamma", repr(train_cfg.gamma)),
        ("train.step_size", str(train_cfg.step_size)),
        ("train.momentum", repr(train_cfg.momentum)),
        ("train.seed", str(train_cfg.seed)),
        ("data.manifest", os.path.abspath(args.data)),
        ("data.hash", _hash_inputs(args.data)),
        ("augment", "off" if policy is None else "on"),
        ("created", started),
        ("outputs", "curves.csv,metrics.csv,checkpoints/"),
    ]
    _write_run_manifest(args.out, entries)
    print(f"run directory ready: {args.out}")
    return 0


# --- eval ------------------------------------------------------------------------

def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    results = _eval_cases(model, args.data, args.split, threshold=args.threshold)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    _write_metrics_csv(args.out, results)
    undefined = sum(1 for _, s in results if any(s[m] is None for m in METRIC_NAMES))
    print(f"evaluated {len(results)} cases ({undefined} with undefined metrics) -> {args.out}")
    return 0


# --- ablate ----------------------------------------------------------------------

ABLATION_ORDER = ("unet", "res", "se-res", "aspp-res", "sar")


def _arm_seed(base_seed, name):
    digest = hashlib.sha256(name.encode()).hexdigest()
    return (base_seed + int(digest[:8], 16)) % (2**31)


def cmd_ablate(args):
    os.makedirs(args.out, exist_ok=True)
    arm_results = {}
    arm_status = {}
    logs = []
    for name in ABLATION_ORDER:
        model_cfg = variant_config(
            name, input_size=args.input_size, base_channels=args.base_channels, depth=args.depth
        )
        seed = _arm_seed(args.seed, name)
        train_cfg = _train_config_from_args(args, seed=seed, checkpoint_every=max(args.epochs, 1))
        arm_dir = os.path.join(args.out, name)
        policy = _augment_policy_from_args(args)
        print(f"[ablate] training arm {name} (seed {seed})")
        try:
            model, log = _train_one(model_cfg, train_cfg, args.data, arm_dir, policy, quiet=True)
            results = _eval_cases(model, args.data, "val")
            _write_metrics_csv(os.path.join(arm_dir, "metrics.csv"), results)
            arm_results[name] = results
            arm_status[name] = "ok"
            logs.append((name, log))
        except TrainingDivergence as e:
            arm_status[name] = f"diverged: {e}"
            print(f"segforge: arm {name} diverged: {e}", file=sys.stderr)
    _write_ablation_report(args.out, arm_results, arm_status, args.alpha)
    if logs:
        with open(os.path.join(args.out, "curves.svg"), "w") as f:
            f.write(curve_figure(logs))
    print(f"ablation report ready: {os.path.join(args.out, 'report.md')}")
    return 0


def _write_ablation_report(out_dir, arm_results, arm_status, alpha):
    reference = "sar"
    stats = {}
    for name, results in arm_results.items():
        defined, aligned = _metric_matrix(results)
        stats[name] = {
            "mean": {m: (float(np.mean(defined[m])) if defined[m] else None) for m in METRIC_NAMES},
            "std": {
                m: (float(np.std(defined[m], ddof=1)) if len(defined[m]) > 1 else 0.0)
                for m in METRIC_NAMES
            },
            "aligned": aligned,
        }
    significance = {}
    for name in arm_results:
        significance[name] = {}
        for metric in ("dice", "asd"):
            if name == reference or reference not in stats:
                significance[name][metric] = (None, False)
                continue
            a = stats[name]["aligned"][metric]
            b = stats[reference]["aligned"][metric]
            ok = ~(np.isnan(a) | np.isnan(b))
            if ok.sum() < 2:
                significance[name][metric] = (None, False)
                continue
            try:
                _, p, sig = paired_t_test(a[ok], b[ok], alpha=alpha)
                significance[name][metric] = (p, sig)
            except DegenerateStatistics:
                significance[name][metric] = (None, False)

    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["variant"]
        for m in CSV_METRIC_COLUMNS:
            header += [f"{m}_mean", f"{m}_std"]
        header += ["dice_p", "asd_p", "dice_sig", "asd_sig", "status"]
        writer.writerow(header)
        for name in ABLATION_ORDER:
            if name not in arm_results:
                writer.writerow([name] + [""] * (2 * len(METRIC_NAMES) + 4) + [arm_status.get(name, "missing")])
                continue
            row = [name]
            for m in METRIC_NAMES:
                mean = stats[name]["mean"][m]
                std = stats[name]["std"][m]
                row += [
                    UNDEFINED if mean is None else repr(float(mean)),
                    UNDEFINED if mean is None else repr(float(std)),
                ]
            for metric in ("dice", "asd"):
                p, _ = significance[name][metric]
                row.append("" if p is None else repr(float(p)))
            for metric in ("dice", "asd"):
                row.append(str(significance[name][metric][1]).lower())
            row.append("ok")
            writer.writerow(row)

    md_path = os.path.join(out_dir, "report.md")
    lines = [
        "# Ablation report",
        "",
        f"Significance stars: paired t-test vs `{reference}` on Dice and ASD, alpha={alpha}.",
        "Dice/VOE/RVD are percent; ASD/MSD are mm.",
        "",
        "| model | Dice (%) | VOE (%) | RVD (%) | ASD (mm) | MSD (mm) |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for name in ABLATION_ORDER:
        if name not in arm_results:
            lines.append(f"| {name} | {arm_status.get(name, 'missing')} | | | | |")
            continue
        cells = []
        for m in METRIC_NAMES:
            mean = stats[name]["mean"][m]
            std = stats[name]["std"][m]
            if mean is None:
                cells.append(UNDEFINED)
                continue
            scale = 100.0 if m in ("dice", "voe", "rvd") else 1.0
            star = ""
            if m in ("dice", "asd") and significance[name][m][1]:
                star = "*"
            cells.append(f"{mean * scale:.2f}+/-{std * scale:.2f}{star}")
        lines.append("| " + " | ".join([name] + cells) + " |")
    with open(md_path, "w") as f:
        f.write("\n".join(lines) + "\n")


# --- report -----------------------------------------------------------------------

def cmd_report(args):
    named = []
    for run_dir in args.runs:
        curves = os.path.join(run_dir, "curves.csv")
        if not os.path.exists(curves):
            print(f"segforge: warning: no curves.csv in {run_dir}, skipping", file=sys.stderr)
            continue
        named.append((os.path.basename(os.path.normpath(run_dir)), CurveLog.from_csv(curves)))
    if not named:
        raise ConfigError("no run directory with curves.csv given")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "curves.svg"), "w") as f:
        f.write(curve_figure(named))
    with open(os.path.join(args.out, "summary.md"), "w") as f:
        f.write(summary_markdown(named))
    print(f"report written to {args.out}")
    return 0


# --- parser -------------------------------------------------------------------------

def _add_train_flags(p, default_epochs=8):
    p.add_argument("--variant", choices=sorted(VARIANTS), default="sar")
    p.add_argument("--loss", choices=("bce", "wbce"), default="wbce")
    p.add_argument("--epochs", type=int, default=default_epochs)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--step-size", type=int, default=4)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--checkpoint-every", type=int, default=5)
    p.add_argument("--no-augment", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="segforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantoms", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100, help="training cases")
    p.add_argument("--val-count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--blur-sigma", type=float, default=2.2)
    p.add_argument("--frac-small", type=float, default=0.2)
    p.add_argument("--frac-disconnected", type=float, default=0.2)
    p.add_argument("--frac-blurred", type=float, default=0.2)
    p.set_defaults(fn=cmd_phantoms)

    p = sub.add_parser("preprocess", help="window/equalize/resample/normalize/standardize volumes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-lo", type=float, default=-200.0)
    p.add_argument("--window-hi", type=float, default=200.0)
    p.add_argument("--target-dz", type=float, default=1.0)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train one variant and evaluate its validation split")
    p.add_argument("--data", required=True, help="dataset manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value file; flags override")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all five variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    _add_train_flags(p, default_epochs=6)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render curve plots and a summary for run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def _apply_config_file(args, argv):
    if getattr(args, "config", None):
        file_vals = _read_kv_config(args.config)
        argv_flags = {a.split("=")[0] for a in argv if a.startswith("--")}
        for key, val in file_vals.items():
            attr = key.replace("-", "_")
            if not hasattr(args, attr):
                raise ConfigError(f"unknown config key {key!r} in {args.config}")
            if f"--{key.replace('_', '-')}" in argv_flags:
                continue  # explicit flag wins
            current = getattr(args, attr)
            if isinstance(current, bool):
                setattr(args, attr, val.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(args, attr, int(val))
            elif isinstance(current, float):
                setattr(args, attr, float(val))
            else:
                setattr(args, attr, val)
    return args


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args, argv)
        return args.fn(args)
    except (ConfigError, InputError) as e:
        return _fail(2, str(e))
    except (TrainingDivergence, DegenerateStatistics, FloatingPointError) as e:
        return _fail(3, str(e))
    except (FormatError, OSError) as e:
        return _fail(4, str(e))


if __name__ == "__main__":
    sys.exit(main())
