"""Command-line pipeline: train, register, verify, attack, calibrate, analyze.

Exit codes: 0 success / authenticated, 1 rejected, 2+ operational errors.
Key material comes from --key "p,q,T" or the RELZERO_KEY environment variable
and is never written to disk. Defaults (224px canvas, 16px patches, K=50,
binomial calibration at FPR 1e-3) reproduce the standard setup.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, imaging, perturb, predictor, relational, watermark
from .imaging import ImageBuffer, PatchFeatureMap

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
EMB_SUFFIX = ".emb"
DEFAULT_CHECKPOINT = "predictor.rzmlp"


@dataclass
class RunConfig:
    image_side: int = 224
    patch_side: int = 16
    k: int = 50
    feature_source: str = "mean_rgb"
    checkpoint: str = DEFAULT_CHECKPOINT
    registry: str = "registry"
    key: str | None = None
    calib: str = "binom"
    fpr: float = 1e-3
    seed: int = 0

    @property
    def P(self) -> int:
        side = self.image_side // self.patch_side
        return side * side

    @property
    def M(self) -> int:
        return self.P * (self.P - 1) // 2


class CliError(RuntimeError):
    """Operational failure reported with exit code 2."""


def load_config_file(path: str | Path) -> dict:
    """Parse the optional key=value config file (UTF-8, # comments)."""
    values = {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        if key not in known:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    file_values = load_config_file(args.config) if args.config else {}
    casts = {
        "image_side": int, "patch_side": int, "k": int, "seed": int,
        "fpr": float, "feature_source": str, "checkpoint": str,
        "registry": str, "key": str, "calib": str,
    }
    for key, value in file_values.items():
        setattr(cfg, key, casts[key](value))
    for key in casts:
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    if cfg.image_side % cfg.patch_side:
        raise CliError(
            f"image side {cfg.image_side} not divisible by patch side {cfg.patch_side}"
        )
    if cfg.calib not in ("binom", "hyper"):
        raise CliError(f"calibration mode must be binom or hyper, got {cfg.calib!r}")
    return cfg


def resolve_key(cfg: RunConfig, P: int | None = None) -> watermark.ArnoldKey:
    """Arnold key from --key/config/RELZERO_KEY as 'p,q,T'.

    The grid side is derived from the pair-universe size of P patches
    (config-default P unless the actual patch count is supplied).
    """
    raw = cfg.key or os.environ.get("RELZERO_KEY")
    if not raw:
        raise CliError("no key: pass --key p,q,T or set RELZERO_KEY")
    parts = raw.split(",")
    if len(parts) != 3:
        raise CliError(f"key must be 'p,q,T', got {raw!r}")
    try:
        p, q, t = (int(s.strip()) for s in parts)
    except ValueError:
        raise CliError(f"key must be three integers 'p,q,T', got {raw!r}") from None
    try:
        return watermark.ArnoldKey(p, q, t, watermark.grid_side_for(P or cfg.P))
    except ValueError as exc:
        raise CliError(str(exc)) from None


def make_calibration(cfg: RunConfig, K: int, M: int) -> watermark.CalibrationResult:
    mode = "binomial" if cfg.calib == "binom" else "hypergeometric"
    try:
        return watermark.calibrate(K, cfg.fpr, mode, M=M if mode == "hypergeometric" else None)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def _load_features(path: Path, cfg: RunConfig) -> tuple[PatchFeatureMap, ImageBuffer | None]:
    """Feature map from an image file (mean-RGB) or a .emb embeddings file."""
    if path.suffix.lower() == EMB_SUFFIX:
        return imaging.load_embeddings(path), None
    img = imaging.load_image(path, cfg.image_side)
    return imaging.extract_mean_rgb(img, cfg.patch_side), img


def _corpus_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise CliError(f"not a directory: {directory}")
    files = sorted(
        p for p in directory.iterdir()
        if p.suffix.lower() in IMAGE_SUFFIXES | {EMB_SUFFIX}
    )
    if not files:
        raise CliError(f"no images found in {directory}")
    return files


def _paired_file(edited_dir: Path, name: str) -> Path:
    for suffix in [Path(name).suffix, *sorted(IMAGE_SUFFIXES), EMB_SUFFIX]:
        candidate = edited_dir / (Path(name).stem + suffix)
        if candidate.exists():
            return candidate
    raise CliError(f"unpaired file: no counterpart for {name!r} in {edited_dir}")


def _training_pairs(
    cfg: RunConfig, image_dir: Path, edited_dir: Path | None
) -> list[tuple[PatchFeatureMap, PatchFeatureMap]]:
    pairs = []
    for idx, path in enumerate(_corpus_files(image_dir)):
        fm, img = _load_features(path, cfg)
        if edited_dir is not None:
            edited_fm, _ = _load_features(_paired_file(edited_dir, path.name), cfg)
        else:
            if img is None:
                raise CliError(
                    f"{path}: embeddings input needs --edited-dir (no pixels to edit)"
                )
            edited = perturb.surrogate_edit(img, _derived_seed(cfg.seed, idx))
            edited_fm = imaging.extract_mean_rgb(edited, cfg.patch_side)
        pairs.append((fm, edited_fm))
    return pairs


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    pairs = _training_pairs(cfg, Path(args.image_dir),
                            Path(args.edited_dir) if args.edited_dir else None)
    train_cfg = predictor.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=cfg.seed,
        K=cfg.k,
        pos_weight=args.pos_weight,
    )
    model = predictor.train(pairs, train_cfg)
    predictor.save_checkpoint(model, cfg.checkpoint)
    print("epoch,loss")
    for epoch, loss in enumerate(model.loss_history or []):
        print(f"{epoch},{loss:.12g}")
    print(f"final_loss={min(model.loss_history):.12g}")
    print(f"checkpoint={cfg.checkpoint}")
    return 0


def _load_model(cfg: RunConfig) -> predictor.PredictorModel:
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise CliError(f"missing checkpoint: {path}")
    try:
        return predictor.load_checkpoint(path)
    except ValueError as exc:
        raise CliError(f"bad checkpoint {path}: {exc}") from None


def cmd_register(cfg: RunConfig, args: argparse.Namespace) -> int:
    model = _load_model(cfg)
    fm, _ = _load_features(Path(args.image), cfg)
    key = resolve_key(cfg, P=fm.P)
    wm = predictor.extract_watermark(model, fm, cfg.k)
    record = watermark.encrypt(
        wm,
        key,
        content_id=args.content_id,
        patch_side=cfg.patch_side,
        image_side=cfg.image_side,
        feature_source=fm.source,
    )
    try:
        path = watermark.registry_put(cfg.registry, record, force=args.force)
    except FileExistsError as exc:
        raise CliError(str(exc)) from None
    print(f"registered {args.content_id} K={record.K} record={path}")
    return 0


def cmd_verify(cfg: RunConfig, args: argparse.Namespace) -> int:
    model = _load_model(cfg)
    record = watermark.registry_get(cfg.registry, args.content_id)
    # mirror the registration geometry recorded with the watermark
    geo = replace(cfg, image_side=record.image_side, patch_side=record.patch_side)
    key = resolve_key(cfg, P=record.P)
    fm, _ = _load_features(Path(args.image), geo)
    suspect = predictor.extract_watermark(model, fm, record.K)
    calib = make_calibration(cfg, record.K, record.M)
    result = watermark.verify(record, key, suspect, calib)
    verdict = "AUTH" if result.authenticated else "REJECT"
    print(
        f"{verdict} η={result.eta:.4f} m={result.overlap_count} "
        f"thr={result.threshold_m}"
    )
    return 0 if result.authenticated else 1


def cmd_attack(cfg: RunConfig, args: argparse.Namespace) -> int:
    spec = perturb.parse_attack_spec(args.attack_spec, seed=cfg.seed)
    path = Path(args.image)
    if not path.exists():
        raise CliError(f"no such image: {path}")
    img = imaging.load_image(path, target_side=None)
    out = perturb.apply_attack(img, spec)
    imaging.save_image(out, args.out_path)
    print(f"wrote {args.out_path} ({spec.label()} seed={spec.seed})")
    return 0


def cmd_calibrate(cfg: RunConfig, args: argparse.Namespace) -> int:
    calib = make_calibration(cfg, cfg.k, cfg.M)
    print(
        f"m={calib.m} tau={calib.tau:g} achieved_fpr={calib.achieved_fpr:.6g} "
        f"mode={calib.mode} K={calib.K}"
    )
    return 0


def _edited_counterpart(
    cfg: RunConfig, path: Path, img: ImageBuffer | None,
    edited_dir: Path | None, edited_file: Path | None, idx: int,
) -> PatchFeatureMap:
    if edited_file is not None:
        fm, _ = _load_features(edited_file, cfg)
        return fm
    if edited_dir is not None:
        fm, _ = _load_features(_paired_file(edited_dir, path.name), cfg)
        return fm
    if img is None:
        raise CliError(f"{path}: embeddings input needs an edited counterpart")
    edited = perturb.surrogate_edit(img, _derived_seed(cfg.seed, idx))
    return imaging.extract_mean_rgb(edited, cfg.patch_side)


def cmd_analyze(cfg: RunConfig, args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    render = not args.no_figures
    if render:
        from . import figures

    if args.analysis in ("regression", "ssm"):
        reg_rows, ssm_rows = [], []
        edited_dir = Path(args.edited_dir) if args.edited_dir else None
        for idx, name in enumerate(args.inputs):
            path = Path(name)
            fm, img = _load_features(path, cfg)
            edited_fm = _edited_counterpart(cfg, path, img, edited_dir, None, idx)
            before = relational.pairwise_distances(fm)
            after = relational.pairwise_distances(edited_fm)
            if args.analysis == "regression":
                report = analysis.fit_distance_regression(before, after)
                reg_rows.append((path.stem, report))
                if render:
                    figures.regression_scatter(
                        before, after, report, out_dir / f"regression_{path.stem}.png"
                    )
            else:
                report = analysis.ssm_residual(before, after)
                ssm_rows.append((path.stem, report))
                if render:
                    figures.ssm_panels(
                        before, after, report, out_dir / f"ssm_{path.stem}.png"
                    )
        if args.analysis == "regression":
            analysis.write_regression_csv(out_dir / "regression.csv", reg_rows)
            print(f"wrote {out_dir / 'regression.csv'} ({len(reg_rows)} rows)")
        else:
            analysis.write_ssm_csv(out_dir / "ssm.csv", ssm_rows)
            print(f"wrote {out_dir / 'ssm.csv'} ({len(ssm_rows)} rows)")
        return 0

    if args.analysis == "residuals":
        if len(args.inputs) != 1:
            raise CliError("residuals takes exactly one input image")
        path = Path(args.inputs[0])
        fm, img = _load_features(path, cfg)
        edited_fm = _edited_counterpart(
            cfg, path, img, None,
            Path(args.edited) if args.edited else None, 0,
        )
        before = relational.pairwise_distances(fm)
        after = relational.pairwise_distances(edited_fm)
        hist = analysis.residual_distribution(before, after, bins=args.bins)
        analysis.write_residuals_csv(out_dir / "residuals.csv", hist)
        if render:
            figures.residual_hist(hist, out_dir / "residuals.png")
        print(f"wrote {out_dir / 'residuals.csv'} ({len(hist.counts)} bins)")
        return 0

    if args.analysis == "uniqueness":
        ids = list(args.inputs)
        if len(ids) < 2:
            raise CliError("uniqueness needs at least 2 registered content ids")
        sets, k_sizes = [], set()
        for content_id in ids:
            record = watermark.registry_get(cfg.registry, content_id)
            key = resolve_key(cfg, P=record.P)
            sets.append(watermark.decrypt(record, key))
            k_sizes.add(record.K)
        if len(k_sizes) != 1:
            raise CliError(f"registered watermarks disagree on K: {sorted(k_sizes)}")
        report = analysis.uniqueness_study(sets, k_sizes.pop(), ids=ids)
        analysis.write_uniqueness_csv(out_dir / "uniqueness.csv", report)
        if render:
            figures.uniqueness_hist(report, out_dir / "uniqueness.png")
        print(
            f"wrote {out_dir / 'uniqueness.csv'} ({len(report.etas)} pairs, "
            f"mean={report.mean:.5f} max={report.max:.5f})"
        )
        return 0

    if args.analysis == "sweep":
        model = _load_model(cfg)
        key = resolve_key(cfg)
        calib = make_calibration(cfg, cfg.k, cfg.M)
        corpus = []
        for path in _corpus_files(Path(args.inputs[0])):
            if path.suffix.lower() == EMB_SUFFIX:
                raise CliError("sweep needs pixel images (attacks act on pixels)")
            corpus.append((path.stem, imaging.load_image(path, cfg.image_side)))
        if args.attacks:
            attacks = [perturb.parse_attack_spec(s) for s in args.attacks.split(",")]
        else:
            attacks = perturb.attack_matrix()
        rows = analysis.robustness_sweep(
            model, corpus, key, calib, attacks,
            patch_side=cfg.patch_side, seed=cfg.seed,
        )
        analysis.write_robustness_csv(out_dir / "robustness.csv", rows)
        if render:
            figures.robustness_bars(rows, out_dir / "robustness.png")
        print(f"wrote {out_dir / 'robustness.csv'} ({len(rows)} attacks, n={len(corpus)})")
        return 0

    raise CliError(f"unknown analysis {args.analysis!r}")  # pragma: no cover


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value config file")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--key", metavar="p,q,T", help="Arnold key (or env RELZERO_KEY)")
    common.add_argument("--registry", metavar="DIR", help="record registry directory")
    common.add_argument("--calib", choices=("binom", "hyper"), help="calibration null model")
    common.add_argument("--fpr", type=float, help="target false-positive rate (default 1e-3)")
    common.add_argument("--k", type=int, help="watermark size in pairs (default 50)")
    common.add_argument("--patch-side", type=int, dest="patch_side", help="patch side in px")
    common.add_argument("--image-side", type=int, dest="image_side", help="resize target in px")
    common.add_argument("--checkpoint", metavar="FILE", help="predictor checkpoint path")
    common.add_argument("--feature-source", dest="feature_source",
                        choices=("mean_rgb", "external"), help=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(
        prog="relzero",
        description="Relational zero-watermarking: register and verify images "
        "by editing-invariant patch-pair fingerprints.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fit the pair predictor")
    p.add_argument("image_dir")
    p.add_argument("--edited-dir", help="pre-edited counterparts paired by filename")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--pos-weight", type=float, default=None,
                   help="positive-class weight (default: negative/positive ratio)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", parents=[common], help="store an image watermark")
    p.add_argument("image")
    p.add_argument("content_id")
    p.add_argument("--force", action="store_true", help="overwrite an existing record")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("verify", parents=[common], help="verify a suspect image")
    p.add_argument("image")
    p.add_argument("content_id")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", parents=[common], help="apply a perturbation")
    p.add_argument("image")
    p.add_argument("attack_spec", help="kind[:value[:seed]], e.g. contrast:2.0 sp:0.03 rot:5")
    p.add_argument("out_path")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("calibrate", parents=[common], help="print the decision threshold")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("analyze", parents=[common], help="statistical reports (CSV + figures)")
    p.add_argument("analysis",
                   choices=("regression", "residuals", "ssm", "uniqueness", "sweep"))
    p.add_argument("inputs", nargs="+",
                   help="images (regression/residuals/ssm), content ids (uniqueness), "
                        "or a corpus dir (sweep)")
    p.add_argument("--out-dir", default=".", help="where CSVs and figures go")
    p.add_argument("--edited-dir", help="edited counterparts paired by filename")
    p.add_argument("--edited", help="edited counterpart for a single input")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--attacks", help="comma-separated attack specs (default: full grid)")
    p.add_argument("--no-figures", action="store_true", help="emit CSVs only")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return args.func(cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (
        FileNotFoundError,
        watermark.MissingRecordError,
        watermark.CorruptRecordError,
        watermark.DecryptError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
