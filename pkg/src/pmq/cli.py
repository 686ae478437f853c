"""Command-line entry point: ``pmq {init-config,gen-data,train,run,report}``.

Exit codes: 0 success, 1 usage error, 2 infeasible budget, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import allocator, data, pipeline, storage, vit
from .config import PipelineConfig, dump_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_BUDGET, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("pmq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> PipelineConfig:
    return load_config(args.config, args.set)


def cmd_init_config(args) -> int:
    text = dump_config(_config(args))
    if args.out:
        storage.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    m, d = cfg.model, cfg.data
    ds = data.generate(
        seed=d.seed if args.seed is None else args.seed,
        classes=m.num_classes,
        train_samples=d.train_samples if args.samples is None else args.samples,
        test_samples=d.test_samples,
        patches=m.patches,
        patch_dim=m.patch_dim,
        separation=d.separation,
        informative_patches=d.informative_patches,
        noise=d.noise,
    )
    data.save(args.out, ds)
    print(f"wrote {len(ds.x_train)} train / {len(ds.x_test)} test samples to {args.out}")
    return EXIT_OK


def _check_dataset(cfg: PipelineConfig, ds: data.Dataset) -> None:
    m = cfg.model
    if (ds.patches, ds.patch_dim, ds.num_classes) != (m.patches, m.patch_dim, m.num_classes):
        raise UsageError(
            f"dataset layout (patches={ds.patches}, patch_dim={ds.patch_dim}, classes={ds.num_classes}) "
            f"does not match the model config"
        )


def train_checkpoint(cfg: PipelineConfig, ds: data.Dataset, out: str | Path) -> dict:
    t = cfg.train
    params = vit.ViTParams.init(cfg.model.vit_config(), np.random.default_rng(t.seed), std=t.init_std)
    result = vit.train_toy(params, ds.x_train, ds.y_train, epochs=t.epochs, lr=t.lr,
                           batch_size=t.batch_size, momentum=t.momentum, seed=t.seed,
                           clip_norm=t.clip_norm, schedule=t.schedule)
    meta = result.metadata()
    meta["converged"] = result.final_grad_norm <= t.grad_norm_threshold
    meta["grad_norm_threshold"] = t.grad_norm_threshold
    return storage.save_checkpoint(out, result.params, {"train": meta})


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = data.load(args.data)
    _check_dataset(cfg, ds)
    try:
        manifest = train_checkpoint(cfg, ds, args.out)
    except vit.TrainingError as e:
        storage.save_checkpoint(args.out, e.last_valid, {"train": {"diverged": str(e)}})
        raise
    tr = manifest["meta"]["train"]
    print(f"loss {tr['initial_loss']:.4f} -> {tr['final_loss']:.4f}, train accuracy {tr['train_accuracy']:.3f}, "
          f"grad norm {tr['final_grad_norm']:.2e}")
    if not tr["converged"]:
        log.warning("final gradient norm %.3g is above the threshold %.3g", tr["final_grad_norm"],
                    tr["grad_norm_threshold"])
    print(f"checkpoint {args.out} ({manifest['manifest_sha256'][:12]})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    params, meta = storage.load_checkpoint(args.checkpoint)
    if params.config != cfg.model.vit_config():
        raise UsageError("checkpoint model config differs from the pipeline config")
    ds = data.load(args.data)
    _check_dataset(cfg, ds)
    pipeline.check_convergence(meta, cfg.train.grad_norm_threshold)
    stages = pipeline.STAGES if args.stage == "all" else (args.stage,)
    with storage.artifact_lock(args.out):
        report = pipeline.run(cfg, params, ds, args.out, stages)
    if report is not None:
        print(f"accuracy {report.accuracy:.4f} (float {report.float_accuracy:.4f}), "
              f"size {report.size_bits} bits, omega {report.omega:.4g}")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    if not path.is_file():
        raise storage.ArtifactError(f"missing artifact: {path}")
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    if not rows:
        raise storage.ArtifactError(f"empty artifact: {path}")
    return rows


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report(directory: str | Path, out: str | Path | None = None) -> str:
    """Write plot CSVs and return a printable summary of an artifact directory."""
    directory = Path(directory)
    out = Path(out) if out else directory / "plots"
    missing = [name for name in pipeline.ARTIFACTS if not (directory / name).is_file()]
    if missing:
        raise storage.ArtifactError("missing artifact(s): " + ", ".join(str(directory / m) for m in missing))
    frontier = _read_csv(directory / pipeline.FRONTIER_CSV)
    sens = storage.read_json(directory / pipeline.SENSITIVITY_JSON)
    if not sens:
        raise storage.ArtifactError(f"empty artifact: {directory / pipeline.SENSITIVITY_JSON}")
    patches = storage.read_json(directory / pipeline.PATCH_JSON)
    rep = storage.read_json(directory / pipeline.REPORT_JSON)

    sizes = [int(r["size_bits"]) for r in frontier]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise storage.ArtifactError(f"{directory / pipeline.FRONTIER_CSV}: sizes are not strictly increasing")
    storage.atomic_write_text(out / "frontier_plot.csv",
                              _csv_text(["size_bits", "omega"], [(r["size_bits"], r["omega"]) for r in frontier]))
    storage.atomic_write_text(out / "sensitivity.csv",
                              _csv_text(["component", "score"], [(s["component"], repr(s["score"])) for s in sens]))
    hist_rows = []
    for p in patches:
        for bits, count in sorted(Counter(p["bits"]).items()):
            hist_rows.append((p["layer"], bits, count))
    storage.atomic_write_text(out / "patch_bits_hist.csv", _csv_text(["layer", "bits", "count"], hist_rows))

    lines = [
        f"artifacts: {directory}",
        f"accuracy        {rep['accuracy']:.4f}   (float {rep['float_accuracy']:.4f})",
        f"argmax agree    {rep['agreement']:.4f}",
        f"logit mse       {rep['logit_mse']:.4g}",
        f"model size      {rep['size_bits']} bits",
        f"perturbation    {rep['omega']:.4g}",
        f"frontier points {len(frontier)}",
        "",
        f"{'component':<16}{'score':>14}{'w bits':>8}{'a bits':>8}",
    ]
    for s in sens:
        c = rep["config"].get(s["component"], {})
        lines.append(f"{s['component']:<16}{s['score']:>14.4g}{c.get('weight_bits', '-'):>8}{c.get('act_bits', '-'):>8}")
    lines.append("")
    lines.append(f"{'layer':<8}{'base':>6}{'avg patch bits':>16}  histogram")
    for p in patches:
        hist = " ".join(f"{b}:{n}" for b, n in sorted(Counter(p["bits"]).items()))
        lines.append(f"{p['layer']:<8}{p['base_bits']:>6}{p['average_bits']:>16.3f}  {hist}")
    lines.append(f"plot data written to {out}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    print(report(args.artifacts, args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pmq", description="Patch-wise mixed-precision quantization of a toy ViT")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="YAML pipeline config (defaults apply when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set search.budget_uniform_bits=4")
        return sp

    sp = with_config(sub.add_parser("init-config", help="print the effective config"))
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_init_config)

    sp = with_config(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    sp.add_argument("--out", required=True, help="dataset manifest path (.json); blob goes next to it")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--samples", type=int, help="training samples")
    sp.set_defaults(fn=cmd_gen_data)

    sp = with_config(sub.add_parser("train", help="train the toy ViT"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint manifest path (.json)")
    sp.set_defaults(fn=cmd_train)

    sp = with_config(sub.add_parser("run", help="run the quantization pipeline"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="artifact directory")
    sp.add_argument("--stage", choices=("all",) + pipeline.STAGES, default="all")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("report", help="summarize an artifact directory")
    sp.add_argument("artifacts")
    sp.add_argument("--out", help="directory for plot CSVs (default <artifacts>/plots)")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse: --help or a usage error
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except vit.TrainingError as e:
        print(f"pmq: training failed: {e}; last valid parameters were saved", file=sys.stderr)
        return EXIT_USAGE
    except allocator.InfeasibleBudget as e:
        print(f"pmq: infeasible budget: {e}; minimum achievable size is {e.minimum} bits", file=sys.stderr)
        return EXIT_BUDGET
    except (ValidationError, UsageError, ValueError) as e:
        print(f"pmq: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"pmq: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
